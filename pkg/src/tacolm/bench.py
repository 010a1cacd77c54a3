"""Efficiency and ablation harness: parameter counts, allocator peaks,
forward/backward timings, incremental-decoding RTF and attention-memory
scaling for the three model variants."""

from __future__ import annotations

import contextlib
import csv
import gc
import hashlib
import json
import math
import os
import platform
import statistics
import time
from dataclasses import asdict, dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from . import numerics as nx
from .codec import FPS
from .layers import GPSA, build_prefix_mask
from .model import VARIANTS, ArModel, ModelConfig, ar_batch, count_params
from .synth import ArDecoder
from .train import DivergenceError, ScheduleConfig, TrainConfig, cross_entropy, eval_ppl, train

CSV_FIELDS = ["variant", "seq_len", "params", "peak_bytes", "fwd_ms", "fwdbwd_ms",
              "tokens_per_s", "rtf", "seed", "hw"]


def hardware_descriptor(threads: int | None = 1) -> str:
    threads = threads if threads is not None else "all"
    return (f"{platform.machine()}/{platform.system()}/py{platform.python_version()}"
            f"/numpy{np.__version__}/cpus{os.cpu_count()}/threads{threads}")


def config_digest(config: ModelConfig) -> str:
    raw = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(raw).hexdigest()[:12]


@dataclass
class BenchReport:
    variant: str
    seq_len: int
    params: int
    peak_bytes: int
    fwd_ms: float
    fwdbwd_ms: float
    tokens_per_s: float
    rtf: float
    seed: int
    hw: str
    steps_per_s: float = 0.0
    config_digest: str = ""

    def row(self) -> dict:
        return {k: getattr(self, k) for k in CSV_FIELDS}


def _median_ms(fn, repeats: int, warmup: int, setup=None) -> float:
    """Median wall time of ``fn``; ``setup()`` runs untimed and its result is passed to ``fn``.

    The cyclic garbage collector is paused while timing, as ``timeit`` does,
    so collection pauses driven by unrelated live objects do not leak in.
    """
    def once():
        arg = () if setup is None else (setup(),)
        gc.collect()
        enabled = gc.isenabled()
        gc.disable()
        try:
            t0 = time.perf_counter()
            fn(*arg)
            return time.perf_counter() - t0
        finally:
            if enabled:
                gc.enable()

    for _ in range(warmup):
        once()
    times = [once() for _ in range(repeats)]
    ms = statistics.median(times) * 1000
    if ms <= 0:
        raise RuntimeError("timer resolution too coarse for this configuration; enlarge the run")
    return ms


def synthetic_sequence(seq_len: int, seed: int, text_frac: float = 0.125):
    """Random text ids and layer-1 codes filling ``seq_len`` joint positions."""
    rng = np.random.default_rng(seed)
    lt = max(1, int(seq_len * text_frac))
    la = seq_len - lt - 1
    if la < 1:
        raise ValueError("sequence too short for a text prefix and audio")
    return rng.integers(2, 100, lt), rng.integers(0, 1024, la)


def bench_variant(model: ArModel, seq_len: int, repeats: int = 5, warmup: int = 1,
                  seed: int = 0, decode_steps: int = 75, hw: str | None = None) -> BenchReport:
    if repeats < 1:
        raise ValueError("repeats must be positive")
    text, audio = synthetic_sequence(seq_len, seed)
    batch = ar_batch([text], [audio])

    def fwd():
        with nx.no_grad():
            model.forward(batch)

    def fwdbwd():
        loss = cross_entropy(model.forward(batch), batch.targets, batch.loss_mask)
        nx.backward(loss)
        for p in model.parameters():
            p.grad = None

    fwd_ms = _median_ms(fwd, repeats, warmup)
    fwdbwd_ms = _median_ms(fwdbwd, repeats, warmup)
    with nx.peak_memory() as mem:
        fwdbwd()

    # incremental decoding: prefill and state cloning untimed, then time the steps
    n = min(decode_steps, audio.size)
    base = ArDecoder(model, text)
    base.prefill(audio[:audio.size - n])
    tail = audio[audio.size - n:]

    def decode(dec):
        for code in tail:
            dec.step(int(code))

    step_ms = _median_ms(decode, repeats, warmup, setup=base.clone) / n
    return BenchReport(
        variant=model.variant, seq_len=seq_len, params=model.num_params(), peak_bytes=mem.peak,
        fwd_ms=fwd_ms, fwdbwd_ms=fwdbwd_ms, tokens_per_s=seq_len / (fwdbwd_ms / 1000),
        rtf=step_ms / 1000 * FPS, seed=seed, hw=hw or hardware_descriptor(),
        steps_per_s=1000 / fwdbwd_ms, config_digest=config_digest(model.config))


def bench_attention(variants=VARIANTS, seq_lengths=(512, 1024, 2048, 4096),
                    config: ModelConfig | None = None, repeats: int = 5, warmup: int = 1,
                    seed: int = 0, decode_steps: int = 75, log=None, threads: int | None = 1) -> list:
    """Time every variant at every length; one :class:`BenchReport` each.

    Numeric libraries are pinned to ``threads`` threads (``None`` leaves them
    free); the thread setting is part of the hardware descriptor so rows from
    different settings are never compared.
    """
    config = config or ModelConfig.desk()
    hw = hardware_descriptor(threads)
    reports = []
    limiter = threadpool_limits(limits=threads) if threads is not None else contextlib.nullcontext()
    with limiter:
        for v in variants:
            model = ArModel(config, v, seed=seed)
            for L in seq_lengths:
                r = bench_variant(model, L, repeats, warmup, seed, decode_steps, hw)
                if log:
                    log(f"{v} L={L}: fwd {r.fwd_ms:.1f} ms, fwd+bwd {r.fwdbwd_ms:.1f} ms, rtf {r.rtf:.3f}")
                reports.append(r)
    return reports


def attention_score_bytes(seq_len: int, chunk: int | None, config: ModelConfig | None = None,
                          seed: int = 0) -> int:
    """Allocator peak inside one GPSA attention kernel (inputs and mask excluded)."""
    config = config or ModelConfig.desk()
    rng = np.random.default_rng(seed)
    layer = GPSA(config.d_model, config.qk_v_dim, config.qk_v_dim, config.ema_dim, rng, chunk=chunk)
    z = config.qk_v_dim
    q, k, v = (rng.normal(size=(1, seq_len, z)).astype(np.float32) for _ in range(3))
    lt = seq_len // 8
    mask = build_prefix_mask(lt, seq_len - lt).visible[None]
    with nx.no_grad(), nx.peak_memory() as mem:
        layer._attend(nx.tensor(q), nx.tensor(k), nx.tensor(v), mask, None)
    return mem.peak


# ---------------------------------------------------------------------------
# reporting


def write_csv(reports, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=CSV_FIELDS)
        w.writeheader()
        for r in reports:
            w.writerow(r.row())


def markdown_table(reports, baseline: str = "no_gca_no_gpsa") -> str:
    """Table with speed/memory ratios against the baseline row at the same length."""
    base = {r.seq_len: r for r in reports if r.variant == baseline}
    lines = ["| variant | seq_len | params | peak MiB | fwd ms | fwd+bwd ms | tokens/s | RTF "
             "| train speedup vs MHA | decode speedup vs MHA | memory ratio vs MHA |",
             "|---|---|---|---|---|---|---|---|---|---|---|"]
    for r in reports:
        b = base.get(r.seq_len)
        train_x = f"{r.tokens_per_s / b.tokens_per_s:.2f}x" if b else "n/a"
        dec_x = f"{b.rtf / r.rtf:.2f}x" if b else "n/a"
        mem_x = f"{r.peak_bytes / b.peak_bytes:.2f}" if b else "n/a"
        lines.append(f"| {r.variant} | {r.seq_len} | {r.params} | {r.peak_bytes / 2**20:.1f} | "
                     f"{r.fwd_ms:.1f} | {r.fwdbwd_ms:.1f} | {r.tokens_per_s:.0f} | {r.rtf:.3f} | "
                     f"{train_x} | {dec_x} | {mem_x} |")
    if reports:
        lines.append("")
        lines.append(f"seed {reports[0].seed}, config {reports[0].config_digest}, hw {reports[0].hw}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# ablation


class AblationError(RuntimeError):
    pass


@dataclass
class AblationRow:
    variant: str
    params: int
    ce_mean: float
    ce_std: float
    ppl_mean: float
    ppl_std: float
    steps_per_s: float
    peak_bytes: int
    rtf: float
    seeds: tuple


def ablate(records, steps: int, config: ModelConfig | None = None, seeds=(0, 1, 2),
           variants=VARIANTS, batch_tokens: int = 8192, peak_lr: float = 1e-3,
           eval_records=None, log=None) -> list:
    """Train each variant with identical seeds, data and step budget; one row per variant."""
    config = config or ModelConfig.tiny()
    eval_records = eval_records or records
    warmup = max(1, steps // 10)
    rows = []
    for v in variants:
        ces, ppls, rates = [], [], []
        model = None
        for s in seeds:
            cfg = TrainConfig(kind="ar", variant=v, steps=steps, batch_tokens=batch_tokens, seed=s,
                              schedule=ScheduleConfig(peak_lr, warmup, max(steps, warmup + 1)),
                              model=config)
            try:
                res = train(records, cfg)
            except DivergenceError as err:
                raise AblationError(f"variant {v!r} diverged with seed {s}: {err}") from err
            model = res.model
            ppl = eval_ppl(model, eval_records, batch_tokens)
            ppls.append(ppl)
            ces.append(math.log(ppl))
            rates.append(len(res.trace) / res.seconds)
        text, audio = records[0].text_ids, records[0].codes[:, 0]
        batch = ar_batch([text], [audio])
        with nx.peak_memory() as mem:
            loss = cross_entropy(model.forward(batch), batch.targets, batch.loss_mask)
            nx.backward(loss)
        n = min(25, audio.size)
        dec = ArDecoder(model, text)
        dec.prefill(audio[:audio.size - n])
        t0 = time.perf_counter()
        for code in audio[audio.size - n:]:
            dec.step(int(code))
        rtf = (time.perf_counter() - t0) / n * FPS
        row = AblationRow(v, count_params(config, v), float(np.mean(ces)), float(np.std(ces)),
                          float(np.mean(ppls)), float(np.std(ppls)), float(np.mean(rates)),
                          mem.peak, rtf, tuple(seeds))
        if log:
            log(f"{v}: ppl {row.ppl_mean:.3f} +- {row.ppl_std:.3f}, {row.steps_per_s:.2f} steps/s")
        rows.append(row)
    return rows


def ablation_table(rows) -> str:
    lines = ["| variant | #params | CE | PPL | steps/s | peak MiB | RTF |",
             "|---|---|---|---|---|---|---|"]
    for r in rows:
        lines.append(f"| {r.variant} | {r.params} | {r.ce_mean:.4f} +- {r.ce_std:.4f} | "
                     f"{r.ppl_mean:.3f} +- {r.ppl_std:.3f} | {r.steps_per_s:.2f} | "
                     f"{r.peak_bytes / 2**20:.1f} | {r.rtf:.3f} |")
    return "\n".join(lines)


def ablation_rows_json(rows) -> list:
    return [asdict(r) for r in rows]


# ---------------------------------------------------------------------------
# gradient checks


def _layer_case(op: str, rng: np.random.Generator):
    """Random small instance of one layer op: ``(loss_fn, params)`` in float64."""
    from . import layers as L

    t = int(rng.integers(1, 7))
    d = 2 * int(rng.integers(2, 5))   # width 2 makes layer norm constant, leaving only eps-sized gradients
    z = 2 * int(rng.integers(1, 4))
    x = nx.tensor(rng.normal(size=(t, d)), requires_grad=True)
    w = rng.normal(size=(t, d))
    if op == "damped_ema":
        layer = L.DampedEMA(d, int(rng.integers(1, 4)), rng)
        layer.delta_logit.value[:] = rng.normal(size=layer.delta_logit.shape)
        fn = lambda: layer(x)
    elif op == "gpsa":
        layer = L.GPSA(d, z, z, int(rng.integers(1, 4)), rng)
        lt = int(rng.integers(0, t + 1))
        mask = build_prefix_mask(lt, t - lt)
        fn = lambda: layer(x, mask)
    elif op == "gca":
        layer = L.GCA(d, z, z, rng)
        text = nx.tensor(rng.normal(size=(int(rng.integers(1, 6)), d)), requires_grad=True)
        fn = lambda: layer(x, text)
        return (lambda: nx.sum(nx.mul(fn(), w))), [x, text] + layer.parameters()
    elif op == "ffn":
        layer = L.FeedForward(d, int(rng.integers(1, 8)), rng)
        fn = lambda: layer(x)
    elif op == "mha":
        heads = int(rng.integers(1, 3))
        d = 4 * int(rng.integers(1, 3))
        x = nx.tensor(rng.normal(size=(t, d)), requires_grad=True)
        w = rng.normal(size=(t, d))
        layer = L.MultiHeadAttention(d, heads, rng)
        lt = int(rng.integers(0, t + 1))
        mask = build_prefix_mask(lt, t - lt)
        fn = lambda: layer(x, mask)
    elif op == "embedding":
        table = nx.tensor(rng.normal(size=(int(rng.integers(2, 9)), d)), requires_grad=True)
        ids = rng.integers(0, table.shape[0], size=t)
        return (lambda: nx.sum(nx.mul(nx.embedding(table, ids), w))), [table]
    elif op == "ar_head":
        norm, head = L.LayerNorm(d), L.Linear(d, int(rng.integers(2, 9)), rng)
        w = rng.normal(size=(t, head.weight.shape[1]))
        return (lambda: nx.sum(nx.mul(head(norm(x)), w))), [x] + norm.parameters() + head.parameters()
    elif op == "nar_head":
        # per-record head selected by target layer, as in the NAR model
        b, v = int(rng.integers(1, 4)), int(rng.integers(2, 9))
        h = nx.tensor(rng.normal(size=(b, t, d)), requires_grad=True)
        hw = nx.tensor(rng.normal(size=(7, d, v)), requires_grad=True)
        hb = nx.tensor(rng.normal(size=(7, v)), requires_grad=True)
        li = rng.integers(0, 7, size=b)
        w = rng.normal(size=(b, t, v))
        fn = lambda: nx.add(nx.matmul(h, nx.embedding(hw, li)), nx.embedding(hb, li)[:, None, :])
        return (lambda: nx.sum(nx.mul(fn(), w))), [h, hw, hb]
    else:
        raise ValueError(f"unknown op {op!r}")
    return (lambda: nx.sum(nx.mul(fn(), w))), [x] + layer.parameters()


GRADCHECK_OPS = ("damped_ema", "gpsa", "gca", "ffn", "mha", "embedding", "ar_head", "nar_head")


def layer_gradcheck(trials: int = 100, seed: int = 0) -> list:
    """Maximum relative error per seeded trial, cycling through the layer ops."""
    out = []
    with nx.precision(np.float64):
        for i in range(trials):
            op = GRADCHECK_OPS[i % len(GRADCHECK_OPS)]
            rng = np.random.default_rng([seed, i])
            fn, params = _layer_case(op, rng)
            out.append((op, max(nx.check_gradients(fn, params))))
    return out
