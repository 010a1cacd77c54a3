"""Loss, AdamW, warmup/decay schedule, clipping, training loops and perplexity."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import numerics as nx
from .model import (
    N_QUANTIZERS, ArModel, ModelConfig, NarModel, ar_batch, build_model, nar_batch,
)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# loss


def cross_entropy(logits, targets, mask=None) -> nx.Tensor:
    """Mean of ``-log softmax(logits)[target]`` over positions where ``mask`` holds."""
    logits = nx.as_tensor(logits)
    z = logits.value
    t = np.asarray(targets, dtype=np.int64)
    m = np.ones(t.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if t.shape != z.shape[:-1] or m.shape != t.shape:
        raise nx.ShapeError(f"targets {t.shape} / mask {m.shape} do not match logits {z.shape}")
    if t.size and (t.min() < 0 or t.max() >= z.shape[-1]):
        raise IndexError(f"target id out of range [0, {z.shape[-1]})")
    count = int(m.sum())
    if count == 0:
        raise ValueError("cross_entropy needs at least one unmasked position")
    z64 = z.astype(np.float64)
    zmax = z64.max(-1, keepdims=True)
    lse = np.log(np.exp(z64 - zmax).sum(-1)) + zmax[..., 0]
    picked = np.take_along_axis(z64, t[..., None], -1)[..., 0]
    loss = np.asarray(((lse - picked) * m).sum() / count, dtype=z.dtype)

    def bw(g):
        p = np.exp(z64 - lse[..., None])
        np.put_along_axis(p, t[..., None], np.take_along_axis(p, t[..., None], -1) - 1.0, -1)
        p *= (m / count)[..., None] * float(g)
        return (p.astype(z.dtype),)

    return nx.make_op(loss, (logits,), bw, "cross_entropy")


# ---------------------------------------------------------------------------
# schedule, clipping, optimizer


@dataclass(frozen=True)
class ScheduleConfig:
    peak_lr: float = 1e-3
    warmup: int = 12000
    total: int = 240000

    def __post_init__(self):
        if not 0 <= self.warmup < self.total:
            raise ValueError("need 0 <= warmup < total")


def lr_at(step: int, cfg: ScheduleConfig) -> float:
    """Linear ramp 0 -> peak over ``warmup`` steps, then linear decay to 0 at ``total``."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if step <= cfg.warmup:
        return cfg.peak_lr * step / cfg.warmup if cfg.warmup else cfg.peak_lr
    if step >= cfg.total:
        return 0.0
    return cfg.peak_lr * (cfg.total - step) / (cfg.total - cfg.warmup)


def clip_grad_norm(grads: dict, max_norm: float = 1.0):
    """Scale ``grads`` (name -> array) so their global L2 norm is at most ``max_norm``."""
    total = 0.0
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise nx.NonFiniteError(f"non-finite gradient in parameter {name!r}")
        total += float(np.sum(np.square(g, dtype=np.float64)))
    norm = math.sqrt(total)
    if norm > max_norm:
        s = max_norm / norm
        grads = {k: (g * s).astype(g.dtype) for k, g in grads.items()}
    return grads, norm


@dataclass
class OptimState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-9
    weight_decay: float = 0.05

    @classmethod
    def init(cls, params: dict, **hp) -> "OptimState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, **hp)

    def copy(self) -> "OptimState":
        return dataclasses.replace(self, m={k: a.copy() for k, a in self.m.items()},
                                   v={k: a.copy() for k, a in self.v.items()})


def adamw_step(params: dict, grads: dict, state: OptimState, lr: float):
    """One AdamW update; returns new ``(params, state)`` and leaves the inputs untouched."""
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1 - b1 ** step, 1 - b2 ** step
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape or state.m[k].shape != p.shape:
            raise nx.ShapeError(f"shape mismatch for {k!r}: param {p.shape}, grad {g.shape}")
        m = b1 * state.m[k] + (1 - b1) * g
        v = b2 * state.v[k] + (1 - b2) * g * g
        upd = (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_p[k] = (p - lr * state.weight_decay * p - lr * upd).astype(p.dtype)
        new_m[k], new_v[k] = m.astype(p.dtype), v.astype(p.dtype)
    return new_p, dataclasses.replace(state, m=new_m, v=new_v, step=step)


# ---------------------------------------------------------------------------
# batching


def record_tokens(rec, kind: str) -> int:
    n = len(rec.codes)
    return len(rec.text_ids) + n + (1 if kind == "ar" else 0)


def make_batches(records, budget: int, kind: str, rng: np.random.Generator | None = None) -> list:
    """Length-sorted packing into index lists whose padded size fits ``budget`` tokens."""
    order = sorted(range(len(records)), key=lambda i: (record_tokens(records[i], kind), i))
    batches, cur, longest = [], [], 0
    for i in order:
        n = record_tokens(records[i], kind)
        if cur and max(longest, n) * (len(cur) + 1) > budget:
            batches.append(cur)
            cur, longest = [], 0
        cur.append(i)
        longest = max(longest, n)
    if cur:
        batches.append(cur)
    if rng is not None:
        batches = [batches[j] for j in rng.permutation(len(batches))]
    return batches


def collate(records, kind: str, rng: np.random.Generator | None = None, layers=None):
    texts = [r.text_ids for r in records]
    if kind == "ar":
        return ar_batch(texts, [r.codes[:, 0] for r in records])
    if layers is None:
        layers = rng.integers(2, N_QUANTIZERS + 1, size=len(records))
    return nar_batch(texts, [r.codes for r in records], layers)


def batch_loss(model, batch, rng=None) -> nx.Tensor:
    return cross_entropy(model.forward(batch, rng), batch.targets, batch.loss_mask)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    kind: str = "ar"
    variant: str = "full"
    steps: int = 3000
    batch_tokens: int = 8192
    seed: int = 0
    max_norm: float = 1.0
    weight_decay: float = 0.05
    schedule: ScheduleConfig = field(default_factory=lambda: ScheduleConfig(1e-3, 100, 3000))
    model: ModelConfig = field(default_factory=ModelConfig.tiny)
    divergence_window: int = 100
    target_loss: float | None = None   # stop early once the running loss drops below this

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "schedule" in d:
            d["schedule"] = ScheduleConfig(**d["schedule"])
        if "model" in d:
            m = dict(d["model"])
            preset = m.pop("preset", None)
            base = getattr(ModelConfig, preset)() if preset else ModelConfig()
            d["model"] = dataclasses.replace(base, **m)
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def load_train_config(path) -> TrainConfig:
    with open(path, encoding="utf-8") as f:
        return TrainConfig.from_dict(yaml.safe_load(f) or {})


class DivergenceError(RuntimeError):
    pass


@dataclass
class TraceRow:
    step: int
    lr: float
    loss: float
    grad_norm: float


@dataclass
class TrainResult:
    model: object
    trace: list
    seconds: float

    @property
    def final_loss(self) -> float:
        return self.trace[-1].loss


def train(records, cfg: TrainConfig, model=None, on_step=None) -> TrainResult:
    """Train an AR or NAR model on ``records``; deterministic given ``cfg.seed``."""
    if not records:
        raise ValueError("training needs a non-empty corpus")
    model = model or build_model(cfg.kind, cfg.model, cfg.variant, seed=cfg.seed)
    named = list(model.named_parameters())
    state = OptimState.init({k: p.value for k, p in named}, weight_decay=cfg.weight_decay)
    trace, initial, bad = [], None, 0
    epoch, queue = 0, []
    t0 = time.perf_counter()
    for step in range(cfg.steps):
        if not queue:
            queue = make_batches(records, cfg.batch_tokens, cfg.kind, np.random.default_rng([cfg.seed, epoch]))
            epoch += 1
        idx = queue.pop(0)
        rng = np.random.default_rng([cfg.seed, step])
        batch = collate([records[i] for i in idx], cfg.kind, rng)
        for _, p in named:
            p.grad = None
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                loss = batch_loss(model, batch, rng if cfg.model.dropout > 0 else None)
                nx.backward(loss)
            grads = {k: p.grad if p.grad is not None else np.zeros_like(p.value) for k, p in named}
            grads, norm = clip_grad_norm(grads, cfg.max_norm)
        except nx.NonFiniteError as err:
            raise DivergenceError(f"non-finite values at step {step}: {err}") from err
        lr = lr_at(step + 1, cfg.schedule)
        new, state = adamw_step({k: p.value for k, p in named}, grads, state, lr)
        for k, p in named:
            p.value = new[k]
        value = loss.item()
        trace.append(TraceRow(step, lr, value, norm))
        if on_step is not None:
            on_step(trace[-1])
        if initial is None:
            initial = value
        if not math.isfinite(value):
            raise DivergenceError(f"loss became non-finite at step {step}")
        bad = bad + 1 if value > 10 * initial else 0
        if bad >= cfg.divergence_window:
            raise DivergenceError(f"loss above 10x its initial value for {bad} steps (step {step})")
        if cfg.target_loss is not None and len(trace) >= 5 \
                and max(r.loss for r in trace[-5:]) < cfg.target_loss:
            break
    return TrainResult(model, trace, time.perf_counter() - t0)


def write_trace(trace, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["step", "lr", "loss", "grad_norm"])
        for r in trace:
            w.writerow([r.step, repr(r.lr), repr(r.loss), repr(r.grad_norm)])


# ---------------------------------------------------------------------------
# evaluation


def mean_ce(model, records, batch_tokens: int = 8192, layers=None) -> float:
    """Token-weighted mean cross-entropy over ``records`` without dropout or tape."""
    if not records:
        raise ValueError("evaluation needs a non-empty corpus")
    kind = model.kind
    total, count = 0.0, 0
    with nx.no_grad():
        for idx in make_batches(records, batch_tokens, kind):
            recs = [records[i] for i in idx]
            lay = None if layers is None else np.full(len(recs), layers)
            batch = collate(recs, kind, np.random.default_rng(0), lay)
            n = batch.n_targets
            total += cross_entropy(model.forward(batch), batch.targets, batch.loss_mask).item() * n
            count += n
    return total / count


def eval_ppl(model: ArModel, records, batch_tokens: int = 8192) -> float:
    """Perplexity over every audio-slot prediction (codes and EOS)."""
    return math.exp(mean_ce(model, records, batch_tokens))
