"""AR and NAR codec language models, sequence layout, parameter counting
and checkpoint persistence."""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .layers import (
    GCA, GPSA, FeedForward, LayerNorm, Linear, Module, MultiHeadAttention,
    RopeConfig, normal,
)

N_QUANTIZERS = 8
CODEBOOK_SIZE = 1024
AUDIO_BOS = CODEBOOK_SIZE        # extra input row of the AR audio table
EOS = CODEBOOK_SIZE              # extra class of the AR head
TEXT_PAD, TEXT_UNK = 0, 1
N_TEXT_SPECIALS = 2
VARIANTS = ("full", "no_gca", "no_gca_no_gpsa")


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 384
    d_ffn: int = 768
    ema_dim: int = 24
    qk_v_dim: int = 240
    ar_blocks: int = 6
    nar_layers: int = 12
    text_vocab: int = 2000       # regular text tokens; specials are added on top
    n_quantizers: int = N_QUANTIZERS
    codebook_size: int = CODEBOOK_SIZE
    dropout: float = 0.1
    rope_base: float = 10000.0
    rope: bool = True
    chunk: int | None = None
    precision: str = "float32"
    # width of the vanilla multi-head baseline
    mha_d_model: int = 1024
    mha_heads: int = 16
    mha_d_ffn: int = 4096

    def __post_init__(self):
        if self.n_quantizers != N_QUANTIZERS or self.codebook_size != CODEBOOK_SIZE:
            raise ValueError("the codec layout is fixed at 8 quantizers of 1024 entries")
        extents = (self.d_model, self.d_ffn, self.ema_dim, self.qk_v_dim, self.ar_blocks,
                   self.nar_layers, self.text_vocab, self.mha_d_model, self.mha_heads, self.mha_d_ffn)
        if min(extents) < 1:
            raise ValueError("all model extents must be at least 1")
        if self.d_model % 2 or self.qk_v_dim % 2:
            raise ValueError("d_model and qk_v_dim must be even for rotary pairing")
        if self.mha_d_model % self.mha_heads or (self.mha_d_model // self.mha_heads) % 2:
            raise ValueError("baseline head width must be an even divisor of mha_d_model")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.chunk is not None and self.chunk < 1:
            raise ValueError("chunk must be positive")
        np.dtype(self.precision)

    @classmethod
    def tiny(cls, **kw) -> "ModelConfig":
        """Two-block model small enough to overfit a toy corpus in minutes."""
        base = dict(d_model=64, d_ffn=128, ema_dim=4, qk_v_dim=32, ar_blocks=2, nar_layers=2,
                    text_vocab=200, dropout=0.0, mha_d_model=64, mha_heads=2, mha_d_ffn=128)
        return cls(**{**base, **kw})

    @classmethod
    def desk(cls, **kw) -> "ModelConfig":
        """Matched 12-attention-layer desk scale; the baseline is wider, echoing the larger reference."""
        base = dict(d_model=64, d_ffn=128, ema_dim=4, qk_v_dim=40, ar_blocks=6, nar_layers=12,
                    text_vocab=200, dropout=0.0, mha_d_model=128, mha_heads=2, mha_d_ffn=512)
        return cls(**{**base, **kw})

    @property
    def text_rows(self) -> int:
        return self.text_vocab + N_TEXT_SPECIALS

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.precision)

    def rope_config(self) -> RopeConfig | None:
        return RopeConfig(self.rope_base) if self.rope else None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def width(config: ModelConfig, variant: str) -> int:
    return config.mha_d_model if variant == "no_gca_no_gpsa" else config.d_model


# ---------------------------------------------------------------------------
# models


class Block(Module):
    """One residual block: self-attention, optional cross-attention, feed-forward."""

    def __init__(self, attn, cross, ffn):
        self.attn = attn
        self.cross = cross
        self.ffn = ffn


class ArModel(Module):
    """Autoregressive model over layer-1 codes conditioned on text."""

    kind = "ar"

    def __init__(self, config: ModelConfig, variant: str = "full", seed: int = 0):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        self.config, self.variant = config, variant
        rng = np.random.default_rng(seed)
        c = config
        d = width(c, variant)
        rope = c.rope_config()
        with nx.precision(c.dtype):
            self.text_embed = normal(rng, (c.text_rows, d))
            self.audio_embed = normal(rng, (c.codebook_size + 1, d))
            self.type_embed = normal(rng, (2, d))
            blocks = []
            if variant == "full":
                for _ in range(c.ar_blocks):
                    blocks.append(Block(
                        GPSA(d, c.qk_v_dim, c.qk_v_dim, c.ema_dim, rng, rope, c.dropout, c.chunk),
                        GCA(d, c.qk_v_dim, c.qk_v_dim, rng, rope, c.dropout),
                        FeedForward(d, c.d_ffn, rng, c.dropout)))
            elif variant == "no_gca":
                for _ in range(2 * c.ar_blocks):
                    blocks.append(Block(
                        GPSA(d, c.qk_v_dim, c.qk_v_dim, c.ema_dim, rng, rope, c.dropout, c.chunk),
                        None, FeedForward(d, c.d_ffn, rng, c.dropout)))
            else:
                for _ in range(2 * c.ar_blocks):
                    blocks.append(Block(
                        MultiHeadAttention(d, c.mha_heads, rng, rope, c.dropout),
                        None, FeedForward(d, c.mha_d_ffn, rng, c.dropout)))
            self.blocks = blocks
            self.final_norm = LayerNorm(d)
            self.head = Linear(d, c.codebook_size + 1, rng)
            self.head.weight = normal(rng, self.head.weight.shape)

    @property
    def width(self) -> int:
        return width(self.config, self.variant)

    def forward(self, batch: "ArBatch", rng: np.random.Generator | None = None) -> nx.Tensor:
        """Logits ``(B, La, 1025)`` over the audio slots of ``batch``."""
        lt = batch.text.shape[1]
        x = nx.concat([nx.embedding(self.text_embed, batch.text),
                       nx.embedding(self.audio_embed, batch.audio)], axis=1)
        x = nx.add(x, nx.embedding(self.type_embed, batch.types))
        keep = batch.keep[..., None].astype(x.dtype)
        for blk in self.blocks:
            x = blk.attn(x, batch.mask, batch.positions, keep=keep, rng=rng)
            if blk.cross is not None:
                text, audio = x[:, :lt], x[:, lt:]
                audio = blk.cross(audio, text, batch.audio_positions, batch.text_positions,
                                  batch.text_visible, rng=rng)
                x = nx.concat([text, audio], axis=1)
            x = blk.ffn(x, rng)
        return self.head(self.final_norm(x[:, lt:]))


class NarModel(Module):
    """Non-autoregressive model predicting quantizer ``l`` from layers ``< l``."""

    kind = "nar"
    variant = "full"

    def __init__(self, config: ModelConfig, variant: str = "full", seed: int = 0):
        if variant != "full":
            raise ValueError("the NAR model has a single variant")
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        d = c.d_model
        rope = c.rope_config()
        with nx.precision(c.dtype):
            self.text_embed = normal(rng, (c.text_rows, d))
            self.audio_embeds = [_Table(normal(rng, (c.codebook_size, d))) for _ in range(c.n_quantizers)]
            self.layer_embed = normal(rng, (c.n_quantizers - 1, d))
            self.type_embed = normal(rng, (2, d))
            self.blocks = [
                Block(GPSA(d, c.qk_v_dim, c.qk_v_dim, c.ema_dim, rng, rope, c.dropout, c.chunk),
                      None, FeedForward(d, c.d_ffn, rng, c.dropout))
                for _ in range(c.nar_layers)]
            self.final_norm = LayerNorm(d)
            self.head_weight = normal(rng, (c.n_quantizers - 1, d, c.codebook_size))
            self.head_bias = nx.parameter(np.zeros((c.n_quantizers - 1, c.codebook_size)))

    @property
    def width(self) -> int:
        return self.config.d_model

    def forward(self, batch: "NarBatch", rng: np.random.Generator | None = None) -> nx.Tensor:
        """Logits ``(B, T, 1024)`` for each record's target layer."""
        lt = batch.text.shape[1]
        li = batch.layers - 2
        audio = None
        for k, tab in enumerate(self.audio_embeds):
            use = (k < batch.layers - 1).astype(tab.table.dtype)
            if not use.any():
                continue
            e = nx.mul(nx.embedding(tab.table, batch.codes[:, :, k]), use[:, None, None])
            audio = e if audio is None else nx.add(audio, e)
        audio = nx.add(audio, nx.embedding(self.layer_embed, li)[:, None, :])
        x = nx.concat([nx.embedding(self.text_embed, batch.text), audio], axis=1)
        x = nx.add(x, nx.embedding(self.type_embed, batch.types))
        keep = batch.keep[..., None].astype(x.dtype)
        for blk in self.blocks:
            x = blk.attn(x, batch.mask, batch.positions, keep=keep, rng=rng)
            x = blk.ffn(x, rng)
        h = self.final_norm(x[:, lt:])
        w = nx.embedding(self.head_weight, li)
        b = nx.embedding(self.head_bias, li)
        return nx.add(nx.matmul(h, w), b[:, None, :])


class _Table(Module):
    def __init__(self, table):
        self.table = table


# ---------------------------------------------------------------------------
# batch layout


@dataclass
class ArBatch:
    """``[text, left-padded][BOS][layer-1 codes, right-padded]`` layout."""

    text: np.ndarray            # (B, Lt) text ids
    audio: np.ndarray           # (B, La) BOS followed by codes
    types: np.ndarray           # (B, L)
    keep: np.ndarray            # (B, L) real (non-pad) positions
    mask: np.ndarray            # (B, L, L) visibility
    positions: np.ndarray       # (B, L) rotary positions over the joint sequence
    text_positions: np.ndarray  # (B, Lt)
    audio_positions: np.ndarray  # (B, La)
    text_visible: np.ndarray    # (B, 1, Lt) non-pad text keys
    targets: np.ndarray         # (B, La) next code per slot, EOS after the last
    loss_mask: np.ndarray       # (B, La)

    @property
    def n_targets(self) -> int:
        return int(self.loss_mask.sum())


def _check_text(text) -> np.ndarray:
    t = np.asarray(text, dtype=np.int64)
    if t.ndim != 1 or t.size == 0:
        raise ValueError("text must be a non-empty id sequence")
    return t


def _check_codes(codes, limit: int = CODEBOOK_SIZE) -> np.ndarray:
    c = np.asarray(codes, dtype=np.int64)
    if c.size and (c.min() < 0 or c.max() >= limit):
        raise ValueError(f"codes must lie in [0, {limit})")
    return c


def _text_block(texts):
    lt = max(len(t) for t in texts)
    b = len(texts)
    ids = np.full((b, lt), TEXT_PAD, dtype=np.int64)
    keep = np.zeros((b, lt), dtype=bool)
    pos = np.zeros((b, lt), dtype=np.int64)
    for i, t in enumerate(texts):
        n = len(t)
        ids[i, lt - n:] = t
        keep[i, lt - n:] = True
        pos[i, lt - n:] = np.arange(n)
    return ids, keep, pos


def ar_batch(texts, audios) -> ArBatch:
    texts = [_check_text(t) for t in texts]
    audios = [_check_codes(a).reshape(-1) for a in audios]
    if len(texts) != len(audios) or not texts:
        raise ValueError("need matching, non-empty text and audio lists")
    b = len(texts)
    tids, tkeep, tpos = _text_block(texts)
    lt = tids.shape[1]
    la = max(len(a) for a in audios) + 1
    audio = np.zeros((b, la), dtype=np.int64)
    akeep = np.zeros((b, la), dtype=bool)
    targets = np.zeros((b, la), dtype=np.int64)
    apos = np.zeros((b, la), dtype=np.int64)
    for i, a in enumerate(audios):
        n = len(a)
        audio[i, 0] = AUDIO_BOS
        audio[i, 1:n + 1] = a
        akeep[i, :n + 1] = True
        targets[i, :n] = a
        targets[i, n] = EOS
        apos[i, :n + 1] = np.arange(n + 1)
    keep = np.concatenate([tkeep, akeep], axis=1)
    L = lt + la
    causal = np.tril(np.ones((L, L), dtype=bool))
    is_text = np.arange(L) < lt
    base = causal | is_text[None, :]
    base &= ~(is_text[:, None] & ~is_text[None, :])
    mask = base[None] & keep[:, None, :] & keep[:, :, None]
    mask |= np.eye(L, dtype=bool)[None]
    ntext = tkeep.sum(1)
    positions = np.concatenate([tpos, np.where(akeep, ntext[:, None] + apos, 0)], axis=1)
    types = np.broadcast_to((~is_text).astype(np.int64), (b, L)).copy()
    return ArBatch(tids, audio, types, keep, mask, positions, tpos, apos,
                   tkeep[:, None, :], targets, akeep.copy())


@dataclass
class NarBatch:
    text: np.ndarray       # (B, Lt)
    codes: np.ndarray      # (B, T, 8); entries at layers >= l are ignored
    layers: np.ndarray     # (B,) target layer l in [2, 8]
    types: np.ndarray
    keep: np.ndarray
    mask: np.ndarray
    positions: np.ndarray
    targets: np.ndarray    # (B, T) codes of layer l
    loss_mask: np.ndarray  # (B, T)

    @property
    def n_targets(self) -> int:
        return int(self.loss_mask.sum())


def nar_batch(texts, acoustics, layers) -> NarBatch:
    texts = [_check_text(t) for t in texts]
    acoustics = [_check_codes(a).reshape(-1, N_QUANTIZERS) for a in acoustics]
    layers = np.asarray(layers, dtype=np.int64).reshape(-1)
    if not (len(texts) == len(acoustics) == len(layers)) or not texts:
        raise ValueError("need matching, non-empty text, acoustic and layer lists")
    if layers.min() < 2 or layers.max() > N_QUANTIZERS:
        raise ValueError(f"target layer must lie in [2, {N_QUANTIZERS}]")
    if min(len(a) for a in acoustics) < 1:
        raise ValueError("acoustic matrix needs at least one frame")
    b = len(texts)
    tids, tkeep, tpos = _text_block(texts)
    lt = tids.shape[1]
    T = max(len(a) for a in acoustics)
    codes = np.zeros((b, T, N_QUANTIZERS), dtype=np.int64)
    akeep = np.zeros((b, T), dtype=bool)
    for i, a in enumerate(acoustics):
        codes[i, :len(a)] = a
        akeep[i, :len(a)] = True
    keep = np.concatenate([tkeep, akeep], axis=1)
    L = lt + T
    mask = keep[:, None, :] & keep[:, :, None]
    mask |= np.eye(L, dtype=bool)[None]
    ntext = tkeep.sum(1)
    apos = np.where(akeep, ntext[:, None] + np.arange(T), 0)
    positions = np.concatenate([tpos, apos], axis=1)
    types = np.broadcast_to((np.arange(L) >= lt).astype(np.int64), (b, L)).copy()
    targets = codes[np.arange(b), :, layers - 1]
    return NarBatch(tids, codes, layers, types, keep, mask, positions, targets, akeep.copy())


def ar_forward(model: ArModel, text, audio_l1, rng=None) -> nx.Tensor:
    """Logits ``(Ta + 1, 1025)`` for one utterance; slot ``i`` predicts code ``i``."""
    return model.forward(ar_batch([text], [audio_l1]), rng)[0]


def nar_forward(model: NarModel, text, acoustic, target_layer: int, rng=None) -> nx.Tensor:
    """Logits ``(T, 1024)`` for layer ``target_layer`` from the layers below it."""
    if not 2 <= target_layer <= N_QUANTIZERS:
        raise ValueError(f"target layer must lie in [2, {N_QUANTIZERS}], got {target_layer}")
    a = np.asarray(acoustic)
    if a.ndim != 2 or a.shape[1] < target_layer - 1:
        raise ValueError(f"layers 1..{target_layer - 1} are required")
    full = np.zeros((a.shape[0], N_QUANTIZERS), dtype=np.int64)
    full[:, :target_layer - 1] = a[:, :target_layer - 1]
    return model.forward(nar_batch([text], [full], [target_layer]), rng)[0]


def build_model(kind: str, config: ModelConfig, variant: str = "full", seed: int = 0):
    if kind == "ar":
        return ArModel(config, variant, seed)
    if kind == "nar":
        return NarModel(config, variant, seed)
    raise ValueError(f"unknown model kind {kind!r}")


# ---------------------------------------------------------------------------
# parameter counting


def _ln(d): return 2 * d
def _lin(i, o, bias=True): return i * o + (o if bias else 0)
def _ema(d, h): return 4 * d * h + d


def gpsa_params(d, z, v, h) -> int:
    return _ln(d) + _ema(d, h) + _lin(d, z) + 4 * z + 2 * _lin(d, v) + 2 * _lin(d, d) + v * d


def gca_params(d, z, v) -> int:
    return 2 * _ln(d) + 2 * _lin(d, z) + 2 * _lin(d, v) + 2 * _lin(d, d) + v * d


def ffn_params(d, f) -> int:
    return _ln(d) + _lin(d, f) + _lin(f, d)


def mha_params(d) -> int:
    return _ln(d) + _lin(d, 3 * d) + _lin(d, d)


def count_params(config: ModelConfig, variant: str = "full", kind: str = "ar") -> int:
    """Closed-form parameter count from the layer shape formulas."""
    c = config
    d = width(c, variant)
    z = c.qk_v_dim
    if kind == "nar":
        if variant != "full":
            raise ValueError("the NAR model has a single variant")
        embeds = c.text_rows * d + c.n_quantizers * c.codebook_size * d + (c.n_quantizers - 1) * d + 2 * d
        body = c.nar_layers * (gpsa_params(d, z, z, c.ema_dim) + ffn_params(d, c.d_ffn))
        heads = (c.n_quantizers - 1) * _lin(d, c.codebook_size)
        return embeds + body + _ln(d) + heads
    if kind != "ar":
        raise ValueError(f"unknown model kind {kind!r}")
    embeds = c.text_rows * d + (c.codebook_size + 1) * d + 2 * d
    if variant == "full":
        body = c.ar_blocks * (gpsa_params(d, z, z, c.ema_dim) + gca_params(d, z, z) + ffn_params(d, c.d_ffn))
    elif variant == "no_gca":
        body = 2 * c.ar_blocks * (gpsa_params(d, z, z, c.ema_dim) + ffn_params(d, c.d_ffn))
    elif variant == "no_gca_no_gpsa":
        body = 2 * c.ar_blocks * (mha_params(d) + ffn_params(d, c.mha_d_ffn))
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return embeds + body + _ln(d) + _lin(d, c.codebook_size + 1)


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"TACOLM1\x00"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(model, path) -> None:
    """Write ``model`` as magic, version, JSON header, float32 LE blobs and a SHA-256 trailer."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    header = _canonical_json({"kind": model.kind, "variant": model.variant, "config": model.config.to_dict()})
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    named = list(model.named_parameters())
    buf.write(struct.pack("<I", len(named)))
    for name, p in named:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", p.ndim))
        buf.write(struct.pack(f"<{p.ndim}I", *p.shape))
        buf.write(np.ascontiguousarray(p.value, dtype="<f4").tobytes())
    body = buf.getvalue()
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path, config: ModelConfig | None = None):
    """Read a checkpoint; ``config`` overrides the embedded config and must match its shapes."""
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 4 + 32 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("bad magic: not a tacolm checkpoint")
    body, digest = data[:-32], data[-32:]
    r = _Reader(body)
    r.take(len(MAGIC))
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("digest mismatch: checkpoint is corrupt or truncated")
    header = json.loads(r.take(r.u32()).decode("utf-8"))
    cfg = config or ModelConfig.from_dict(header["config"])
    model = build_model(header["kind"], cfg, header["variant"])
    params = dict(model.named_parameters())
    n_blobs = r.u32()
    if n_blobs != len(params):
        raise nx.ShapeError(f"checkpoint holds {n_blobs} blobs, model expects {len(params)}")
    for _ in range(n_blobs):
        name = r.take(r.u32()).decode("utf-8")
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        values = np.frombuffer(r.take(4 * int(np.prod(shape, dtype=np.int64))), dtype="<f4").reshape(shape)
        if name not in params:
            raise nx.ShapeError(f"checkpoint blob {name!r} has no matching model parameter")
        p = params[name]
        if tuple(p.shape) != tuple(shape):
            raise nx.ShapeError(f"blob {name!r} has shape {tuple(shape)}, model expects {tuple(p.shape)}")
        p.value = values.astype(p.dtype)
    return model
