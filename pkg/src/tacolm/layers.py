"""Attention layers: damped EMA, gated prefix self-attention, gated
cross-attention, rotary positions, feed-forward blocks and a vanilla
multi-head baseline.

Each layer has two entry points. ``forward`` runs on whole (batched)
sequences and records onto the autodiff tape. ``infer`` runs without the
tape on a handful of new rows and extends a per-layer cache; under
:func:`~tacolm.numerics.exact_mode` both paths execute the same row-stable
kernels, so a step-by-step decode reproduces a full forward bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import Tensor


# ---------------------------------------------------------------------------
# parameter containers


class Module:
    """Minimal parameter container; attribute order fixes parameter order."""

    def named_parameters(self, prefix: str = ""):
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{name}.")
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def num_params(self) -> int:
        return int(np.sum([p.size for p in self.parameters()], dtype=np.int64))


def he_uniform(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    bound = math.sqrt(6.0 / fan_in)
    return nx.parameter(rng.uniform(-bound, bound, size=shape))


def normal(rng: np.random.Generator, shape, std: float = 0.02) -> Tensor:
    return nx.parameter(rng.normal(0.0, std, size=shape))


def zeros(shape) -> Tensor:
    return nx.parameter(np.zeros(shape))


def ones(shape) -> Tensor:
    return nx.parameter(np.ones(shape))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = he_uniform(rng, d_in, (d_in, d_out))
        self.bias = zeros(d_out) if bias else None

    def __call__(self, x) -> Tensor:
        y = nx.matmul(x, self.weight)
        return y if self.bias is None else nx.add(y, self.bias)

    def rows(self, x: np.ndarray) -> np.ndarray:
        y = nx.linear_rows(x, self.weight.value)
        return y if self.bias is None else y + self.bias.value


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = ones(d)
        self.bias = zeros(d)
        self.eps = eps

    def __call__(self, x) -> Tensor:
        return nx.layer_norm(x, self.gain, self.bias, self.eps)

    def rows(self, x: np.ndarray) -> np.ndarray:
        return nx.layer_norm_kernel(x, self.gain.value, self.bias.value, self.eps)[0]


# ---------------------------------------------------------------------------
# rotary positions


@dataclass(frozen=True)
class RopeConfig:
    base: float = 10000.0
    dim: int | None = None  # rotated features; None rotates all of them

    def rotated(self, width: int) -> int:
        r = width if self.dim is None else self.dim
        if r % 2:
            raise ValueError(f"rotary dimension must be even, got {r}")
        if r > width:
            raise ValueError(f"rotary dimension {r} exceeds feature width {width}")
        return r


def rope_tables(positions, width: int, cfg: RopeConfig, dtype=None):
    """cos/sin tables for integer ``positions``; angle = pos * base**(-2i/width)."""
    r = cfg.rotated(width)
    inv_freq = cfg.base ** (-np.arange(0, r, 2, dtype=np.float64) / width)
    ang = np.asarray(positions, dtype=np.float64)[..., None] * inv_freq
    dtype = dtype or nx.default_dtype()
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def rope_apply(vecs, positions, cfg: RopeConfig = RopeConfig()) -> Tensor:
    vecs = nx.as_tensor(vecs)
    cos, sin = rope_tables(positions, vecs.shape[-1], cfg, vecs.dtype)
    return nx.rotate_pairs(vecs, cos, sin)


# ---------------------------------------------------------------------------
# masks


@dataclass
class PrefixMask:
    visible: np.ndarray
    text_len: int
    audio_len: int


def build_prefix_mask(text_len: int, audio_len: int) -> PrefixMask:
    """Bidirectional over the text prefix, causal over the audio suffix."""
    if text_len < 0 or audio_len < 0:
        raise ValueError("lengths must be non-negative")
    n = text_len + audio_len
    if n == 0:
        raise ValueError("mask needs at least one position")
    vis = np.tril(np.ones((n, n), dtype=bool))
    vis[:, :text_len] = True
    vis[:text_len, text_len:] = False
    return PrefixMask(vis, text_len, audio_len)


def chunk_visibility(mask: np.ndarray, chunk: int) -> np.ndarray:
    """Restrict a ``(..., T, T)`` visibility array to diagonal ``chunk`` blocks."""
    t = mask.shape[-1]
    block = np.arange(t) // chunk
    return mask & (block[:, None] == block[None, :])


# ---------------------------------------------------------------------------
# damped EMA


def _ema_coeffs(alpha_logit, delta_logit):
    p = nx.sigmoid_kernel(alpha_logit)
    r = nx.sigmoid_kernel(delta_logit)
    return p, r, 1.0 - p * r


def ema_step(x_t: np.ndarray, h: np.ndarray, beta, p, q, eta, omega):
    """Advance the recurrence by one position. ``x_t`` is ``(..., d)``, ``h`` is ``(..., d, n)``."""
    u = beta * x_t[..., None]
    h = p * u + q * h
    y = (eta * h).sum(-1) + omega * x_t
    return y, h


def _causal_conv(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """y[b, t, d] = sum_{s<=t} kernel[d, t-s] x[b, s, d], via FFT in float64."""
    t = x.shape[1]
    n = 1 << (2 * t - 1).bit_length()
    xf = np.fft.rfft(x.astype(np.float64), n=n, axis=1)
    kf = np.fft.rfft(kernel.T, n=n, axis=0)
    return np.fft.irfft(xf * kf, n=n, axis=1)[:, :t]


class DampedEMA(Module):
    """Per-feature multidimensional damped EMA.

    Each feature ``j`` is expanded into ``n`` channels
    ``u = beta_j x_j`` that follow ``h_t = p u_t + (1 - p r) h_{t-1}`` with
    ``p = sigmoid(alpha)``, ``r = sigmoid(delta)``, and are contracted back as
    ``y_j = eta_j . h_t + omega_j x_j``.
    """

    def __init__(self, d: int, n: int, rng: np.random.Generator):
        sign = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
        self.beta = nx.parameter(sign + rng.normal(0.0, 0.02, size=(d, n)))
        # decay rates spread geometrically over [0.1, 0.9]
        rates = 0.1 * 9.0 ** (np.arange(n) / max(n - 1, 1))
        self.alpha_logit = nx.parameter(np.tile(np.log(rates / (1 - rates)), (d, 1)))
        self.delta_logit = zeros((d, n))
        self.eta = nx.parameter(rng.normal(0.0, 1.0 / math.sqrt(n), size=(d, n)))
        self.omega = ones(d)

    def coeffs(self):
        p, r, q = _ema_coeffs(self.alpha_logit.value, self.delta_logit.value)
        return p, r, q

    def __call__(self, x) -> Tensor:
        return damped_ema(x, self)

    def initial_state(self, lead=()) -> np.ndarray:
        return np.zeros(tuple(lead) + self.beta.shape, dtype=self.beta.dtype)

    def rows(self, x: np.ndarray, h: np.ndarray):
        """Run the recurrence over rows of ``x`` (``(T, d)``) from state ``h``."""
        p, _, q = self.coeffs()
        out = np.empty_like(x)
        for t in range(x.shape[0]):
            out[t], h = ema_step(x[t], h, self.beta.value, p, q, self.eta.value, self.omega.value)
        return out, h


def damped_ema(x, ema: DampedEMA) -> Tensor:
    """Apply ``ema`` along axis 1 of ``x`` (``(B, T, d)`` or ``(T, d)``)."""
    x = nx.as_tensor(x)
    squeeze = x.ndim == 2
    xv = x.value[None] if squeeze else x.value
    if xv.shape[1] < 1:
        raise ValueError("damped_ema needs a non-empty sequence")
    beta, alog, dlog, eta, omega = ema.beta, ema.alpha_logit, ema.delta_logit, ema.eta, ema.omega
    p, r, q = _ema_coeffs(alog.value, dlog.value)
    T = xv.shape[1]
    n_idx = np.arange(T, dtype=np.float64)
    qn = q[..., None].astype(np.float64) ** n_idx  # d, n, T
    c = (eta.value * beta.value * p).astype(np.float64)
    kernel = np.einsum("dn,dnt->dt", c, qn)

    if nx.is_exact():
        y = np.empty_like(xv)
        h = np.zeros(xv.shape[:1] + beta.shape, dtype=xv.dtype)
        for t in range(T):
            y[:, t], h = ema_step(xv[:, t], h, beta.value, p, q, eta.value, omega.value)
    else:
        y = (_causal_conv(xv, kernel) + omega.value * xv).astype(xv.dtype)
    if squeeze:
        y = y[0]

    def bw(g):
        gv = (g[None] if squeeze else g).astype(np.float64)
        xs = xv.astype(np.float64)
        nfft = 1 << (2 * T - 1).bit_length()
        gf = np.fft.rfft(gv, n=nfft, axis=1)
        kf = np.fft.rfft(kernel.T, n=nfft, axis=0)
        gx = np.fft.irfft(gf * np.conj(kf), n=nfft, axis=1)[:, :T] + omega.value * gv
        xf = np.fft.rfft(xs, n=nfft, axis=1)
        gk = np.fft.irfft((gf * np.conj(xf)).sum(0), n=nfft, axis=0)[:T].T  # d, T
        g_omega = (gv * xs).sum((0, 1))
        gc = np.einsum("dt,dnt->dn", gk, qn)
        qn_prev = np.concatenate([np.zeros(q.shape + (1,)), qn[..., :-1]], axis=-1)
        gq = np.einsum("dt,dnt->dn", gk, qn_prev * n_idx) * c
        gp = gc * eta.value * beta.value - gq * r
        gr = -gq * p
        dt = x.dtype
        gx = gx[0] if squeeze else gx
        return (
            gx.astype(dt),
            (gc * eta.value * p).astype(dt),
            (gp * p * (1 - p)).astype(dt),
            (gr * r * (1 - r)).astype(dt),
            (gc * beta.value * p).astype(dt),
            g_omega.astype(dt),
        )

    return nx.make_op(y, (x, beta, alog, dlog, eta, omega), bw, "damped_ema")


# ---------------------------------------------------------------------------
# caches for incremental decoding


@dataclass
class KVCache:
    """Append-only key/value buffers with optional EMA hidden state."""

    k: np.ndarray
    v: np.ndarray
    length: int = 0
    ema_h: np.ndarray | None = None

    @classmethod
    def empty(cls, capacity: int, k_dim: int, v_dim: int, dtype, lead=()):
        lead = tuple(lead)
        return cls(np.zeros(lead + (capacity, k_dim), dtype), np.zeros(lead + (capacity, v_dim), dtype))

    def append(self, k: np.ndarray, v: np.ndarray) -> None:
        n = k.shape[-2]
        if self.length + n > self.k.shape[-2]:
            grow = max(self.k.shape[-2], n)
            pad = [(0, 0)] * (self.k.ndim - 2) + [(0, grow), (0, 0)]
            self.k = np.pad(self.k, pad)
            self.v = np.pad(self.v, pad)
        self.k[..., self.length:self.length + n, :] = k
        self.v[..., self.length:self.length + n, :] = v
        self.length += n

    def clone(self) -> "KVCache":
        h = None if self.ema_h is None else self.ema_h.copy()
        return KVCache(self.k.copy(), self.v.copy(), self.length, h)


def _chunk_start(pos: int, chunk: int | None) -> int:
    return 0 if chunk is None else (pos // chunk) * chunk


def _row_span(i: int, lo: int, hi: int, chunk: int | None):
    """Visible key span for global row ``i`` given a nominal ``[lo, hi)``."""
    if chunk is None:
        return lo, hi
    start = _chunk_start(i, chunk)
    return max(lo, start), min(hi, start + chunk)


# ---------------------------------------------------------------------------
# gated prefix self-attention


class GPSA(Module):
    """Single-head EMA-gated self-attention with prefix masking.

    Pipeline: pre-norm, damped EMA, shared projection ``Z`` feeding query and
    key through per-dimension scale/offset, RoPE on both, softmax attention,
    then reset/update gating with a residual to the input.
    """

    def __init__(self, d: int, z: int, v: int, ema_dim: int, rng: np.random.Generator,
                 rope: RopeConfig | None = RopeConfig(), dropout: float = 0.0, chunk: int | None = None):
        self.d, self.z, self.v = d, z, v
        self.rope = rope
        self.dropout = dropout
        self.chunk = chunk
        self.norm = LayerNorm(d)
        self.ema = DampedEMA(d, ema_dim, rng)
        self.to_z = Linear(d, z, rng)
        self.q_scale = ones(z)
        self.q_offset = zeros(z)
        self.k_scale = ones(z)
        self.k_offset = zeros(z)
        self.to_v = Linear(d, v, rng)
        self.reset = Linear(d, v, rng)
        self.update = Linear(d, d, rng)
        self.cand_x = Linear(d, d, rng)
        self.cand_o = Linear(v, d, rng, bias=False)

    @property
    def scale(self) -> float:
        return 1.0 / math.sqrt(self.z)

    def __call__(self, x, mask=None, positions=None, keep=None, rng=None) -> Tensor:
        """``x`` is ``(B, T, d)`` or ``(T, d)``; ``mask`` a visibility array or :class:`PrefixMask`."""
        x = nx.as_tensor(x)
        T = x.shape[-2]
        if isinstance(mask, PrefixMask):
            mask = mask.visible
        if mask is not None and mask.shape[-1] != T:
            raise ValueError(f"mask extent {mask.shape[-1]} does not match sequence length {T}")
        if not np.all(np.isfinite(x.value)):
            raise nx.NonFiniteError("non-finite GPSA input")
        if positions is None:
            positions = np.arange(T)
        drop_rng = rng if self.dropout > 0 else None

        xn = self.norm(x)
        ema_in = xn if keep is None else nx.mul(xn, keep)
        xe = self.ema(ema_in)
        zz = nx.silu(self.to_z(xe))
        q = nx.add(nx.mul(zz, self.q_scale), self.q_offset)
        k = nx.add(nx.mul(zz, self.k_scale), self.k_offset)
        if self.rope is not None:
            q = rope_apply(q, positions, self.rope)
            k = rope_apply(k, positions, self.rope)
        val = nx.silu(self.to_v(xn))
        o = self._attend(q, k, val, mask, drop_rng)
        gamma = nx.silu(self.reset(xe))
        phi = nx.sigmoid(self.update(xe))
        cand = nx.silu(nx.add(self.cand_x(xe), self.cand_o(nx.mul(gamma, o))))
        cand = nx.dropout(cand, self.dropout, drop_rng)
        out = nx.add(nx.mul(phi, cand), nx.mul(nx.sub(1.0, phi), x))

        return out

    def _attend(self, q, k, v, mask, rng) -> Tensor:
        T = q.shape[-2]
        if self.chunk is None or T <= self.chunk:
            return nx.attention(q, k, v, mask, self.scale, self.dropout, rng)
        c = self.chunk
        nc = -(-T // c)
        pad = nc * c - T
        lead = q.shape[:-2]

        def blocks(t):
            if pad:
                t = nx.concat([t, np.zeros(lead + (pad, t.shape[-1]), dtype=t.dtype)], axis=-2)
            return nx.reshape(t, lead + (nc, c, t.shape[-1]))

        # block-diagonal visibility, built per block so memory stays linear in T
        bm = np.zeros(lead + (nc, c, c), dtype=bool)
        for i in range(nc):
            r0, r1 = i * c, min(T, (i + 1) * c)
            n = r1 - r0
            bm[..., i, :n, :n] = True if mask is None else mask[..., r0:r1, r0:r1]
            for j in range(n, c):
                bm[..., i, j, j] = True  # padding rows see themselves
        o = nx.attention(blocks(q), blocks(k), blocks(v), bm, self.scale, self.dropout, rng)
        o = nx.reshape(o, lead + (nc * c, v.shape[-1]))
        return o[..., :T, :] if pad else o

    # -- incremental path ------------------------------------------------------

    def new_cache(self, capacity: int) -> KVCache:
        cache = KVCache.empty(capacity, self.z, self.v, self.norm.gain.dtype)
        cache.ema_h = self.ema.initial_state()
        return cache

    def infer(self, x: np.ndarray, positions: np.ndarray, spans, cache: KVCache) -> np.ndarray:
        """Process new rows ``x`` (``(n, d)``) appended at the end of ``cache``.

        ``spans[i]`` is the nominal visible key range ``(lo, hi)`` for new row
        ``i`` in global cache coordinates.
        """
        xn = self.norm.rows(x)
        xe, cache.ema_h = self.ema.rows(xn, cache.ema_h)
        zz = nx.silu_kernel(self.to_z.rows(xe))
        q = zz * self.q_scale.value + self.q_offset.value
        k = zz * self.k_scale.value + self.k_offset.value
        if self.rope is not None:
            cos, sin = rope_tables(positions, self.z, self.rope, q.dtype)
            q = nx.rotate_pairs_kernel(q, cos, sin)
            k = nx.rotate_pairs_kernel(k, cos, sin)
        val = nx.silu_kernel(self.to_v.rows(xn))
        start = cache.length
        cache.append(k, val)
        o = np.empty((x.shape[0], self.v), dtype=x.dtype)
        for i, (lo, hi) in enumerate(spans):
            lo, hi = _row_span(start + i, lo, hi, self.chunk)
            o[i] = nx.attend_row(q[i], cache.k[lo:hi], cache.v[lo:hi], self.scale)[0]
        gamma = nx.silu_kernel(self.reset.rows(xe))
        phi = nx.sigmoid_kernel(self.update.rows(xe))
        cand = nx.silu_kernel(self.cand_x.rows(xe) + nx.linear_rows(gamma * o, self.cand_o.weight.value))
        return phi * cand + (1.0 - phi) * x


# ---------------------------------------------------------------------------
# gated cross-attention


class GCA(Module):
    """Gated cross-attention: queries from the audio stream, keys and values
    from the text stream only, with GPSA-style reset/update gating."""

    def __init__(self, d: int, z: int, v: int, rng: np.random.Generator,
                 rope: RopeConfig | None = RopeConfig(), dropout: float = 0.0):
        self.d, self.z, self.v = d, z, v
        self.rope = rope
        self.dropout = dropout
        self.norm = LayerNorm(d)
        self.text_norm = LayerNorm(d)
        self.to_q = Linear(d, z, rng)
        self.to_k = Linear(d, z, rng)
        self.to_v = Linear(d, v, rng)
        self.reset = Linear(d, v, rng)
        self.update = Linear(d, d, rng)
        self.cand_x = Linear(d, d, rng)
        self.cand_o = Linear(v, d, rng, bias=False)

    @property
    def scale(self) -> float:
        return 1.0 / math.sqrt(self.z)

    def keys_values(self, text, text_positions=None):
        """Key and value matrices; a function of the text stream alone."""
        text = nx.as_tensor(text)
        if text.shape[-2] < 1:
            raise ValueError("cross-attention needs a non-empty text sequence")
        if text_positions is None:
            text_positions = np.arange(text.shape[-2])
        tn = self.text_norm(text)
        k = self.to_k(tn)
        if self.rope is not None:
            k = rope_apply(k, text_positions, self.rope)
        val = nx.silu(self.to_v(tn))
        return k, val

    def __call__(self, audio, text, audio_positions=None, text_positions=None,
                 text_mask=None, rng=None) -> Tensor:
        audio = nx.as_tensor(audio)
        if audio.shape[-2] < 1:
            raise ValueError("cross-attention needs at least one audio position")
        if audio_positions is None:
            audio_positions = np.arange(audio.shape[-2])
        drop_rng = rng if self.dropout > 0 else None
        k, val = self.keys_values(text, text_positions)
        an = self.norm(audio)
        q = self.to_q(an)
        if self.rope is not None:
            q = rope_apply(q, audio_positions, self.rope)
        o = nx.attention(q, k, val, text_mask, self.scale, self.dropout, drop_rng)
        gamma = nx.silu(self.reset(an))
        phi = nx.sigmoid(self.update(an))
        cand = nx.silu(nx.add(self.cand_x(an), self.cand_o(nx.mul(gamma, o))))
        cand = nx.dropout(cand, self.dropout, drop_rng)
        return nx.add(nx.mul(phi, cand), nx.mul(nx.sub(1.0, phi), audio))

    # -- incremental path ------------------------------------------------------

    def prefill(self, text: np.ndarray) -> KVCache:
        tn = self.text_norm.rows(text)
        k = self.to_k.rows(tn)
        if self.rope is not None:
            cos, sin = rope_tables(np.arange(text.shape[0]), self.z, self.rope, k.dtype)
            k = nx.rotate_pairs_kernel(k, cos, sin)
        val = nx.silu_kernel(self.to_v.rows(tn))
        cache = KVCache.empty(text.shape[0], self.z, self.v, k.dtype)
        cache.append(k, val)
        return cache

    def infer(self, audio: np.ndarray, positions: np.ndarray, cache: KVCache) -> np.ndarray:
        an = self.norm.rows(audio)
        q = self.to_q.rows(an)
        if self.rope is not None:
            cos, sin = rope_tables(positions, self.z, self.rope, q.dtype)
            q = nx.rotate_pairs_kernel(q, cos, sin)
        n = cache.length
        o = np.empty((audio.shape[0], self.v), dtype=audio.dtype)
        for i in range(audio.shape[0]):
            o[i] = nx.attend_row(q[i], cache.k[:n], cache.v[:n], self.scale)[0]
        gamma = nx.silu_kernel(self.reset.rows(an))
        phi = nx.sigmoid_kernel(self.update.rows(an))
        cand = nx.silu_kernel(self.cand_x.rows(an) + nx.linear_rows(gamma * o, self.cand_o.weight.value))
        return phi * cand + (1.0 - phi) * audio


# ---------------------------------------------------------------------------
# feed-forward and multi-head baseline


class FeedForward(Module):
    def __init__(self, d: int, hidden: int, rng: np.random.Generator, dropout: float = 0.0):
        self.dropout = dropout
        self.norm = LayerNorm(d)
        self.fc1 = Linear(d, hidden, rng)
        self.fc2 = Linear(hidden, d, rng)

    def __call__(self, x, rng=None) -> Tensor:
        drop_rng = rng if self.dropout > 0 else None
        h = nx.silu(self.fc1(self.norm(x)))
        h = nx.dropout(h, self.dropout, drop_rng)
        return nx.add(x, nx.dropout(self.fc2(h), self.dropout, drop_rng))

    def infer(self, x: np.ndarray) -> np.ndarray:
        return x + self.fc2.rows(nx.silu_kernel(self.fc1.rows(self.norm.rows(x))))


def ffn_block(x, ffn: FeedForward, rng=None) -> Tensor:
    return ffn(x, rng)


class MultiHeadAttention(Module):
    """Pre-norm multi-head scaled dot-product attention with a residual."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator,
                 rope: RopeConfig | None = RopeConfig(), dropout: float = 0.0):
        if d % heads:
            raise ValueError(f"d_model {d} is not divisible by {heads} heads")
        self.d, self.heads, self.head_dim = d, heads, d // heads
        self.rope = rope
        self.dropout = dropout
        self.norm = LayerNorm(d)
        self.qkv = Linear(d, 3 * d, rng)
        self.out = Linear(d, d, rng)

    @property
    def scale(self) -> float:
        return 1.0 / math.sqrt(self.head_dim)

    def _split(self, t: Tensor, lead, T) -> Tensor:
        t = nx.reshape(t, lead + (T, self.heads, self.head_dim))
        axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
        return nx.permute(t, axes)

    def __call__(self, x, mask=None, positions=None, keep=None, rng=None) -> Tensor:
        x = nx.as_tensor(x)
        T = x.shape[-2]
        lead = x.shape[:-2]
        if isinstance(mask, PrefixMask):
            mask = mask.visible
        if positions is None:
            positions = np.arange(T)
        drop_rng = rng if self.dropout > 0 else None
        d = self.d
        qkv = self.qkv(self.norm(x))
        q = self._split(qkv[..., :d], lead, T)
        k = self._split(qkv[..., d:2 * d], lead, T)
        v = self._split(qkv[..., 2 * d:], lead, T)
        if self.rope is not None:
            pos = np.asarray(positions)
            pos = pos[..., None, :] if pos.ndim > 1 else pos
            q = rope_apply(q, pos, self.rope)
            k = rope_apply(k, pos, self.rope)
        m = None if mask is None else np.expand_dims(mask, -3)
        o = nx.attention(q, k, v, m, self.scale, self.dropout, drop_rng)
        axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
        o = nx.reshape(nx.permute(o, axes), lead + (T, d))
        o = nx.dropout(self.out(o), self.dropout, drop_rng)
        return nx.add(x, o)

    def new_cache(self, capacity: int) -> KVCache:
        return KVCache.empty(capacity, self.head_dim, self.head_dim, self.norm.gain.dtype, lead=(self.heads,))

    def infer(self, x: np.ndarray, positions: np.ndarray, spans, cache: KVCache) -> np.ndarray:
        n = x.shape[0]
        d, hd = self.d, self.head_dim
        qkv = self.qkv.rows(self.norm.rows(x))
        q = qkv[:, :d].reshape(n, self.heads, hd).transpose(1, 0, 2)
        k = qkv[:, d:2 * d].reshape(n, self.heads, hd).transpose(1, 0, 2)
        v = qkv[:, 2 * d:].reshape(n, self.heads, hd).transpose(1, 0, 2)
        if self.rope is not None:
            cos, sin = rope_tables(positions, hd, self.rope, q.dtype)
            q = nx.rotate_pairs_kernel(q, cos, sin)
            k = nx.rotate_pairs_kernel(k, cos, sin)
        cache.append(k, v)
        o = np.empty((self.heads, n, hd), dtype=x.dtype)
        for i, (lo, hi) in enumerate(spans):
            for h in range(self.heads):
                o[h, i] = nx.attend_row(np.ascontiguousarray(q[h, i]), cache.k[h, lo:hi], cache.v[h, lo:hi], self.scale)[0]
        o = o.transpose(1, 0, 2).reshape(n, d)
        return x + self.out.rows(o)


def mha_baseline_layer(x, layer: MultiHeadAttention, mask=None, rng=None) -> Tensor:
    return layer(x, mask, rng=rng)


def gpsa_layer(x, layer: GPSA, mask=None, rng=None) -> Tensor:
    return layer(x, mask, rng=rng)


def gca_layer(audio, text, layer: GCA, rng=None) -> Tensor:
    return layer(audio, text, rng=rng)
