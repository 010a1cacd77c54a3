"""Sampling-based AR decoding with incremental state, greedy NAR completion
and end-to-end synthesis through the toy codec."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .codec import FPS, ToyCodec, ToyTextTokenizer
from .model import AUDIO_BOS, EOS, N_QUANTIZERS, ArModel, NarModel, nar_forward


@dataclass(frozen=True)
class DecodeOptions:
    temperature: float = 1.0
    top_k: int = 64
    max_new_tokens: int = 1125   # 15 s at 75 frames per second
    seed: int = 0
    eos_id: int = EOS

    def __post_init__(self):
        if not (np.isfinite(self.temperature) and self.temperature > 0):
            raise ValueError("temperature must be finite and positive")
        if self.top_k < 1:
            raise ValueError("top_k must be at least 1")
        if self.max_new_tokens < 0:
            raise ValueError("max_new_tokens must be non-negative")


def sample_next(logits, opts: DecodeOptions, rng: np.random.Generator):
    """Draw one id: keep the ``top_k`` largest logits, divide by temperature, sample.

    Returns ``(token, rng)``; all randomness comes from the explicit ``rng``.
    """
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(z)):
        raise nx.NonFiniteError("sample_next received non-finite logits")
    if opts.top_k == 1:
        return int(np.argmax(z)), rng
    k = min(opts.top_k, z.size)
    idx = np.argsort(-z, kind="stable")[:k]
    s = z[idx] / opts.temperature
    p = np.exp(s - s.max())
    p /= p.sum()
    return int(idx[rng.choice(k, p=p)]), rng


# ---------------------------------------------------------------------------
# incremental AR decoding


class ArDecoder:
    """Per-utterance incremental state for an :class:`ArModel`.

    Holds appended keys/values and the EMA hidden vector of every
    self-attention layer plus the fixed text keys/values of every
    cross-attention layer. All arithmetic uses the same row kernels as the
    exact-mode full forward, so step logits match a re-forward bit for bit.
    """

    def __init__(self, model: ArModel, text):
        self.model = model
        self.text = np.asarray(text, dtype=np.int64)
        if self.text.ndim != 1 or self.text.size == 0:
            raise ValueError("text must be a non-empty id sequence")
        self.lt = self.text.size
        self.caches = None
        self.cross = None
        self.n_audio = 0

    def _embed(self, table, ids, kind: int) -> np.ndarray:
        return getattr(self.model, table).value[ids] + self.model.type_embed.value[np.full(len(ids), kind)]

    def _run(self, x: np.ndarray, positions: np.ndarray, audio_from: int) -> np.ndarray:
        """Push rows ``x`` through every block; rows ``>= audio_from`` are audio."""
        start = 0 if self.caches is None else self.caches[0].length
        fresh = self.caches is None
        if fresh:
            self.caches = [blk.attn.new_cache(x.shape[0] + 64) for blk in self.model.blocks]
            self.cross = [None] * len(self.model.blocks)
        spans = [(0, self.lt) if start + i < self.lt else (0, start + i + 1) for i in range(x.shape[0])]
        audio_pos = np.arange(self.n_audio, self.n_audio + x.shape[0] - audio_from)
        for j, blk in enumerate(self.model.blocks):
            x = blk.attn.infer(x, positions, spans, self.caches[j])
            if blk.cross is not None:
                if fresh:
                    self.cross[j] = blk.cross.prefill(x[:audio_from])
                audio = blk.cross.infer(x[audio_from:], audio_pos, self.cross[j])
                x = np.concatenate([x[:audio_from], audio], axis=0)
            x = blk.ffn.infer(x)
        self.n_audio += x.shape[0] - audio_from
        h = self.model.final_norm.rows(x[audio_from:])
        return self.model.head.rows(h)

    def prefill(self, prompt=()) -> np.ndarray:
        """Feed text, BOS and prompt codes; logits for every audio slot so far."""
        if self.caches is not None:
            raise RuntimeError("decoder already prefilled")
        prompt = np.asarray(prompt, dtype=np.int64).reshape(-1)
        audio = np.concatenate([[AUDIO_BOS], prompt]).astype(np.int64)
        x = np.concatenate([self._embed("text_embed", self.text, 0), self._embed("audio_embed", audio, 1)])
        pos = np.concatenate([np.arange(self.lt), self.lt + np.arange(audio.size)])
        return self._run(x, pos, self.lt)

    def step(self, code: int) -> np.ndarray:
        """Append one code; logits ``(1025,)`` for the next slot."""
        if self.caches is None:
            raise RuntimeError("call prefill before step")
        if not 0 <= code < AUDIO_BOS:
            raise ValueError(f"code {code} out of range")
        x = self._embed("audio_embed", np.array([code]), 1)
        pos = np.array([self.lt + self.n_audio])
        return self._run(x, pos, 0)[0]

    def clone(self) -> "ArDecoder":
        other = ArDecoder(self.model, self.text)
        other.caches = [c.clone() for c in self.caches]
        other.cross = list(self.cross)   # text keys/values are never mutated
        other.n_audio = self.n_audio
        return other


@dataclass
class ArGeneration:
    codes: np.ndarray          # prompt followed by generated codes
    n_prompt: int
    truncated: bool
    step_logits: list | None = None

    @property
    def new_codes(self) -> np.ndarray:
        return self.codes[self.n_prompt:]


def ar_generate(model: ArModel, text, prompt_l1=(), opts: DecodeOptions = DecodeOptions(),
                keep_logits: bool = False) -> ArGeneration:
    """Teacher-force the prompt, then sample until EOS or ``max_new_tokens``."""
    prompt = np.asarray(prompt_l1, dtype=np.int64).reshape(-1)
    rng = np.random.default_rng(opts.seed)
    dec = ArDecoder(model, text)
    logits = dec.prefill(prompt)[-1]
    kept = [logits] if keep_logits else None
    out = []
    truncated = True
    while len(out) < opts.max_new_tokens:
        tok, rng = sample_next(logits, opts, rng)
        if tok == opts.eos_id:
            truncated = False
            break
        out.append(tok)
        logits = dec.step(tok)
        if keep_logits:
            kept.append(logits)
    codes = np.concatenate([prompt, np.array(out, dtype=np.int64)])
    return ArGeneration(codes, prompt.size, truncated, kept)


# ---------------------------------------------------------------------------
# NAR completion


def nar_generate(model: NarModel, text, prompt, layer1, layer_order=None) -> np.ndarray:
    """Greedy completion of layers 2..8; prompt frames keep all their codes."""
    layer1 = np.asarray(layer1, dtype=np.int64).reshape(-1)
    prompt = np.asarray(prompt, dtype=np.int64).reshape(-1, N_QUANTIZERS)
    p = prompt.shape[0]
    if p > layer1.size or not np.array_equal(prompt[:, 0], layer1[:p]):
        raise ValueError("layer-1 codes must start with the prompt's layer-1 codes")
    order = list(range(2, N_QUANTIZERS + 1)) if layer_order is None else list(layer_order)
    if sorted(order) != list(range(2, N_QUANTIZERS + 1)):
        raise ValueError("layer_order must be a permutation of 2..8")
    out = np.zeros((layer1.size, N_QUANTIZERS), dtype=np.int64)
    out[:, 0] = layer1
    out[:p] = prompt
    if layer1.size == p:
        return out
    with nx.no_grad():
        for l in order:
            logits = nar_forward(model, text, out, l).value
            out[p:, l - 1] = logits[p:].argmax(-1)
    return out


# ---------------------------------------------------------------------------
# end-to-end synthesis


@dataclass
class SynthesisRequest:
    text: str
    prompt: np.ndarray = field(default_factory=lambda: np.zeros((0, N_QUANTIZERS), dtype=np.int64))
    options: DecodeOptions = DecodeOptions()


@dataclass
class SynthesisResult:
    waveform: np.ndarray
    codes: np.ndarray      # full matrix, prompt frames included
    report: dict


def synthesize(request: SynthesisRequest, ar: ArModel, nar: NarModel, codec: ToyCodec,
               tokenizer: ToyTextTokenizer) -> SynthesisResult:
    """Text to waveform; only the newly generated frames are rendered."""
    t0 = time.perf_counter()
    text = tokenizer.tokenize(request.text)
    prompt = np.asarray(request.prompt, dtype=np.int64).reshape(-1, N_QUANTIZERS)
    gen = ar_generate(ar, text, prompt[:, 0], request.options)
    codes = nar_generate(nar, text, prompt, gen.codes)
    new = codes[prompt.shape[0]:]
    wave = codec.decode(new)
    wall = time.perf_counter() - t0
    frames = int(new.shape[0])
    seconds = frames / FPS
    report = {"frames": frames, "seconds": seconds,
              "rtf": wall / seconds if frames else None,
              "truncated": gen.truncated, "seed": request.options.seed}
    return SynthesisResult(wave, codes, report)
