"""Toy residual-VQ codec, byte-pair text tokenizer and synthetic corpus.

The codec works on 320-sample frames at 24 kHz (75 frames per second). Each
frame is projected onto a fixed orthonormal 16-dimensional basis made of the
first eight harmonics of 75 Hz, mixed by a seeded rotation, and quantized by
eight rounds of nearest-neighbour residual coding.
"""

from __future__ import annotations

import json
import wave
import zlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import CODEBOOK_SIZE, N_QUANTIZERS, N_TEXT_SPECIALS, TEXT_UNK

SAMPLE_RATE = 24000
HOP = 320
FPS = SAMPLE_RATE // HOP
FRAME_DIM = 16
N_HARMONICS = FRAME_DIM // 2


# ---------------------------------------------------------------------------
# codec


class ToyCodec:
    """Fixed-codebook 8-level residual vector quantizer over harmonic frames."""

    def __init__(self, seed: int = 0, codebook_scale: float = 1.0, decay: float = 0.7):
        rng = np.random.default_rng(seed)
        t = np.arange(HOP) / SAMPLE_RATE
        rows = []
        for k in range(1, N_HARMONICS + 1):
            w = 2 * np.pi * k * FPS * t
            rows += [np.cos(w), np.sin(w)]
        harm = np.array(rows)
        harm /= np.linalg.norm(harm, axis=1, keepdims=True)
        rot, _ = np.linalg.qr(rng.normal(size=(FRAME_DIM, FRAME_DIM)))
        self.analysis = rot @ harm           # (16, 320), orthonormal rows
        self.synthesis = self.analysis.T     # pseudo-inverse of the analysis
        books = rng.normal(size=(N_QUANTIZERS, CODEBOOK_SIZE, FRAME_DIM))
        books *= codebook_scale * decay ** np.arange(N_QUANTIZERS)[:, None, None]
        books[:, 0] = 0.0
        self.codebooks = books

    def frames(self, waveform) -> np.ndarray:
        w = np.asarray(waveform, dtype=np.float64).reshape(-1)
        if w.size < HOP:
            raise ValueError(f"waveform needs at least {HOP} samples, got {w.size}")
        n = w.size // HOP
        return w[:n * HOP].reshape(n, HOP) @ self.analysis.T

    def quantize(self, vecs: np.ndarray, levels: int = N_QUANTIZERS) -> np.ndarray:
        codes = np.zeros((vecs.shape[0], N_QUANTIZERS), dtype=np.int64)
        resid = vecs.copy()
        for k in range(levels):
            book = self.codebooks[k]
            dist = (resid ** 2).sum(1)[:, None] - 2 * resid @ book.T + (book ** 2).sum(1)[None]
            codes[:, k] = dist.argmin(1)
            resid -= book[codes[:, k]]
        return codes

    def encode(self, waveform) -> np.ndarray:
        """``(T, 8)`` codes, one row per full 320-sample frame."""
        return self.quantize(self.frames(waveform))

    def vectors(self, codes, levels: int = N_QUANTIZERS) -> np.ndarray:
        c = np.asarray(codes, dtype=np.int64).reshape(-1, N_QUANTIZERS)
        if c.size and (c.min() < 0 or c.max() >= CODEBOOK_SIZE):
            raise ValueError(f"codes must lie in [0, {CODEBOOK_SIZE})")
        out = np.zeros((c.shape[0], FRAME_DIM))
        for k in range(levels):
            out += self.codebooks[k][c[:, k]]
        return out

    def decode(self, codes, levels: int = N_QUANTIZERS) -> np.ndarray:
        """Waveform from ``(T, 8)`` codes using the first ``levels`` quantizers."""
        return (self.vectors(codes, levels) @ self.synthesis.T).reshape(-1)


def toy_encode(codec: ToyCodec, waveform) -> np.ndarray:
    return codec.encode(waveform)


def toy_decode(codec: ToyCodec, codes, levels: int = N_QUANTIZERS) -> np.ndarray:
    return codec.decode(codes, levels)


def snr_db(reference, estimate) -> float:
    ref = np.asarray(reference, dtype=np.float64)
    est = np.asarray(estimate, dtype=np.float64)
    n = min(ref.size, est.size)
    ref, est = ref[:n], est[:n]
    noise = ((ref - est) ** 2).sum()
    if noise == 0:
        return float("inf")
    return float(10 * np.log10((ref ** 2).sum() / noise))


# ---------------------------------------------------------------------------
# waveform I/O


def write_wav(path, waveform, sample_rate: int = SAMPLE_RATE) -> None:
    pcm = np.clip(np.asarray(waveform, dtype=np.float64), -1.0, 1.0)
    data = np.round(pcm * 32767).astype("<i2").tobytes()
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(data)


def read_wav(path) -> np.ndarray:
    with wave.open(str(path), "rb") as w:
        if w.getsampwidth() != 2 or w.getnchannels() != 1:
            raise ValueError("only mono PCM16 WAV is supported")
        raw = w.readframes(w.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767


def write_raw(path, waveform) -> None:
    np.asarray(waveform, dtype="<f4").tofile(path)


def read_raw(path) -> np.ndarray:
    return np.fromfile(path, dtype="<f4").astype(np.float64)


# ---------------------------------------------------------------------------
# tokenizer


class ToyTextTokenizer:
    """Character-level byte-pair tokenizer with ordered merge rules.

    Ids 0 and 1 are the pad and unknown specials; the alphabet follows, then
    one id per merge in the order the merges were learned.
    """

    def __init__(self, alphabet, merges):
        self.alphabet = list(alphabet)
        self.merges = [tuple(m) for m in merges]
        self.tokens = self.alphabet + [a + b for a, b in self.merges]
        self.ids = {t: i + N_TEXT_SPECIALS for i, t in enumerate(self.tokens)}
        self.ranks = {m: i for i, m in enumerate(self.merges)}
        self.unknown_count = 0

    @property
    def vocab_size(self) -> int:
        """Regular (non-special) token count."""
        return len(self.tokens)

    def split(self, s: str) -> list:
        pieces = list(s)
        for a, b in self.merges:
            pieces = _merge_pair(pieces, a, b)
        return pieces

    def tokenize(self, s: str) -> np.ndarray:
        out = []
        for piece in self.split(s):
            tid = self.ids.get(piece)
            if tid is None:
                self.unknown_count += 1
                tid = TEXT_UNK
            out.append(tid)
        return np.array(out, dtype=np.int64)

    def detokenize(self, ids) -> str:
        parts = []
        for i in np.asarray(ids).reshape(-1):
            if i < N_TEXT_SPECIALS:
                if i == TEXT_UNK:
                    parts.append("�")
                continue
            parts.append(self.tokens[i - N_TEXT_SPECIALS])
        return "".join(parts)

    def to_json(self) -> str:
        return json.dumps({"alphabet": self.alphabet, "merges": self.merges})

    @classmethod
    def from_json(cls, text: str) -> "ToyTextTokenizer":
        d = json.loads(text)
        return cls(d["alphabet"], d["merges"])


def _merge_pair(pieces: list, a: str, b: str) -> list:
    out, i = [], 0
    while i < len(pieces):
        if i + 1 < len(pieces) and pieces[i] == a and pieces[i + 1] == b:
            out.append(a + b)
            i += 2
        else:
            out.append(pieces[i])
            i += 1
    return out


def build_tokenizer(texts, vocab_size: int = 2000) -> ToyTextTokenizer:
    """Learn merges by repeatedly joining the most frequent adjacent pair.

    Stops at ``vocab_size`` regular tokens or when no pair occurs twice. Ties
    go to the pair seen first in the corpus.
    """
    texts = list(texts)
    if not texts or not any(texts):
        raise ValueError("tokenizer training needs non-empty texts")
    alphabet = sorted(set("".join(texts)))
    seqs = [list(t) for t in texts]
    merges = []
    while len(alphabet) + len(merges) < vocab_size:
        counts = Counter()
        for s in seqs:
            counts.update(zip(s, s[1:]))
        if not counts:
            break
        pair, n = counts.most_common(1)[0]
        if n < 2:
            break
        merges.append(pair)
        seqs = [_merge_pair(s, *pair) for s in seqs]
    return ToyTextTokenizer(alphabet, merges)


# ---------------------------------------------------------------------------
# corpus

LEXICON = {
    "det": ["the", "a", "one", "my", "your", "this"],
    "adj": ["red", "blue", "quiet", "small", "old", "bright", "calm", "dark"],
    "noun": ["cat", "dog", "bird", "river", "house", "tree", "child", "ship"],
    "verb": ["runs", "sleeps", "sings", "waits", "falls", "turns", "glows", "moves"],
    "adv": ["now", "slowly", "today", "again", "here"],
}
GAP_FRAMES = 1


def _sentence(rng: np.random.Generator) -> str:
    words = [rng.choice(LEXICON["det"])]
    if rng.random() < 0.5:
        words.append(rng.choice(LEXICON["adj"]))
    words.append(rng.choice(LEXICON["noun"]))
    words.append(rng.choice(LEXICON["verb"]))
    if rng.random() < 0.4:
        words.append(rng.choice(LEXICON["adv"]))
    return " ".join(str(w) for w in words)


def default_tokenizer(vocab_size: int = 200) -> ToyTextTokenizer:
    """Tokenizer trained on a fixed sample of the phrase grammar."""
    rng = np.random.default_rng(0)
    return build_tokenizer([_sentence(rng) for _ in range(400)], vocab_size)


@dataclass(frozen=True)
class WordSound:
    """Per-word frame recipe: a few steady segments of harmonic mixtures."""

    segments: tuple  # of (n_frames, amplitudes[8], phases[8])


def word_sound(word: str, voice_seed: int) -> WordSound:
    rng = np.random.default_rng([voice_seed, zlib.crc32(word.encode("utf-8"))])
    segs = []
    for _ in range(2):
        n = int(rng.integers(3, 7))
        amps = np.zeros(N_HARMONICS)
        active = rng.choice(N_HARMONICS, size=3, replace=False)
        amps[active] = rng.uniform(0.1, 0.3, size=3)
        phases = rng.uniform(0, 2 * np.pi, size=N_HARMONICS)
        segs.append((n, amps, phases))
    return WordSound(tuple(segs))


def _segment_wave(n_frames: int, amps, phases) -> np.ndarray:
    t = np.arange(n_frames * HOP) / SAMPLE_RATE
    k = np.arange(1, N_HARMONICS + 1)[:, None]
    return (amps[:, None] * np.cos(2 * np.pi * k * FPS * t + phases[:, None])).sum(0)


def render_text(text: str, voice_seed: int = 0) -> np.ndarray:
    """Waveform for ``text``: silence-separated word segments, each a steady harmonic mix."""
    parts = [np.zeros(GAP_FRAMES * HOP)]
    for w in text.split():
        for n, amps, phases in word_sound(w, voice_seed).segments:
            parts.append(_segment_wave(n, amps, phases))
        parts.append(np.zeros(GAP_FRAMES * HOP))
    return np.concatenate(parts)


@dataclass
class CorpusRecord:
    id: str
    text: str
    text_ids: np.ndarray
    codes: np.ndarray
    dur: float

    def __eq__(self, other):
        if not isinstance(other, CorpusRecord):
            return NotImplemented
        return (self.id == other.id and self.text == other.text and self.dur == other.dur
                and np.array_equal(self.text_ids, other.text_ids)
                and np.array_equal(self.codes, other.codes))

    def to_json(self) -> str:
        return json.dumps({"id": self.id, "text": self.text, "text_ids": self.text_ids.tolist(),
                           "codes": self.codes.tolist(), "dur": self.dur})

    @classmethod
    def from_json(cls, line: str) -> "CorpusRecord":
        d = json.loads(line)
        codes = np.array(d["codes"], dtype=np.int64).reshape(-1, N_QUANTIZERS)
        return cls(d["id"], d["text"], np.array(d["text_ids"], dtype=np.int64), codes, float(d["dur"]))


def generate_corpus(seed: int, n_utts: int, duration_range=(0.3, 1.2), path=None,
                    codec: ToyCodec | None = None, tokenizer: ToyTextTokenizer | None = None):
    """Deterministic synthetic corpus; optionally written as JSONL to ``path``."""
    if n_utts < 1:
        raise ValueError("n_utts must be at least 1")
    lo, hi = duration_range
    codec = codec or ToyCodec()
    tokenizer = tokenizer or default_tokenizer()
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n_utts):
        for _ in range(1000):
            text = _sentence(rng)
            wav = render_text(text, voice_seed=seed)
            dur = wav.size / SAMPLE_RATE
            if lo <= dur <= hi:
                break
        else:
            raise ValueError(f"no sentence fits duration range {duration_range}")
        codes = codec.encode(wav)
        records.append(CorpusRecord(f"utt{i:05d}", text, tokenizer.tokenize(text), codes, dur))
    if path is not None:
        write_corpus(records, path)
    return records


def write_corpus(records, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for r in records:
            f.write(r.to_json() + "\n")


def read_corpus(path) -> list:
    with open(path, encoding="utf-8") as f:
        return [CorpusRecord.from_json(line) for line in f if line.strip()]
