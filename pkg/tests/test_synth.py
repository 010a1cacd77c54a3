import numpy as np
import pytest

from tacolm import numerics as nx
from tacolm.codec import FPS, ToyCodec, default_tokenizer, generate_corpus
from tacolm.model import EOS, VARIANTS, ArModel, ModelConfig, NarModel, ar_forward
from tacolm.synth import (
    ArDecoder, DecodeOptions, SynthesisRequest, ar_generate, nar_generate, sample_next, synthesize,
)
from tacolm.train import ScheduleConfig, TrainConfig, train

TINY = ModelConfig.tiny()


@pytest.fixture(scope="module")
def records():
    return generate_corpus(1, 6)


@pytest.fixture(scope="module")
def trained_nar(records):
    cfg = TrainConfig(kind="nar", steps=100, batch_tokens=512, schedule=ScheduleConfig(3e-3, 5, 100))
    return train(records, cfg).model


# ---------------------------------------------------------------------------
# sampling


def test_top1_is_argmax_for_any_temperature():
    z = np.random.default_rng(0).normal(size=50)
    for t in (1e-3, 1.0, 100.0):
        assert sample_next(z, DecodeOptions(temperature=t, top_k=1), np.random.default_rng(1))[0] == z.argmax()


def test_tiny_temperature_is_argmax():
    rng = np.random.default_rng(2)
    for _ in range(20):
        z = rng.normal(size=30)
        assert sample_next(z, DecodeOptions(temperature=1e-6), rng)[0] == z.argmax()


def test_uniform_frequencies_over_100k_draws():
    rng = np.random.default_rng(3)
    opts = DecodeOptions(top_k=4)
    counts = np.zeros(4)
    for _ in range(100_000):
        tok, rng = sample_next(np.zeros(4), opts, rng)
        counts[tok] += 1
    assert np.all(np.abs(counts / counts.sum() - 0.25) <= 0.01)


def test_top_k_restricts_support():
    z = np.array([5.0, 4.0, -1.0, -2.0, 3.0])
    rng = np.random.default_rng(4)
    seen = {sample_next(z, DecodeOptions(top_k=2, temperature=5.0), rng)[0] for _ in range(300)}
    assert seen == {0, 1}


def test_sampling_is_reproducible_from_seed():
    z = np.random.default_rng(5).normal(size=40)
    draw = lambda: [sample_next(z, DecodeOptions(), r)[0] for r in [np.random.default_rng(9)] for _ in range(30)]
    assert draw() == draw()


def test_decode_options_validation():
    for kw in ({"temperature": 0.0}, {"temperature": float("inf")}, {"top_k": 0}, {"max_new_tokens": -1}):
        with pytest.raises(ValueError):
            DecodeOptions(**kw)


def test_non_finite_logits_rejected():
    with pytest.raises(nx.NonFiniteError):
        sample_next(np.array([0.0, np.nan]), DecodeOptions(), np.random.default_rng(0))


# ---------------------------------------------------------------------------
# AR generation


@pytest.mark.parametrize("variant", VARIANTS)
def test_incremental_logits_match_full_reforward(variant):
    model = ArModel(TINY, variant, seed=3)
    text = np.array([5, 9, 14, 3])
    prompt = np.array([17, 400, 2])
    gen = ar_generate(model, text, prompt, DecodeOptions(max_new_tokens=12, seed=1), keep_logits=True)
    with nx.exact_mode():
        full = ar_forward(model, text, gen.codes).value
    p = len(prompt)
    for i, step in enumerate(gen.step_logits):
        assert np.array_equal(step, full[p + i])


def test_chunked_incremental_matches_full():
    model = ArModel(ModelConfig.tiny(chunk=4), "full", seed=4)
    text = np.array([5, 6])
    gen = ar_generate(model, text, [], DecodeOptions(max_new_tokens=11, seed=2), keep_logits=True)
    with nx.exact_mode():
        full = ar_forward(model, text, gen.codes).value
    assert all(np.array_equal(s, full[i]) for i, s in enumerate(gen.step_logits))


def test_prefill_covers_every_prompt_slot():
    model = ArModel(TINY, seed=5)
    text, prompt = np.array([4, 8]), np.array([1, 2, 3, 4])
    logits = ArDecoder(model, text).prefill(prompt)
    with nx.exact_mode():
        assert np.array_equal(logits, ar_forward(model, text, prompt).value)


def test_decoder_clone_is_independent():
    model = ArModel(TINY, seed=6)
    dec = ArDecoder(model, np.array([4, 5]))
    dec.prefill([10])
    snap = dec.clone()
    a = dec.step(11)
    dec.step(500)   # advancing the original must not touch the snapshot
    assert np.array_equal(snap.step(11), a)


def test_empty_prompt_and_length_limit():
    model = ArModel(TINY, seed=7)
    gen = ar_generate(model, [4, 5, 6], [], DecodeOptions(max_new_tokens=5, seed=0))
    assert gen.n_prompt == 0 and len(gen.codes) <= 5
    assert np.all(gen.codes != EOS)


def test_truncation_flag():
    model = ArModel(TINY, seed=8)
    model.head.bias.value[EOS] = -1e4
    gen = ar_generate(model, [4, 5], [], DecodeOptions(max_new_tokens=6))
    assert gen.truncated and len(gen.new_codes) == 6
    model.head.bias.value[EOS] = 1e4
    gen = ar_generate(model, [4, 5], [], DecodeOptions(max_new_tokens=6))
    assert not gen.truncated and len(gen.codes) == 0


def test_generation_is_seed_deterministic():
    model = ArModel(TINY, seed=9)
    opts = DecodeOptions(max_new_tokens=15, seed=4)
    assert np.array_equal(ar_generate(model, [3, 4], [7], opts).codes, ar_generate(model, [3, 4], [7], opts).codes)


def test_decoder_errors():
    model = ArModel(TINY, seed=0)
    with pytest.raises(ValueError):
        ArDecoder(model, [])
    dec = ArDecoder(model, [3])
    with pytest.raises(RuntimeError):
        dec.step(1)
    dec.prefill()
    with pytest.raises(ValueError):
        dec.step(EOS)


# ---------------------------------------------------------------------------
# NAR completion


def test_nar_keeps_prompt_and_layer1(trained_nar, records):
    rec = records[0]
    prompt = rec.codes[:5]
    out = nar_generate(trained_nar, rec.text_ids, prompt, rec.codes[:, 0])
    assert np.array_equal(out[:5], prompt)
    assert np.array_equal(out[:, 0], rec.codes[:, 0])
    assert out.shape == rec.codes.shape


def test_nar_is_deterministic(trained_nar, records):
    rec = records[1]
    a = nar_generate(trained_nar, rec.text_ids, rec.codes[:3], rec.codes[:, 0])
    b = nar_generate(trained_nar, rec.text_ids, rec.codes[:3], rec.codes[:, 0])
    assert np.array_equal(a, b)


def test_nar_layer_order_matters(trained_nar, records):
    rec = records[2]
    a = nar_generate(trained_nar, rec.text_ids, rec.codes[:0], rec.codes[:, 0])
    b = nar_generate(trained_nar, rec.text_ids, rec.codes[:0], rec.codes[:, 0], [8, 3, 6, 2, 7, 4, 5])
    assert not np.array_equal(a, b)


def test_nar_rejects_mismatched_prompt(trained_nar, records):
    rec = records[0]
    bad = rec.codes[:4].copy()
    bad[0, 0] = (bad[0, 0] + 1) % 1024
    with pytest.raises(ValueError):
        nar_generate(trained_nar, rec.text_ids, bad, rec.codes[:, 0])
    with pytest.raises(ValueError):
        nar_generate(trained_nar, rec.text_ids, rec.codes[:0], rec.codes[:, 0], [2, 3])


# ---------------------------------------------------------------------------
# end to end


def test_synthesize_report_and_duration(trained_nar, records):
    ar = ArModel(TINY, seed=1)
    req = SynthesisRequest("the cat runs", records[0].codes[:4], DecodeOptions(max_new_tokens=9, seed=3))
    res = synthesize(req, ar, trained_nar, ToyCodec(), default_tokenizer())
    frames = res.report["frames"]
    assert set(res.report) == {"frames", "seconds", "rtf", "truncated", "seed"}
    assert frames == res.codes.shape[0] - 4
    assert res.report["seconds"] == frames / FPS
    assert res.waveform.size == frames * 320
    assert np.array_equal(res.codes[:4], records[0].codes[:4])


def test_synthesize_is_deterministic_with_top1(trained_nar):
    ar = ArModel(TINY, seed=2)
    req = SynthesisRequest("a dog sleeps", options=DecodeOptions(top_k=1, max_new_tokens=8))
    a = synthesize(req, ar, trained_nar, ToyCodec(), default_tokenizer())
    b = synthesize(req, ar, trained_nar, ToyCodec(), default_tokenizer())
    assert np.array_equal(a.codes, b.codes) and np.array_equal(a.waveform, b.waveform)
