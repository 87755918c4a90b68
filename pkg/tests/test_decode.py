import math

import numpy as np
import pytest

from cmadm import tensor as T
from cmadm.decode import (
    beam_candidates,
    beam_search,
    gather_state,
    greedy_decode,
    sample_decode,
    sequence_logprob,
)
from cmadm.tensor import Tape, Tensor
from toymodels import PrefixModel, brute_force_best


def test_beam_one_equals_greedy():
    for seed in range(50):
        m = PrefixModel(int(np.random.default_rng(seed).integers(3, 8)), seed)
        g = greedy_decode(m.step, m.start(), 1, max_len=6)[0]
        b = beam_search(m.step, m.start(), beam=1, max_len=6)
        assert g.tokens == b.tokens


def test_beam_three_finds_global_max_small_space():
    # 2 steps, 3 words (PAD plus two content words)
    for seed in range(10):
        m = PrefixModel(3, 100 + seed)
        best, best_lp = brute_force_best(m, 2)
        hyp = beam_candidates(m.step, m.start(), beam=3, max_len=2)[0]
        assert hyp.tokens == best
        assert hyp.logprob == pytest.approx(best_lp, abs=1e-12)


def test_beam_scores_are_sequence_logprobs():
    m = PrefixModel(6, 7)
    for hyp in beam_candidates(m.step, m.start(), beam=4, max_len=5):
        assert hyp.logprob == pytest.approx(sequence_logprob(m.step, m.start(), hyp.tokens, 5), abs=1e-10)


def test_beam_handles_beam_wider_than_vocabulary():
    m = PrefixModel(3, 3)
    out = beam_candidates(m.step, m.start(), beam=10, max_len=3)
    assert out and all(np.isfinite(h.logprob) for h in out)
    assert [h.logprob for h in out] == sorted((h.logprob for h in out), reverse=True)


def test_beam_rejects_zero_width():
    m = PrefixModel(3, 0)
    with pytest.raises(ValueError):
        beam_candidates(m.step, m.start(), beam=0)


def test_greedy_ties_go_to_lowest_index():
    def uniform(prev, state):
        return np.log(np.full((len(prev), 4), 0.25)), state

    def no_pad(prev, state):
        lp = np.log(np.full((len(prev), 4), 1 / 3))
        lp[:, 0] = -np.inf
        return lp, state

    assert len(greedy_decode(uniform, None, 1, max_len=3)[0]) == 0
    assert greedy_decode(no_pad, None, 1, max_len=3)[0].content == [1, 1, 1]


def test_greedy_batched_matches_unbatched():
    m = PrefixModel(5, 11, sharpness=1.0)
    batch = greedy_decode(m.step, m.start(4), 4, max_len=5)
    one = greedy_decode(m.step, m.start(1), 1, max_len=5)[0]
    assert all(c.tokens == one.tokens for c in batch)


def test_greedy_truncates_at_max_len():
    def step(prev, state):
        lp = np.full((len(prev), 3), -10.0)
        lp[:, 2] = 0.0
        return lp, state

    cap = greedy_decode(step, None, 2, max_len=16)
    assert cap[0].content == [2] * 16 and len(cap[0].tokens) == 18


def test_sampling_frequencies():
    probs = np.array([0.1, 0.2, 0.3, 0.4])

    def step(prev, state):
        return np.log(np.tile(probs, (len(prev), 1))), state

    rng = np.random.default_rng(0)
    n = 50000
    caps, _ = sample_decode(step, None, rng, batch_size=n, max_len=1)
    first = np.array([c.tokens[1] for c in caps])
    freq = np.bincount(first, minlength=4) / n
    np.testing.assert_allclose(freq, probs, atol=0.01)


def test_sampling_deterministic_under_seed():
    m = PrefixModel(6, 5, sharpness=0.5)
    a, _ = sample_decode(m.step, m.start(8), np.random.default_rng(3), 8, 6)
    b, _ = sample_decode(m.step, m.start(8), np.random.default_rng(3), 8, 6)
    assert [c.tokens for c in a] == [c.tokens for c in b]


def test_sample_logps_match_sequence_logprob():
    m = PrefixModel(5, 9, sharpness=0.7)
    caps, lps = sample_decode(m.step, m.start(6), np.random.default_rng(1), 6, 5)
    totals = np.sum(lps, axis=0)
    for cap, tot in zip(caps, totals):
        assert tot == pytest.approx(sequence_logprob(m.step, m.start(), list(cap.content), 5), abs=1e-10)


def test_sample_logps_differentiable():
    w = T.parameter(np.random.default_rng(0).normal(size=(1, 4)))

    def step(prev, state):
        return T.log_softmax(T.matmul(Tensor(np.ones((len(prev), 1))), w)), state

    with Tape() as tape:
        caps, lps = sample_decode(step, None, np.random.default_rng(2), 3, 2)
        loss = T.sum_all(lps[0])
    g = tape.backward(loss)
    assert g[w.node_id].shape == (1, 4)
    assert np.all(np.isfinite(g[w.node_id]))


def test_gather_state_nested():
    from cmadm.captioner import DecoderState

    s = DecoderState(*(Tensor(np.arange(6.0).reshape(3, 2) + i) for i in range(4)))
    out = gather_state({"a": [s, np.array([5, 6, 7])], "n": None}, np.array([2, 0]))
    assert out["a"][0].h1.value.tolist() == [[4.0, 5.0], [0.0, 1.0]]
    assert out["a"][1].tolist() == [7, 5]
    assert out["n"] is None


def test_sequence_logprob_includes_closing_pad():
    m = PrefixModel(4, 2)
    short = sequence_logprob(m.step, m.start(), [1], 3)
    explicit = m.step(np.array([0]), m.start())[0][0, 1]
    _, code = m.step(np.array([0]), m.start())
    explicit += m.step(np.array([1]), code)[0][0, 0]
    assert short == pytest.approx(explicit, abs=1e-12)
    assert math.isfinite(sequence_logprob(m.step, m.start(), [1, 2, 3], 3))
