import math

import numpy as np
import pytest

import oracles
from cmadm import checkpoint
from cmadm import tensor as T
from cmadm.captioner import CaptionModel, DecoderState, LstmParams, ModelConfig, lstm_cell
from cmadm.errors import CorruptArtifactError, DimensionError, EmptyInputError, VocabularyError
from cmadm.experiments import load_model, save_model
from cmadm.gradcheck import check_gradients
from cmadm.tensor import Tape, Tensor
from cmadm.training import teacher_forced_nll
from cmadm.vocab import Vocabulary

TINY = ModelConfig(vocab_size=12, d_feat=6, d_refined=8, d_model=8, heads=2, d_head=4)


def randomized(config=TINY, seed=0, scale=0.5):
    m = CaptionModel.create(config, seed)
    rng = np.random.default_rng(seed + 1000)
    for p in m.params.values():
        p.value[...] = rng.normal(size=p.shape) * scale
    return m


def random_draft(rng, vocab=12):
    n = int(rng.integers(0, 17))
    body = list(rng.integers(2, vocab, size=n)) + [0] * (16 - n)
    return np.array([0] + body + [0])


def oracle_state(d):
    return tuple(np.zeros(d) for _ in range(4))


@pytest.mark.parametrize("mode", ["cma_d", "parallel", "visual_only", "textual_only"])
def test_deliberation_step_matches_oracle(mode):
    rng = np.random.default_rng(1)
    for trial in range(50 if mode == "cma_d" else 10):
        cfg = ModelConfig(**{**TINY.to_dict(), "mode": mode,
                             "residual_visual": bool(trial % 2), "residual_textual": bool(trial % 3 == 0)})
        m = randomized(cfg, seed=trial)
        vb = rng.normal(size=(int(rng.integers(1, 6)), TINY.d_feat))
        draft = random_draft(rng)
        vr, mask = m.refine([vb])
        state = m.delib_start(vr, mask, draft[None])
        step = m.delib_step_fn()
        ostate, prev = oracle_state(TINY.d_model), 0
        params = m.state_dict()
        for _ in range(3):
            logp, state = step(np.array([prev]), state)
            ref, ostate = oracles.deliberation_step(vb, draft, prev, ostate, params, mode,
                                                    cfg.residual_visual, cfg.residual_textual)
            np.testing.assert_allclose(logp.value[0], ref, atol=1e-10)
            prev = int(np.argmax(ref))


def test_drafting_step_matches_oracle():
    rng = np.random.default_rng(2)
    for trial in range(20):
        m = randomized(seed=trial)
        vb = rng.normal(size=(int(rng.integers(1, 6)), TINY.d_feat))
        vr, mask = m.refine([vb])
        state = m.draft_start(vr, mask)
        step = m.draft_step_fn()
        ostate, prev = oracle_state(TINY.d_model), 0
        for _ in range(3):
            logp, state = step(np.array([prev]), state)
            ref, ostate = oracles.drafting_step(vb, prev, ostate, m.state_dict())
            np.testing.assert_allclose(logp.value[0], ref, atol=1e-10)
            prev = int(np.argmax(ref))


def test_batched_padding_matches_single_images():
    rng = np.random.default_rng(3)
    m = randomized(seed=3)
    feats = [rng.normal(size=(n, TINY.d_feat)) for n in (2, 5, 3)]
    drafts = np.stack([random_draft(rng) for _ in feats])
    vr, mask = m.refine(feats)
    logp_b, _ = m.delib_step_fn()(np.zeros(3, dtype=int), m.delib_start(vr, mask, drafts))
    d_b, _ = m.draft_step_fn()(np.zeros(3, dtype=int), m.draft_start(vr, mask))
    for i, f in enumerate(feats):
        v1, m1 = m.refine([f])
        logp_1, _ = m.delib_step_fn()(np.zeros(1, dtype=int), m.delib_start(v1, m1, drafts[i : i + 1]))
        d_1, _ = m.draft_step_fn()(np.zeros(1, dtype=int), m.draft_start(v1, m1))
        np.testing.assert_allclose(logp_b.value[i], logp_1.value[0], atol=1e-12)
        np.testing.assert_allclose(d_b.value[i], d_1.value[0], atol=1e-12)


def test_zero_model_predicts_uniform():
    m = CaptionModel.create(TINY)
    m.zero_()
    vr, mask = m.refine([np.ones((3, TINY.d_feat))])
    d, _ = m.draft_step_fn()(np.array([0]), m.draft_start(vr, mask))
    r, _ = m.delib_step_fn()(np.array([0]), m.delib_start(vr, mask, np.zeros((1, 18), dtype=int)))
    np.testing.assert_allclose(np.exp(d.value), 1 / 12, atol=1e-15)
    np.testing.assert_allclose(np.exp(r.value), 1 / 12, atol=1e-15)


def test_zero_model_sequence_nll():
    m = CaptionModel.create(TINY)
    m.zero_()
    vr, mask = m.refine([np.ones((3, TINY.d_feat))])
    tokens = np.array([[0, 3, 4, 5] + [0] * 14])
    nll = teacher_forced_nll(m.draft_step_fn(), m.draft_start(vr, mask), tokens, 12)
    # three content tokens plus the closing PAD, each at ln 12
    assert nll.item() == pytest.approx(4 * math.log(12), abs=1e-12)


def test_lstm_forget_gate_saturation():
    rng = np.random.default_rng(4)
    d = 3
    p = LstmParams.init(rng, 2, d)
    p.b.value[:d] = -50.0  # input gate closed
    p.b.value[d : 2 * d] = 50.0  # forget gate open
    c = Tensor(rng.normal(size=(1, d)))
    _, c_new = lstm_cell(Tensor(rng.normal(size=(1, 2))), Tensor(np.zeros((1, d))), c, p)
    np.testing.assert_allclose(c_new.value, c.value, atol=1e-12)


def test_drafting_independent_of_deliberation_params():
    m = randomized(seed=5)
    vb = np.random.default_rng(5).normal(size=(4, TINY.d_feat))
    vr, mask = m.refine([vb])
    before, _ = m.draft_step_fn()(np.array([0]), m.draft_start(vr, mask))
    for name in m.deliberation_only_names:
        m.params[name].value += 1.0
    after, _ = m.draft_step_fn()(np.array([0]), m.draft_start(vr, mask))
    assert np.array_equal(before.value, after.value)


def test_shape_and_vocabulary_errors():
    m = randomized()
    with pytest.raises(EmptyInputError):
        m.refine([np.zeros((0, TINY.d_feat))])
    with pytest.raises(DimensionError):
        m.refine([np.zeros((3, TINY.d_feat + 1))])
    vr, mask = m.refine([np.zeros((3, TINY.d_feat))])
    with pytest.raises(DimensionError):
        m.delib_start(vr, mask, np.zeros((1, 17), dtype=int))
    with pytest.raises(VocabularyError):
        m.delib_start(vr, mask, np.full((1, 18), 12))
    with pytest.raises(VocabularyError):
        m.draft_step_fn()(np.array([99]), m.draft_start(vr, mask))


def test_end_to_end_gradient():
    rng = np.random.default_rng(6)
    m = randomized(seed=6, scale=0.3)
    feats = [rng.normal(size=(3, TINY.d_feat)), rng.normal(size=(2, TINY.d_feat))]
    drafts = np.stack([random_draft(rng) for _ in feats])
    tokens = np.array([[0, 3, 4, 0] + [0] * 14, [0, 5, 0] + [0] * 15])

    def loss():
        vr, mask = m.refine(feats)
        a = teacher_forced_nll(m.draft_step_fn(), m.draft_start(vr, mask), tokens, 12, smoothing=0.2)
        b = teacher_forced_nll(m.delib_step_fn(), m.delib_start(vr, mask, drafts), tokens, 12, smoothing=0.2)
        return T.add(a, T.scale(b, 0.5))

    errs = check_gradients(loss, m.params, samples=6, rng=rng)
    assert max(errs.values()) < 1e-6


def test_backward_reaches_every_parameter():
    rng = np.random.default_rng(7)
    m = randomized(seed=7)
    feats = [rng.normal(size=(3, TINY.d_feat))]
    tokens = np.array([[0, 3, 4, 0] + [0] * 14])
    with Tape() as tape:
        vr, mask = m.refine(feats)
        a = teacher_forced_nll(m.draft_step_fn(), m.draft_start(vr, mask), tokens, 12)
        b = teacher_forced_nll(m.delib_step_fn(), m.delib_start(vr, mask, tokens), tokens, 12)
        loss = T.add(a, b)
    grads = tape.backward(loss)
    missing = [k for k, p in m.params.items() if p.node_id not in grads]
    assert missing == []


def test_checkpoint_round_trip(tmp_path):
    m = randomized(seed=8)
    vocab = Vocabulary([f"w{i}" for i in range(10)])
    path = tmp_path / "m.ckpt"
    save_model(path, m, vocab)
    back, v2 = load_model(path)
    assert v2.words == vocab.words and back.config == m.config
    for k in m.params:
        assert back.params[k].value.tobytes() == m.params[k].value.tobytes()
    assert checkpoint.dumps(back.state_dict()) == path.read_bytes()


def test_checkpoint_corruption_names_entry(tmp_path):
    m = randomized(seed=9)
    data = checkpoint.dumps(m.state_dict())
    with pytest.raises(CorruptArtifactError):
        checkpoint.loads(data[:-8])
    with pytest.raises(CorruptArtifactError):
        checkpoint.loads(b"XXXXXX" + data[6:])
    with pytest.raises(CorruptArtifactError, match="trailing"):
        checkpoint.loads(data + b"\0")
    bad = bytearray(data)
    bad[-8:] = np.array([np.nan]).tobytes()
    last = list(m.state_dict())[-1]
    with pytest.raises(CorruptArtifactError, match=last):
        checkpoint.loads(bytes(bad))


def test_load_model_checks_shapes(tmp_path):
    m = randomized(seed=10)
    vocab = Vocabulary([f"w{i}" for i in range(10)])
    path = tmp_path / "m.ckpt"
    save_model(path, m, vocab)
    values = m.state_dict()
    values["draft.out_b"] = np.zeros(3)
    checkpoint.save(path, values)
    with pytest.raises(CorruptArtifactError, match="draft.out_b"):
        load_model(path)


def test_decoder_state_zeros():
    s = DecoderState.zeros(3, 4)
    assert all(t.shape == (3, 4) and not t.value.any() for t in s)
