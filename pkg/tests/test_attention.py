import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from cmadm import tensor as T
from cmadm.attention import (
    CmaParams,
    GluParams,
    MultiHeadParams,
    cma_forward,
    glu_filter,
    multi_head,
    scaled_dot_attention,
)
from cmadm.errors import ContractError, DimensionError, EmptyInputError
from cmadm.gradcheck import check_gradients
from cmadm.tensor import Tensor


def _arrays(p):
    return {k: v.value for k, v in p.items()}


def _cma(rng, d=6, heads=2, d_c=3, mode="cma_d", rv=True, rt=False):
    return CmaParams.init(rng, d, d, d, d, heads, d_c, d_c, mode, rv, rt)


def test_scaled_dot_attention_example():
    q = Tensor([[1.0, 0.0]])
    k = Tensor([[1.0, 0.0], [0.0, 1.0]])
    v = Tensor([[1.0], [0.0]])
    out, w = scaled_dot_attention(q, k, v)
    # softmax([1/sqrt2, 0])
    np.testing.assert_allclose(w.value, [[0.66976155, 0.33023845]], atol=1e-8)
    np.testing.assert_allclose(out.value, [[0.66976155]], atol=1e-8)


def test_attention_single_key_returns_value():
    rng = np.random.default_rng(0)
    p = MultiHeadParams.init(rng, 2, 4, 4, 4, 3, 3, 4)
    k = Tensor(rng.normal(size=(1, 4)))
    out, ws = multi_head(Tensor(rng.normal(size=(3, 4))), k, k, p)
    for w in ws:
        np.testing.assert_allclose(w, 1.0)
    expect = np.concatenate([k.value @ w.value for w in p.wv], axis=-1) @ p.wo.value
    np.testing.assert_allclose(out.value, np.repeat(expect, 3, axis=0), atol=1e-12)


def test_attention_errors():
    rng = np.random.default_rng(0)
    p = MultiHeadParams.init(rng, 2, 4, 4, 4, 3, 3, 4)
    with pytest.raises(EmptyInputError):
        multi_head(Tensor(np.zeros((1, 4))), Tensor(np.zeros((0, 4))), Tensor(np.zeros((0, 4))), p)
    with pytest.raises(DimensionError):
        multi_head(Tensor(np.zeros((1, 5))), Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 4))), p)
    with pytest.raises(ContractError, match="cma_d"):
        _cma(rng, mode="serial")


def test_multi_head_matches_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        heads = int(rng.integers(1, 4))
        p = MultiHeadParams.init(rng, heads, 5, 4, 3, 2, 3, 6)
        q, k, v = rng.normal(size=(3, 5)), rng.normal(size=(4, 4)), rng.normal(size=(4, 3))
        out, ws = multi_head(Tensor(q), Tensor(k), Tensor(v), p)
        ref, ref_w = oracles.multi_head(q, k, v, [w.value for w in p.wq], [w.value for w in p.wk],
                                        [w.value for w in p.wv], p.wo.value)
        np.testing.assert_allclose(out.value, ref, atol=1e-10)
        for h in range(heads):
            np.testing.assert_allclose(ws[h], [row[h] for row in ref_w], atol=1e-12)


def test_glu_examples():
    # wp = wg = 0, bp = 1, bg = 0  ->  every output is sigmoid(0) = 0.5
    g = GluParams(T.parameter(np.zeros((4, 2))), T.parameter(np.ones(2)),
                  T.parameter(np.zeros((4, 2))), T.parameter(np.zeros(2)))
    np.testing.assert_allclose(glu_filter(Tensor(np.ones((1, 2))), Tensor(np.ones((1, 2))), g).value, 0.5)
    g.bg.value[:] = -50
    assert np.abs(glu_filter(Tensor(np.ones((1, 2))), Tensor(np.ones((1, 2))), g).value).max() < 1e-20


def test_glu_matches_oracle():
    rng = np.random.default_rng(2)
    g = GluParams.init(rng, 3, 4)
    g.bp.value[:] = rng.normal(size=4)
    g.bg.value[:] = rng.normal(size=4)
    q, c = rng.normal(size=(5, 3)), rng.normal(size=(5, 4))
    ref = oracles.glu(q, c, g.wp.value, g.bp.value, g.wg.value, g.bg.value)
    np.testing.assert_allclose(glu_filter(Tensor(q), Tensor(c), g).value, ref, atol=1e-12)


@pytest.mark.parametrize("mode", ["visual_only", "textual_only", "parallel", "cma_d"])
@pytest.mark.parametrize("rv,rt", [(True, False), (False, False), (True, True), (False, True)])
def test_cma_matches_oracle(mode, rv, rt):
    rng = np.random.default_rng(3)
    p = _cma(rng, mode=mode, rv=rv, rt=rt)
    for t in (p.bc_a, p.bc_b, p.glu_a.bp, p.glu_b.bg):
        t.value[:] = rng.normal(size=t.shape)
    q, a, b = rng.normal(size=(2, 6)), rng.normal(size=(5, 6)), rng.normal(size=(7, 6))
    out = cma_forward(Tensor(q), Tensor(a), Tensor(b), p)
    arrays = {k[len("x."):]: v for k, v in _arrays(p.named("x")).items()}
    ra, rb = oracles.cma(q, a, b, arrays, mode, rv, rt)
    np.testing.assert_allclose(out.visual_context.value, ra, atol=1e-10)
    np.testing.assert_allclose(out.textual_context.value, rb, atol=1e-10)


def test_cma_residual_flags_change_output():
    rng = np.random.default_rng(4)
    p = _cma(rng)
    q, a, b = (Tensor(rng.normal(size=s)) for s in [(1, 6), (4, 6), (5, 6)])
    on = cma_forward(q, a, b, p).visual_context.value
    p.residual_visual = False
    off = cma_forward(q, a, b, p).visual_context.value
    assert np.abs(on - off).max() > 1e-3


def test_gate_saturation_identities():
    rng = np.random.default_rng(5)
    p = _cma(rng)
    q, a, b = (Tensor(rng.normal(size=s)) for s in [(1, 6), (4, 6), (5, 6)])
    p.bc_a.value[:] = -50.0
    out = cma_forward(q, a, b, p)
    a1, _ = multi_head(q, a, a, p.mh_a)
    a2 = glu_filter(q, a1, p.glu_a)
    assert np.abs(out.visual_context.value - a1.value).max() < 1e-6
    p.bc_a.value[:] = 50.0
    out = cma_forward(q, a, b, p)
    assert np.abs(out.visual_context.value - (a2.value + a1.value)).max() < 1e-6


def test_cma_single_region_single_token():
    rng = np.random.default_rng(6)
    p = _cma(rng)
    out = cma_forward(Tensor(rng.normal(size=(1, 6))), Tensor(rng.normal(size=(1, 6))),
                      Tensor(rng.normal(size=(1, 6))), p)
    for w in out.visual_weights + out.textual_weights:
        np.testing.assert_allclose(w, 1.0)


def test_cma_empty_modalities():
    rng = np.random.default_rng(7)
    p = _cma(rng)
    q = Tensor(np.zeros((1, 6)))
    with pytest.raises(EmptyInputError):
        cma_forward(q, Tensor(np.zeros((0, 6))), Tensor(np.zeros((2, 6))), p)
    with pytest.raises(EmptyInputError):
        cma_forward(q, Tensor(np.zeros((2, 6))), Tensor(np.zeros((0, 6))), p)
    vo = _cma(rng, mode="visual_only")
    out = cma_forward(q, Tensor(np.ones((2, 6))), None, vo)
    assert np.all(out.textual_context.value == 0)


def test_masked_regions_receive_no_weight():
    rng = np.random.default_rng(8)
    p = _cma(rng)
    a = rng.normal(size=(1, 5, 6))
    mask = np.array([[True, True, True, False, False]])
    out = cma_forward(Tensor(rng.normal(size=(1, 1, 6))), Tensor(a), Tensor(rng.normal(size=(1, 4, 6))), p, mask)
    a[:, 3:] = 1e6
    out2 = cma_forward(Tensor(np.ones((1, 1, 6))), Tensor(a), Tensor(np.zeros((1, 4, 6))), p, mask)
    for w in out.visual_weights + out2.visual_weights:
        assert np.all(w[..., 3:] == 0)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_attention_rows_are_distributions(n_a, n_b, nq, seed):
    rng = np.random.default_rng(seed)
    p = _cma(rng)
    out = cma_forward(Tensor(rng.normal(size=(nq, 6)) * 5), Tensor(rng.normal(size=(n_a, 6)) * 5),
                      Tensor(rng.normal(size=(n_b, 6)) * 5), p)
    for w in out.visual_weights + out.textual_weights:
        assert np.all(w >= 0)
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-9)


def test_cma_gradients():
    rng = np.random.default_rng(9)
    p = _cma(rng, d=4, d_c=2)
    for t in (p.bc_a, p.bc_b):
        t.value[:] = rng.normal(size=t.shape)
    q, a, b = (T.parameter(rng.normal(size=s)) for s in [(2, 4), (3, 4), (3, 4)])
    target = rng.normal(size=(2, 4))

    def loss():
        out = cma_forward(q, a, b, p)
        return T.sum_all(T.mul(T.add(out.visual_context, out.textual_context), Tensor(target)))

    params = {"q": q, "a": a, "b": b, **p.named("cma")}
    errs = check_gradients(loss, params)
    assert max(errs.values()) < 1e-6
