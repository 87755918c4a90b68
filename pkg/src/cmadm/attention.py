"""Multi-head attention, GLU filtering and Cross Modification Attention (CMA).

Shapes follow a rank-generic convention: queries are ``(..., k, d_q)`` and
key/value sets ``(..., m, d)``, so the same code serves a single instance
(rank 2) and a batch of decoder rows (rank 3).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, EmptyInputError
from .tensor import Tensor

MODES = ("visual_only", "textual_only", "parallel", "cma_d")


def uniform_param(rng: np.random.Generator, shape: tuple[int, ...]) -> Tensor:
    """``U(-1/sqrt(fan_in), 1/sqrt(fan_in))`` with ``fan_in = shape[0]``."""
    bound = 1.0 / math.sqrt(shape[0])
    return T.parameter(rng.uniform(-bound, bound, size=shape))


def zero_param(shape: tuple[int, ...]) -> Tensor:
    return T.parameter(np.zeros(shape))


@dataclass
class MultiHeadParams:
    wq: list[Tensor]
    wk: list[Tensor]
    wv: list[Tensor]
    wo: Tensor

    def __post_init__(self):
        if not (len(self.wq) == len(self.wk) == len(self.wv) >= 1):
            raise ContractError("per-head projection lists must be non-empty and equally long")
        for group in (self.wq, self.wk, self.wv):
            if len({w.shape for w in group}) != 1:
                raise DimensionError("per-head projections disagree in shape")
        if self.wq[0].shape[1] != self.wk[0].shape[1]:
            raise DimensionError("query and key projections must share d_c")
        if self.wo.shape[0] != self.heads * self.d_c2:
            raise DimensionError(f"W^O has {self.wo.shape[0]} rows, expected {self.heads * self.d_c2}")

    @classmethod
    def init(cls, rng, heads, d_q, d_k, d_v, d_c, d_c2, d_o) -> "MultiHeadParams":
        return cls(
            wq=[uniform_param(rng, (d_q, d_c)) for _ in range(heads)],
            wk=[uniform_param(rng, (d_k, d_c)) for _ in range(heads)],
            wv=[uniform_param(rng, (d_v, d_c2)) for _ in range(heads)],
            wo=uniform_param(rng, (heads * d_c2, d_o)),
        )

    heads = property(lambda self: len(self.wq))
    d_q = property(lambda self: self.wq[0].shape[0])
    d_k = property(lambda self: self.wk[0].shape[0])
    d_v = property(lambda self: self.wv[0].shape[0])
    d_c = property(lambda self: self.wq[0].shape[1])
    d_c2 = property(lambda self: self.wv[0].shape[1])
    d_o = property(lambda self: self.wo.shape[1])

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for i in range(self.heads):
            out[f"{prefix}.wq.{i}"] = self.wq[i]
            out[f"{prefix}.wk.{i}"] = self.wk[i]
            out[f"{prefix}.wv.{i}"] = self.wv[i]
        out[f"{prefix}.wo"] = self.wo
        return out


@dataclass
class GluParams:
    wp: Tensor
    bp: Tensor
    wg: Tensor
    bg: Tensor

    def __post_init__(self):
        if self.wp.shape != self.wg.shape:
            raise DimensionError("GLU projection and gate weights must share shape")

    @classmethod
    def init(cls, rng, d_q, d_o) -> "GluParams":
        return cls(
            wp=uniform_param(rng, (d_q + d_o, d_o)), bp=zero_param((d_o,)),
            wg=uniform_param(rng, (d_q + d_o, d_o)), bg=zero_param((d_o,)),
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.wp": self.wp, f"{prefix}.bp": self.bp, f"{prefix}.wg": self.wg, f"{prefix}.bg": self.bg}


@dataclass
class CmaParams:
    mh_a: MultiHeadParams
    mh_b: MultiHeadParams
    glu_a: GluParams
    glu_b: GluParams
    wc_a: Tensor
    bc_a: Tensor
    wc_b: Tensor
    bc_b: Tensor
    mode: str = "cma_d"
    residual_visual: bool = True
    residual_textual: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"unknown CMA mode {self.mode!r}; valid: {', '.join(MODES)}")
        d_q, d_o = self.mh_a.d_q, self.mh_a.d_o
        if self.mh_b.d_q != d_q or self.mh_b.d_o != d_o:
            raise DimensionError("visual and textual attention blocks disagree on d_q/d_o")
        if self.glu_a.wp.shape != (d_q + d_o, d_o) or self.glu_b.wp.shape != (d_q + d_o, d_o):
            raise DimensionError("GLU weights must be (d_q + d_o) x d_o")
        if self.wc_a.shape != (d_q + 2 * d_o, d_o) or self.wc_b.shape != (d_q + 2 * d_o, d_o):
            raise DimensionError("cross-gate weights must be (d_q + 2 d_o) x d_o")

    @classmethod
    def init(cls, rng, d_q, d_a, d_b, d_o, heads, d_c, d_c2, mode="cma_d",
             residual_visual=True, residual_textual=False) -> "CmaParams":
        return cls(
            mh_a=MultiHeadParams.init(rng, heads, d_q, d_a, d_a, d_c, d_c2, d_o),
            mh_b=MultiHeadParams.init(rng, heads, d_q, d_b, d_b, d_c, d_c2, d_o),
            glu_a=GluParams.init(rng, d_q, d_o),
            glu_b=GluParams.init(rng, d_q, d_o),
            wc_a=uniform_param(rng, (d_q + 2 * d_o, d_o)), bc_a=zero_param((d_o,)),
            wc_b=uniform_param(rng, (d_q + 2 * d_o, d_o)), bc_b=zero_param((d_o,)),
            mode=mode, residual_visual=residual_visual, residual_textual=residual_textual,
        )

    @property
    def d_o(self) -> int:
        return self.mh_a.d_o

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        out.update(self.mh_a.named(f"{prefix}.mh_a"))
        out.update(self.mh_b.named(f"{prefix}.mh_b"))
        out.update(self.glu_a.named(f"{prefix}.glu_a"))
        out.update(self.glu_b.named(f"{prefix}.glu_b"))
        out.update({f"{prefix}.wc_a": self.wc_a, f"{prefix}.bc_a": self.bc_a,
                    f"{prefix}.wc_b": self.wc_b, f"{prefix}.bc_b": self.bc_b})
        return out


@dataclass
class CmaOutput:
    visual_context: Tensor
    textual_context: Tensor
    visual_weights: list[np.ndarray] = field(default_factory=list)
    textual_weights: list[np.ndarray] = field(default_factory=list)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None):
    """``softmax(q k^T / sqrt(d)) v`` with ``d`` the width actually dotted.

    Returns ``(output, weights)``; ``mask`` marks valid key rows and must
    broadcast against the ``(..., k, m)`` score matrix.
    """
    if k.shape[-2] == 0:
        raise EmptyInputError("attention over zero keys")
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    scores = T.scale(T.matmul(q, T.transpose_last(k)), 1.0 / math.sqrt(q.shape[-1]))
    weights = T.softmax(scores, axis=-1, mask=mask)
    return T.matmul(weights, v), weights


@dataclass
class KeyValueMemory:
    """Per-head projected keys and values, reusable across decoder steps."""

    keys: list[Tensor]
    values: list[Tensor]
    mask: np.ndarray | None = None


def project_memory(k: Tensor, v: Tensor, p: MultiHeadParams, mask: np.ndarray | None = None) -> KeyValueMemory:
    if k.shape[-2] == 0:
        raise EmptyInputError("attention over zero keys")
    if k.shape[-1] != p.d_k or v.shape[-1] != p.d_v:
        raise DimensionError(f"key/value widths {k.shape[-1]}/{v.shape[-1]} vs params {p.d_k}/{p.d_v}")
    # mask over key rows (..., m) -> broadcast over query rows (..., 1, m)
    score_mask = None if mask is None else mask[..., None, :]
    return KeyValueMemory(
        keys=[T.matmul(k, w) for w in p.wk],
        values=[T.matmul(v, w) for w in p.wv],
        mask=score_mask,
    )


def attend(q: Tensor, memory: KeyValueMemory, p: MultiHeadParams):
    """Multi-head attention of ``q`` over a pre-projected memory."""
    if q.shape[-1] != p.d_q:
        raise DimensionError(f"query width {q.shape[-1]} != d_q {p.d_q}")
    heads, weights = [], []
    for wq, k_i, v_i in zip(p.wq, memory.keys, memory.values):
        head, w = scaled_dot_attention(T.matmul(q, wq), k_i, v_i, memory.mask)
        heads.append(head)
        weights.append(w.value)
    return T.matmul(T.concat_last(heads), p.wo), weights


def multi_head(q: Tensor, k: Tensor, v: Tensor, p: MultiHeadParams, mask: np.ndarray | None = None):
    """Returns ``(context, per-head weights)``."""
    return attend(q, project_memory(k, v, p, mask), p)


def glu_filter(q: Tensor, c: Tensor, g: GluParams) -> Tensor:
    if q.shape[:-1] != c.shape[:-1]:
        raise DimensionError(f"glu_filter: query rows {q.shape} vs context rows {c.shape}")
    qc = T.concat_last([q, c])
    proj = T.add_bias(T.matmul(qc, g.wp), g.bp)
    gate = T.sigmoid(T.add_bias(T.matmul(qc, g.wg), g.bg))
    return T.mul(proj, gate)


def cross_modify(q: Tensor, a2: Tensor, b2: Tensor, a1: Tensor | None, b1: Tensor | None, p: CmaParams):
    """Mutual correction of the gated contexts ``a2``/``b2``.

    ``a1``/``b1`` are the raw multi-head contexts, added back when the
    corresponding residual flag is set.
    """
    if not (q.shape[:-1] == a2.shape[:-1] == b2.shape[:-1]):
        raise DimensionError(f"cross_modify: row mismatch {q.shape}, {a2.shape}, {b2.shape}")
    qab = T.concat_last([q, a2, b2])
    a_out = T.mul(a2, T.sigmoid(T.add_bias(T.matmul(qab, p.wc_a), p.bc_a)))
    b_out = T.mul(b2, T.sigmoid(T.add_bias(T.matmul(qab, p.wc_b), p.bc_b)))
    if p.residual_visual:
        a_out = T.add(a_out, a1)
    if p.residual_textual:
        b_out = T.add(b_out, b1)
    return a_out, b_out


def cma_attend(q: Tensor, mem_a: KeyValueMemory | None, mem_b: KeyValueMemory | None, p: CmaParams) -> CmaOutput:
    """CMA over pre-projected visual/textual memories (see :func:`cma_forward`)."""
    out_shape = q.shape[:-1] + (p.d_o,)
    needs_a = p.mode != "textual_only"
    needs_b = p.mode != "visual_only"
    if needs_a and mem_a is None:
        raise EmptyInputError(f"mode {p.mode} needs visual features")
    if needs_b and mem_b is None:
        raise EmptyInputError(f"mode {p.mode} needs textual features")
    a1, wa = attend(q, mem_a, p.mh_a) if needs_a else (None, [])
    b1, wb = attend(q, mem_b, p.mh_b) if needs_b else (None, [])

    if p.mode == "visual_only":
        return CmaOutput(a1, T.zeros(out_shape), wa, [])
    if p.mode == "textual_only":
        return CmaOutput(T.zeros(out_shape), b1, [], wb)
    a2 = glu_filter(q, a1, p.glu_a)
    b2 = glu_filter(q, b1, p.glu_b)
    if p.mode == "parallel":
        return CmaOutput(a2, b2, wa, wb)
    a_out, b_out = cross_modify(q, a2, b2, a1, b1, p)
    return CmaOutput(a_out, b_out, wa, wb)


def cma_forward(q: Tensor, a: Tensor | None, b: Tensor | None, p: CmaParams,
                mask_a: np.ndarray | None = None) -> CmaOutput:
    """Cross Modification Attention of queries ``q`` over visual ``a`` and textual ``b``.

    Per mode: ``visual_only`` / ``textual_only`` return the single multi-head
    context and zeros for the other modality; ``parallel`` returns both
    GLU-filtered contexts; ``cma_d`` adds the sigmoid cross-gates and the
    configured residuals.
    """
    if q.shape[-2] == 0:
        raise EmptyInputError("cma_forward with zero queries")
    mem_a = mem_b = None
    if p.mode != "textual_only":
        if a is None or a.shape[-2] == 0:
            raise EmptyInputError("cma_forward: empty visual features")
        mem_a = project_memory(a, a, p.mh_a, mask_a)
    if p.mode != "visual_only":
        if b is None or b.shape[-2] == 0:
            raise EmptyInputError("cma_forward: empty textual features")
        mem_b = project_memory(b, b, p.mh_b)
    return cma_attend(q, mem_a, mem_b, p)
