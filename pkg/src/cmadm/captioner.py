"""Drafting model and CMA-based deliberation model sharing one refining encoder.

Both decoders are top-down two-LSTM stacks.  The drafting decoder attends
over the refined region features with multi-head attention; the
deliberation decoder runs CMA over the projected region features and the
embedded draft caption.

Decoder steps are batched over rows: every tensor carries a leading row
axis ``R`` (one row per caption being decoded).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .attention import (
    CmaOutput,
    CmaParams,
    KeyValueMemory,
    MultiHeadParams,
    attend,
    cma_attend,
    project_memory,
    uniform_param,
    zero_param,
)
from .errors import DimensionError, EmptyInputError, VocabularyError
from .tensor import Tensor
from .vocab import STORED_LENGTH

# the published configuration, kept for reference; tests run the desk defaults
FULL_DIMENSIONS = dict(d_feat=2048, d_refined=1024, d_model=1024, heads=8, d_head=128)


@dataclass
class ModelConfig:
    vocab_size: int
    d_feat: int = 32
    d_refined: int = 64
    d_model: int = 64
    heads: int = 4
    d_head: int = 16
    mode: str = "cma_d"
    residual_visual: bool = True
    residual_textual: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LstmParams:
    w: Tensor  # (d_in + d, 4d), gate order: input, forget, output, candidate
    b: Tensor  # (4d,)

    @classmethod
    def init(cls, rng, d_in: int, d: int) -> "LstmParams":
        return cls(uniform_param(rng, (d_in + d, 4 * d)), zero_param((4 * d,)))

    @property
    def hidden(self) -> int:
        return self.b.shape[0] // 4

    def named(self, prefix):
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class DecoderState(NamedTuple):
    h1: Tensor
    c1: Tensor
    h2: Tensor
    c2: Tensor

    @classmethod
    def zeros(cls, rows: int, d: int) -> "DecoderState":
        return cls(*(T.zeros((rows, d)) for _ in range(4)))


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, p: LstmParams):
    d = p.hidden
    if h.shape[-1] != d or c.shape != h.shape:
        raise DimensionError(f"lstm_cell: state shapes {h.shape}/{c.shape} vs hidden {d}")
    if x.shape[-1] + d != p.w.shape[0]:
        raise DimensionError(f"lstm_cell: input width {x.shape[-1]} vs weights {p.w.shape}")
    z = T.add_bias(T.matmul(T.concat_last([x, h]), p.w), p.b)
    i = T.sigmoid(T.slice_last(z, 0, d))
    f = T.sigmoid(T.slice_last(z, d, 2 * d))
    o = T.sigmoid(T.slice_last(z, 2 * d, 3 * d))
    g = T.tanh(T.slice_last(z, 3 * d, 4 * d))
    c_new = T.add(T.mul(f, c), T.mul(i, g))
    return T.mul(o, T.tanh(c_new)), c_new


@dataclass
class DraftingParams:
    refine_w: Tensor
    refine_b: Tensor
    embed: Tensor
    lstm1: LstmParams
    attn: MultiHeadParams
    lstm2: LstmParams
    out_w: Tensor
    out_b: Tensor

    @classmethod
    def init(cls, rng, cfg: ModelConfig) -> "DraftingParams":
        d, dr = cfg.d_model, cfg.d_refined
        return cls(
            refine_w=uniform_param(rng, (cfg.d_feat, dr)),
            refine_b=zero_param((dr,)),
            embed=uniform_param(rng, (cfg.vocab_size, d)),
            lstm1=LstmParams.init(rng, d + dr + d, d),
            attn=MultiHeadParams.init(rng, cfg.heads, d, dr, dr, cfg.d_head, cfg.d_head, d),
            lstm2=LstmParams.init(rng, 2 * d, d),
            out_w=uniform_param(rng, (d, cfg.vocab_size)),
            out_b=zero_param((cfg.vocab_size,)),
        )

    def named(self) -> dict[str, Tensor]:
        out = {"refine.w": self.refine_w, "refine.b": self.refine_b, "draft.embed": self.embed}
        out.update(self.lstm1.named("draft.lstm1"))
        out.update(self.attn.named("draft.attn"))
        out.update(self.lstm2.named("draft.lstm2"))
        out.update({"draft.out_w": self.out_w, "draft.out_b": self.out_b})
        return out


@dataclass
class DeliberationParams:
    embed_draft: Tensor
    wa: Tensor
    ba: Tensor
    wb: Tensor
    bb: Tensor
    embed_word: Tensor
    lstm1: LstmParams
    cma: CmaParams
    lstm2: LstmParams
    out_w: Tensor
    out_b: Tensor

    @classmethod
    def init(cls, rng, cfg: ModelConfig) -> "DeliberationParams":
        d = cfg.d_model
        return cls(
            embed_draft=uniform_param(rng, (cfg.vocab_size, d)),
            wa=uniform_param(rng, (cfg.d_refined, d)), ba=zero_param((d,)),
            wb=uniform_param(rng, (d, d)), bb=zero_param((d,)),
            embed_word=uniform_param(rng, (cfg.vocab_size, d)),
            lstm1=LstmParams.init(rng, 4 * d, d),
            cma=CmaParams.init(rng, d, d, d, d, cfg.heads, cfg.d_head, cfg.d_head, cfg.mode,
                               cfg.residual_visual, cfg.residual_textual),
            lstm2=LstmParams.init(rng, 3 * d, d),
            out_w=uniform_param(rng, (d, cfg.vocab_size)),
            out_b=zero_param((cfg.vocab_size,)),
        )

    def named(self) -> dict[str, Tensor]:
        out = {"delib_enc.embed_draft": self.embed_draft,
               "delib_enc.wa": self.wa, "delib_enc.ba": self.ba,
               "delib_enc.wb": self.wb, "delib_enc.bb": self.bb,
               "delib_dec.embed_word": self.embed_word}
        out.update(self.lstm1.named("delib_dec.lstm1"))
        out.update(self.cma.named("delib_dec.cma"))
        out.update(self.lstm2.named("delib_dec.lstm2"))
        out.update({"delib_dec.out_w": self.out_w, "delib_dec.out_b": self.out_b})
        return out


# ------------------------------------------------------------------- encoders


def pad_regions(features: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Stack variable-length region sets into ``(B, n_max, d)`` plus a validity mask."""
    if not features:
        raise EmptyInputError("no images")
    d = features[0].shape[1]
    n_max = max(f.shape[0] for f in features)
    out = np.zeros((len(features), n_max, d))
    mask = np.zeros((len(features), n_max), dtype=bool)
    for i, f in enumerate(features):
        if f.shape[0] == 0:
            raise EmptyInputError(f"image {i} has no regions")
        if f.shape[1] != d:
            raise DimensionError(f"image {i} feature width {f.shape[1]} != {d}")
        out[i, : len(f)] = f
        mask[i, : len(f)] = True
    return out, mask


def refine_features(vb: Tensor, p: DraftingParams) -> Tensor:
    """ReLU(V^B W + b): the refining encoder both decoders read from."""
    if vb.shape[-2] == 0:
        raise EmptyInputError("refine_features on zero regions")
    if vb.shape[-1] != p.refine_w.shape[0]:
        raise DimensionError(f"feature width {vb.shape[-1]} != d_B {p.refine_w.shape[0]}")
    return T.relu(T.add_bias(T.matmul(vb, p.refine_w), p.refine_b))


def _check_words(words: np.ndarray, vocab_size: int) -> np.ndarray:
    words = np.asarray(words, dtype=np.int64)
    if words.size and (words.min() < 0 or words.max() >= vocab_size):
        raise VocabularyError(f"token index outside vocabulary of size {vocab_size}")
    return words


@dataclass
class DraftingContext:
    vr: Tensor
    vr_mean: Tensor
    memory: KeyValueMemory
    mask: np.ndarray | None


def drafting_context(vr: Tensor, mask: np.ndarray | None, p: DraftingParams) -> DraftingContext:
    return DraftingContext(vr, T.mean_rows(vr, mask), project_memory(vr, vr, p.attn, mask), mask)


def drafting_step(ctx: DraftingContext, prev_words, state: DecoderState, p: DraftingParams):
    """One drafting-decoder step; returns ``(log p_t^D, new state)`` with rows ``R``."""
    words = _check_words(prev_words, p.embed.shape[0])
    x1 = T.concat_last([T.take(p.embed, words), ctx.vr_mean, state.h2])
    h1, c1 = lstm_cell(x1, state.h1, state.c1, p.lstm1)
    rows = h1.shape[0]
    visual, _ = attend(T.reshape(h1, (rows, 1, h1.shape[1])), ctx.memory, p.attn)
    visual = T.reshape(visual, (rows, visual.shape[-1]))
    h2, c2 = lstm_cell(T.concat_last([h1, visual]), state.h2, state.c2, p.lstm2)
    logits = T.add_bias(T.matmul(h2, p.out_w), p.out_b)
    return T.log_softmax(logits), DecoderState(h1, c1, h2, c2)


def embed_draft(drafts, p: DeliberationParams) -> Tensor:
    """Rows of W_e^D for each stored draft slot: ``(R, 18) -> (R, 18, d_D)``."""
    drafts = _check_words(drafts, p.embed_draft.shape[0])
    if drafts.shape[-1] != STORED_LENGTH:
        raise DimensionError(f"drafts must be padded to {STORED_LENGTH} slots, got {drafts.shape}")
    return T.take(p.embed_draft, drafts)


def project_modalities(vr: Tensor, vd: Tensor, p: DeliberationParams):
    if vr.shape[-1] != p.wa.shape[0] or vd.shape[-1] != p.wb.shape[0]:
        raise DimensionError(f"project_modalities: {vr.shape}/{vd.shape} vs {p.wa.shape}/{p.wb.shape}")
    a = T.relu(T.add_bias(T.matmul(vr, p.wa), p.ba))
    b = T.relu(T.add_bias(T.matmul(vd, p.wb), p.bb))
    return a, b


@dataclass
class DeliberationContext:
    a: Tensor
    b: Tensor
    a_mean: Tensor
    b_mean: Tensor
    mem_a: KeyValueMemory | None
    mem_b: KeyValueMemory | None
    mask: np.ndarray | None


def deliberation_context(vr: Tensor, mask: np.ndarray | None, drafts, p: DeliberationParams) -> DeliberationContext:
    a, b = project_modalities(vr, embed_draft(drafts, p), p)
    mode = p.cma.mode
    mem_a = project_memory(a, a, p.cma.mh_a, mask) if mode != "textual_only" else None
    mem_b = project_memory(b, b, p.cma.mh_b) if mode != "visual_only" else None
    return DeliberationContext(a, b, T.mean_rows(a, mask), T.mean_rows(b), mem_a, mem_b, mask)


def deliberation_step(ctx: DeliberationContext, prev_words, state: DecoderState, p: DeliberationParams):
    """One deliberation-decoder step; returns ``(log p_t^R, new state, CmaOutput)``."""
    words = _check_words(prev_words, p.embed_word.shape[0])
    x1 = T.concat_last([T.take(p.embed_word, words), ctx.a_mean, ctx.b_mean, state.h2])
    h1, c1 = lstm_cell(x1, state.h1, state.c1, p.lstm1)
    rows = h1.shape[0]
    cma = cma_attend(T.reshape(h1, (rows, 1, h1.shape[1])), ctx.mem_a, ctx.mem_b, p.cma)
    a_t = T.reshape(cma.visual_context, (rows, p.cma.d_o))
    b_t = T.reshape(cma.textual_context, (rows, p.cma.d_o))
    h2, c2 = lstm_cell(T.concat_last([h1, a_t, b_t]), state.h2, state.c2, p.lstm2)
    logits = T.add_bias(T.matmul(h2, p.out_w), p.out_b)
    return T.log_softmax(logits), DecoderState(h1, c1, h2, c2), cma


# ---------------------------------------------------------------- full model


class CaptionModel:
    """Parameter container for the two-pass captioner.

    ``params`` maps stable names to parameter tensors; prefixes identify the
    parameter groups: ``refine.`` (shared), ``draft.`` (drafting decoder),
    ``delib_enc.`` and ``delib_dec.`` (deliberation encoder/decoder).
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        self.drafting = DraftingParams.init(rng, config)
        self.deliberation = DeliberationParams.init(rng, config)
        self.params: dict[str, Tensor] = {**self.drafting.named(), **self.deliberation.named()}

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0) -> "CaptionModel":
        return cls(config, np.random.default_rng(seed))

    def group(self, *prefixes: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.split(".", 1)[0] in prefixes}

    @property
    def drafting_names(self) -> list[str]:
        return list(self.group("refine", "draft"))

    @property
    def deliberation_only_names(self) -> list[str]:
        return list(self.group("delib_enc", "delib_dec"))

    def zero_(self) -> None:
        for p in self.params.values():
            p.value[...] = 0.0

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.value for k, v in self.params.items()}

    def load_state_dict(self, values: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if name not in values:
                raise KeyError(name)
            if values[name].shape != p.shape:
                raise DimensionError(f"{name}: stored shape {values[name].shape} != model shape {p.shape}")
            p.value[...] = values[name]

    # -- convenience wrappers used by training, decoding and the CLI

    def refine(self, features: Sequence[np.ndarray]) -> tuple[Tensor, np.ndarray]:
        vb, mask = pad_regions(features)
        return refine_features(T.Tensor._wrap(vb, False), self.drafting), mask

    def draft_start(self, vr: Tensor, mask: np.ndarray | None):
        ctx = drafting_context(vr, mask, self.drafting)
        return ctx, DecoderState.zeros(vr.shape[0], self.config.d_model)

    def delib_start(self, vr: Tensor, mask: np.ndarray | None, drafts):
        ctx = deliberation_context(vr, mask, drafts, self.deliberation)
        return ctx, DecoderState.zeros(vr.shape[0], self.config.d_model)

    def draft_step_fn(self):
        p = self.drafting

        def step(prev_words, state):
            ctx, dstate = state
            logp, new = drafting_step(ctx, prev_words, dstate, p)
            return logp, (ctx, new)

        return step

    def delib_step_fn(self, trace: list | None = None):
        """Step function for the decode module; CMA outputs are appended to ``trace``."""
        p = self.deliberation

        def step(prev_words, state):
            ctx, dstate = state
            logp, new, cma = deliberation_step(ctx, prev_words, dstate, p)
            if trace is not None:
                trace.append(cma)
            return logp, (ctx, new)

        return step


def cma_weights_ok(out: CmaOutput, tol: float = 1e-6) -> bool:
    for w in list(out.visual_weights) + list(out.textual_weights):
        if np.any(w < 0) or np.any(np.abs(w.sum(axis=-1) - 1.0) > tol):
            return False
    return True
