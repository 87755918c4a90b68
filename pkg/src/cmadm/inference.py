"""Two-pass caption generation and attention tracing over a trained model."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as T
from .captioner import CaptionModel
from .decode import beam_search, greedy_decode
from .vocab import STORED_LENGTH, Caption, Vocabulary, decode_caption


def greedy_drafts(model: CaptionModel, vr: T.Tensor, mask: np.ndarray) -> list[Caption]:
    with T.no_grad():
        state = model.draft_start(vr.detach(), mask)
        return greedy_decode(model.draft_step_fn(), state, vr.shape[0])


def greedy_refined(model: CaptionModel, vr: T.Tensor, mask: np.ndarray, drafts: Sequence[Caption]) -> list[Caption]:
    with T.no_grad():
        state = model.delib_start(vr.detach(), mask, draft_matrix(drafts))
        return greedy_decode(model.delib_step_fn(), state, vr.shape[0])


def draft_matrix(drafts: Sequence[Caption]) -> np.ndarray:
    return np.array([d.tokens for d in drafts], dtype=np.int64).reshape(len(drafts), STORED_LENGTH)


def two_pass(model: CaptionModel, features: Sequence[np.ndarray], beam: int = 3):
    """Draft then refine each image; returns ``(drafts, refined)`` caption lists."""
    drafts, refined = [], []
    with T.no_grad():
        for f in features:
            vr, mask = model.refine([f])
            draft = beam_search(model.draft_step_fn(), model.draft_start(vr, mask), beam)
            state = model.delib_start(vr, mask, draft_matrix([draft]))
            drafts.append(Caption(draft.tokens, "draft"))
            refined.append(Caption(beam_search(model.delib_step_fn(), state, beam).tokens, "refined"))
    return drafts, refined


def two_pass_greedy(model: CaptionModel, features: Sequence[np.ndarray], batch_size: int = 100):
    drafts, refined = [], []
    with T.no_grad():
        for i in range(0, len(features), batch_size):
            vr, mask = model.refine(features[i : i + batch_size])
            d = greedy_drafts(model, vr, mask)
            drafts += d
            refined += greedy_refined(model, vr, mask, d)
    return drafts, refined


def attention_trace(model: CaptionModel, features: np.ndarray, vocab: Vocabulary, beam: int = 3) -> list[dict]:
    """Per-step, per-head CMA weights while replaying the refined caption.

    Returns records ``{step, head, modality, weights, tokens, word, draft,
    refined}``; visual
    weights range over the image regions, textual weights over the 18 draft
    slots.  One block of records per emitted refined word.
    """
    (draft,), (refined,) = two_pass(model, [features], beam)
    trace: list = []
    step = model.delib_step_fn(trace)
    with T.no_grad():
        vr, mask = model.refine([features])
        state = model.delib_start(vr, mask, draft_matrix([draft]))
        prev = np.array([vocab.pad_index])
        for w in refined.content:
            _, state = step(prev, state)
            prev = np.array([w])
    draft_slots = [vocab.word(t) for t in draft.tokens]
    regions = [f"region{i}" for i in range(features.shape[0])]
    strings = {"draft": decode_caption(draft, vocab), "refined": decode_caption(refined, vocab)}
    records = []
    for t, (cma, w) in enumerate(zip(trace, refined.content)):
        word = vocab.word(w)
        for h, weights in enumerate(cma.visual_weights):
            records.append({"step": t, "head": h, "modality": "visual",
                            "weights": weights.reshape(-1).tolist(), "tokens": regions, "word": word, **strings})
        for h, weights in enumerate(cma.textual_weights):
            records.append({"step": t, "head": h, "modality": "textual",
                            "weights": weights.reshape(-1).tolist(), "tokens": draft_slots, "word": word, **strings})
    return records
