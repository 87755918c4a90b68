"""Greedy, sampled and beam-search decoding.

A *step function* has the signature ``step_fn(prev_words, state) ->
(log_probs, new_state)`` where ``prev_words`` is an int array of shape
``(k,)``, ``log_probs`` is ``(k, |V|)`` (a :class:`Tensor` or ndarray) and
``state`` is any nesting of tuples, lists, dataclasses, arrays and tensors
whose leaves carry a leading row axis of size ``k``.  Decoding starts from
the boundary PAD and stops on emitting PAD or after ``max_len`` content
tokens.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .vocab import MAX_CONTENT, Caption, Vocabulary

StepFn = Callable[[np.ndarray, Any], tuple[Any, Any]]
PAD_INDEX = Vocabulary.pad_index


def _values(logp) -> np.ndarray:
    return logp.value if isinstance(logp, Tensor) else np.asarray(logp, dtype=np.float64)


def gather_state(state, idx: np.ndarray):
    """Select rows ``idx`` from every leaf of ``state`` (no gradient tracking)."""
    if state is None:
        return None
    if isinstance(state, Tensor):
        return Tensor._wrap(state.value[idx], False)
    if isinstance(state, np.ndarray):
        return state[idx] if state.ndim else state
    if isinstance(state, tuple) and hasattr(state, "_fields"):
        return type(state)(*(gather_state(s, idx) for s in state))
    if isinstance(state, (tuple, list)):
        return type(state)(gather_state(s, idx) for s in state)
    if dataclasses.is_dataclass(state):
        return dataclasses.replace(
            state, **{f.name: gather_state(getattr(state, f.name), idx) for f in dataclasses.fields(state)}
        )
    if isinstance(state, dict):
        return {k: gather_state(v, idx) for k, v in state.items()}
    return state


@dataclass
class BeamHypothesis:
    tokens: list[int]
    logprob: float
    state: Any = None
    finished: bool = False

    @property
    def caption(self) -> Caption:
        return Caption.from_content(self.tokens, role="generated")


def greedy_decode(step_fn: StepFn, state, batch_size: int = 1, max_len: int = MAX_CONTENT) -> list[Caption]:
    """Argmax decoding of ``batch_size`` rows at once; ties go to the lowest index."""
    seqs: list[list[int]] = [[] for _ in range(batch_size)]
    done = np.zeros(batch_size, dtype=bool)
    prev = np.full(batch_size, PAD_INDEX, dtype=np.int64)
    with T.no_grad():
        for _ in range(max_len):
            logp, state = step_fn(prev, state)
            tok = np.argmax(_values(logp), axis=-1)
            done |= tok == PAD_INDEX
            for i in np.flatnonzero(~done):
                seqs[i].append(int(tok[i]))
            if done.all():
                break
            prev = np.where(done, PAD_INDEX, tok)
    return [Caption.from_content(s, role="generated") for s in seqs]


def beam_candidates(step_fn: StepFn, state, beam: int = 3, max_len: int = MAX_CONTENT) -> list[BeamHypothesis]:
    """Finished hypotheses of a length-synchronous beam, best first.

    ``state`` holds a single row; it is replicated to ``beam`` rows.  Scores
    are raw summed log-probabilities (no length normalisation).  Hypotheses
    that emit PAD are set aside and compete with the survivors at the end.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    states = gather_state(state, np.zeros(beam, dtype=np.int64))
    scores = np.full(beam, -np.inf)
    scores[0] = 0.0
    seqs: list[list[int]] = [[] for _ in range(beam)]
    prev = np.full(beam, PAD_INDEX, dtype=np.int64)
    finished: list[BeamHypothesis] = []
    with T.no_grad():
        for t in range(max_len):
            logp, new_states = step_fn(prev, states)
            lp = _values(logp)
            vocab = lp.shape[-1]
            flat = (scores[:, None] + lp).ravel()
            order = np.argsort(-flat, kind="stable")
            active: list[tuple[int, int, float]] = []
            for idx in order[:beam]:
                s = float(flat[idx])
                if s == -np.inf:
                    break
                h, w = divmod(int(idx), vocab)
                if w == PAD_INDEX:
                    finished.append(BeamHypothesis(seqs[h], s, finished=True))
                else:
                    active.append((h, w, s))
            if not active:
                break
            if t == max_len - 1:
                finished.extend(BeamHypothesis(seqs[h] + [w], s, finished=True) for h, w, s in active)
                break
            if finished and max(f.logprob for f in finished) >= max(s for _, _, s in active):
                # log-probs only decrease, so no active hypothesis can overtake
                break
            rows = [h for h, _, _ in active]
            rows += [rows[0]] * (beam - len(active))
            states = gather_state(new_states, np.asarray(rows, dtype=np.int64))
            seqs = [seqs[h] + [w] for h, w, _ in active] + [[] for _ in range(beam - len(active))]
            scores = np.array([s for _, _, s in active] + [-np.inf] * (beam - len(active)))
            prev = np.array([w for _, w, _ in active] + [PAD_INDEX] * (beam - len(active)), dtype=np.int64)
    finished.sort(key=lambda hyp: -hyp.logprob)
    return finished


def beam_search(step_fn: StepFn, state, beam: int = 3, max_len: int = MAX_CONTENT) -> Caption:
    return beam_candidates(step_fn, state, beam, max_len)[0].caption


def sample_decode(step_fn: StepFn, state, rng: np.random.Generator, batch_size: int = 1,
                  max_len: int = MAX_CONTENT):
    """Multinomial sampling.

    Returns ``(captions, step_logps)`` where ``step_logps[t]`` holds the
    log-probability of the token drawn at step ``t`` for each row (0 for rows
    already finished).  When the step function yields tensors recorded on a
    tape, the entries are tensors usable in a policy-gradient loss.
    """
    seqs: list[list[int]] = [[] for _ in range(batch_size)]
    done = np.zeros(batch_size, dtype=bool)
    prev = np.full(batch_size, PAD_INDEX, dtype=np.int64)
    step_logps = []
    for _ in range(max_len):
        logp, state = step_fn(prev, state)
        lp = _values(logp)
        cdf = np.cumsum(np.exp(lp), axis=-1)
        cdf /= cdf[:, -1:]
        u = rng.random(batch_size)
        tok = np.minimum((cdf <= u[:, None]).sum(axis=-1), lp.shape[-1] - 1)
        live = (~done).astype(np.float64)
        if isinstance(logp, Tensor):
            step_logps.append(T.mul(T.pick_last(logp, tok), Tensor._wrap(live, False)))
        else:
            step_logps.append(lp[np.arange(batch_size), tok] * live)
        for i in np.flatnonzero(~done):
            if tok[i] != PAD_INDEX:
                seqs[i].append(int(tok[i]))
        done |= tok == PAD_INDEX
        if done.all():
            break
        prev = np.where(done, PAD_INDEX, tok)
    return [Caption.from_content(s, role="generated") for s in seqs], step_logps


def sequence_logprob(step_fn: StepFn, state, content: list[int], max_len: int = MAX_CONTENT) -> float:
    """Log-probability of a content sequence, including its closing PAD when shorter than ``max_len``."""
    targets = list(content)[:max_len]
    if len(targets) < max_len:
        targets.append(PAD_INDEX)
    total = 0.0
    prev = np.array([PAD_INDEX], dtype=np.int64)
    with T.no_grad():
        for w in targets:
            logp, state = step_fn(prev, state)
            total += float(_values(logp)[0, w])
            prev = np.array([w], dtype=np.int64)
    return total
