"""Joint optimisation of the drafting and deliberation models.

The cross-entropy stage minimises ``L(theta_1) + lambda_xe * L(theta_2)``;
the self-critical stage weights sampled-caption log-probabilities by the
CIDEr-D advantage over a greedy baseline, drafting term plus
``lambda_rl`` times the deliberation term.  Drafts fed to the deliberation
model always come from greedy decoding under the current drafting model.
"""

from __future__ import annotations

import configparser
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .captioner import CaptionModel, ModelConfig
from .data import CorpusItem, build_vocabulary
from .decode import sample_decode
from .errors import ContractError, NumericalError, VocabularyError
from .inference import draft_matrix, greedy_drafts, greedy_refined, two_pass, two_pass_greedy
from .metrics import CorpusIdf, cider_d, evaluation_report
from .optim import Adam, clip_gradients
from .tensor import Tape, Tensor
from .vocab import Caption, Vocabulary, decode_caption, encode_caption

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lambda_xe: float = 0.2
    lambda_rl: float = 0.1
    batch_size: int = 50
    xe_epochs: int = 30
    scst_epochs: int = 15
    xe_lr: float = 2e-4
    xe_lr_decay: float = 0.8
    xe_lr_every: int = 3
    scst_lr: float = 2e-5
    scst_lr_decay: float = 0.5
    scst_patience: int = 3
    label_smoothing: float = 0.2
    ss_increment: float = 0.05
    ss_every: int = 5
    ss_max: float = 0.5
    clip: float = 0.1
    beam_size: int = 3
    seed: int = 0
    # architecture
    d_model: int = 64
    d_refined: int = 64
    heads: int = 4
    d_head: int = 16
    mode: str = "cma_d"
    residual_visual: bool = True
    residual_textual: bool = False

    def __post_init__(self):
        if self.lambda_xe < 0 or self.lambda_rl < 0:
            raise ContractError("trade-off coefficients must be >= 0")
        if not 0 <= self.label_smoothing < 1:
            raise ContractError("label smoothing must lie in [0, 1)")
        if not 0 <= self.ss_max <= 1:
            raise ContractError("scheduled-sampling cap must lie in [0, 1]")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")

    def model_config(self, vocab_size: int, d_feat: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, d_feat=d_feat, d_refined=self.d_refined,
                           d_model=self.d_model, heads=self.heads, d_head=self.d_head, mode=self.mode,
                           residual_visual=self.residual_visual, residual_textual=self.residual_textual)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# Desk-scale schedule.  500 scenes give only 50 steps per epoch at batch 10, and
# at rates of 2e-3 or below the decoders never leave the language prior in 15
# epochs.  SCST rates above 1e-3 collapse the sampled captions.
DESK_CONFIG = TrainConfig(batch_size=10, xe_epochs=15, scst_epochs=5, xe_lr=1e-2, scst_lr=1e-3)


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Flat ``key = value`` lines (``#`` comments) over the defaults of ``base``."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    parser.optionxform = str
    parser.read_string("[train]\n" + text)
    base = base or TrainConfig()
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    changes = {}
    for key, raw in parser["train"].items():
        if key not in known:
            raise ContractError(f"unknown config key {key!r}")
        current = getattr(base, key)
        if isinstance(current, bool):
            changes[key] = parser["train"].getboolean(key)
        elif isinstance(current, int):
            changes[key] = int(raw)
        elif isinstance(current, float):
            changes[key] = float(raw)
        else:
            changes[key] = raw.strip()
    return base.replace(**changes)


def load_config(path: str | Path, base: TrainConfig | None = None) -> TrainConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), base)


def format_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items())


# ------------------------------------------------------------------ schedules


def label_smooth(target: int, vocab_size: int, confidence: float = 0.2) -> np.ndarray:
    """Target keeps ``1 - confidence``; the rest is spread over the other words."""
    if not 0 <= target < vocab_size:
        raise VocabularyError(f"target {target} outside vocabulary of size {vocab_size}")
    return smoothed_targets(np.array([target]), vocab_size, confidence)[0]


def smoothed_targets(targets: np.ndarray, vocab_size: int, confidence: float) -> np.ndarray:
    off = confidence / (vocab_size - 1) if vocab_size > 1 else 0.0
    q = np.full((len(targets), vocab_size), off)
    q[np.arange(len(targets)), targets] = 1.0 - confidence
    return q


def scheduled_sampling_prob(epoch: int, increment: float = 0.05, every: int = 5, cap: float = 0.5) -> float:
    return min(cap, increment * (epoch // every))


def lr_schedule(stage: str, epoch: int = 0, plateau_count: int = 0, config: TrainConfig | None = None) -> float:
    cfg = config or TrainConfig()
    if stage == "xe":
        return cfg.xe_lr * cfg.xe_lr_decay ** (epoch // cfg.xe_lr_every)
    if stage == "scst":
        return cfg.scst_lr * cfg.scst_lr_decay**plateau_count
    raise ContractError(f"unknown stage {stage!r}")


class PlateauTracker:
    """Counts evaluations without improvement; fires after ``patience`` in a row."""

    def __init__(self, patience: int = 3):
        self.patience = patience
        self.best = -math.inf
        self.stale = 0
        self.events = 0

    def update(self, score: float) -> bool:
        if score > self.best:
            self.best, self.stale = score, 0
            return False
        self.stale += 1
        if self.stale >= self.patience:
            self.stale = 0
            self.events += 1
            return True
        return False


# -------------------------------------------------------------------- batches


@dataclass
class Batch:
    ids: list[str]
    features: list[np.ndarray]
    refs: list[list[str]]
    tokens: np.ndarray  # (items * refs, 18) int
    rows: np.ndarray  # item index of every token row

    def __len__(self) -> int:
        return len(self.ids)


def make_batch(items: Sequence[CorpusItem], vocab: Vocabulary) -> Batch:
    if not items:
        raise ContractError("empty batch")
    tokens, rows = [], []
    for i, it in enumerate(items):
        for r in it.refs:
            tokens.append(encode_caption(r, vocab).tokens)
            rows.append(i)
    return Batch([it.id for it in items], [it.features for it in items], [list(it.refs) for it in items],
                 np.array(tokens, dtype=np.int64), np.array(rows, dtype=np.int64))


# ------------------------------------------------------------------ XE stage


def teacher_forced_nll(step_fn, state, tokens: np.ndarray, vocab_size: int, smoothing: float = 0.0,
                       ss_prob: float = 0.0, rng: np.random.Generator | None = None) -> Tensor:
    """Mean over rows of the summed (smoothed) token NLL of stored captions.

    Targets are the content tokens plus the closing PAD.  With probability
    ``ss_prob`` per row and step the next input is drawn from the model's
    own distribution instead of the reference token.
    """
    rows = tokens.shape[0]
    lengths = (tokens[:, 1:-1] != Vocabulary.pad_index).cumprod(axis=1).sum(axis=1)
    steps = int(lengths.max()) + 1
    prev = tokens[:, 0]
    total = None
    for t in range(steps):
        logp, state = step_fn(prev, state)
        target = tokens[:, t + 1]
        live = (t <= lengths).astype(np.float64)
        q = smoothed_targets(target, vocab_size, smoothing) * live[:, None]
        term = T.sum_all(T.mul(Tensor._wrap(q, False), logp))
        total = term if total is None else T.add(total, term)
        nxt = target
        if ss_prob > 0 and rng is not None:
            use = rng.random(rows) < ss_prob
            if use.any():
                cdf = np.cumsum(np.exp(logp.value), axis=-1)
                cdf /= cdf[:, -1:]
                drawn = np.minimum((cdf <= rng.random(rows)[:, None]).sum(axis=-1), vocab_size - 1)
                nxt = np.where(use, drawn, target)
        prev = nxt
    return T.scale(total, -1.0 / rows)


@dataclass
class XeLoss:
    total: Tensor
    draft: Tensor
    delib: Tensor
    drafts: list[Caption]


def xe_joint_loss(model: CaptionModel, batch: Batch, lambda_xe: float, smoothing: float = 0.0,
                  ss_prob: float = 0.0, rng: np.random.Generator | None = None) -> XeLoss:
    """``L(theta_1) + lambda_xe * L(theta_2)`` on one batch, averaged over items."""
    if len(batch) == 0:
        raise ContractError("empty batch")
    vocab_size = model.config.vocab_size
    vr, mask = model.refine(batch.features)
    drafts = greedy_drafts(model, vr, mask)
    rows = batch.rows
    vr_rows, mask_rows = T.take(vr, rows), mask[rows]
    draft_loss = teacher_forced_nll(model.draft_step_fn(), model.draft_start(vr_rows, mask_rows),
                                    batch.tokens, vocab_size, smoothing, ss_prob, rng)
    delib_state = model.delib_start(vr_rows, mask_rows, draft_matrix(drafts)[rows])
    delib_loss = teacher_forced_nll(model.delib_step_fn(), delib_state, batch.tokens, vocab_size,
                                    smoothing, ss_prob, rng)
    total = T.add(draft_loss, T.scale(delib_loss, lambda_xe))
    return XeLoss(total, draft_loss, delib_loss, drafts)


# ---------------------------------------------------------------- SCST stage


@dataclass
class RewardRecord:
    item: str
    model: str
    reward: float
    baseline: float

    @property
    def advantage(self) -> float:
        return self.reward - self.baseline


class CiderReward:
    """CIDEr-D of token captions against string references, IDF frozen at construction."""

    def __init__(self, references: Sequence[Sequence[str]], vocab: Vocabulary):
        self.idf = CorpusIdf.build(references)
        self.vocab = vocab

    def __call__(self, captions: Sequence[Caption], refs: Sequence[Sequence[str]], ids: Sequence[str]) -> np.ndarray:
        out = np.zeros(len(captions))
        for i, (cap, r, ident) in enumerate(zip(captions, refs, ids)):
            try:
                out[i] = cider_d([decode_caption(cap, self.vocab)], [r], self.idf)[0]
            except Exception as exc:
                raise RuntimeError(f"reward failed for item {ident}") from exc
        return out


def policy_gradient_loss(step_logps: Sequence[Tensor], advantages: np.ndarray) -> Tensor:
    """``-mean_i (r_i - b_i) * log p(w_s,i)``; its gradient is the one-sample REINFORCE estimate."""
    adv = Tensor._wrap(np.asarray(advantages, dtype=np.float64), False)
    total = None
    for lp in step_logps:
        term = T.sum_all(T.mul(adv, lp))
        total = term if total is None else T.add(total, term)
    return T.scale(total, -1.0 / len(advantages))


@dataclass
class ScstResult:
    total: Tensor
    draft: Tensor
    delib: Tensor
    records: list[RewardRecord] = field(default_factory=list)


def scst_joint_step(model: CaptionModel, batch: Batch, reward_fn: Callable, lambda_rl: float,
                    rng: np.random.Generator) -> ScstResult:
    """Self-critical surrogate loss for both models on one batch."""
    n = len(batch)
    vr, mask = model.refine(batch.features)
    greedy_d = greedy_drafts(model, vr, mask)
    base_d = reward_fn(greedy_d, batch.refs, batch.ids)
    sampled_d, logps_d = sample_decode(model.draft_step_fn(), model.draft_start(vr, mask), rng, n)
    rew_d = reward_fn(sampled_d, batch.refs, batch.ids)

    drafts = draft_matrix(greedy_d)
    greedy_r = greedy_refined(model, vr, mask, greedy_d)
    base_r = reward_fn(greedy_r, batch.refs, batch.ids)
    sampled_r, logps_r = sample_decode(model.delib_step_fn(), model.delib_start(vr, mask, drafts), rng, n)
    rew_r = reward_fn(sampled_r, batch.refs, batch.ids)

    loss_d = policy_gradient_loss(logps_d, rew_d - base_d)
    loss_r = policy_gradient_loss(logps_r, rew_r - base_r)
    records = [RewardRecord(i, "draft", float(r), float(b)) for i, r, b in zip(batch.ids, rew_d, base_d)]
    records += [RewardRecord(i, "refined", float(r), float(b)) for i, r, b in zip(batch.ids, rew_r, base_r)]
    return ScstResult(T.add(loss_d, T.scale(loss_r, lambda_rl)), loss_d, loss_r, records)


# ---------------------------------------------------------------- main loop


def named_grads(model: CaptionModel, grads: dict[int, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: grads[p.node_id] for k, p in model.params.items() if p.node_id in grads}


def greedy_scores(model: CaptionModel, items: Sequence[CorpusItem], vocab: Vocabulary,
                  idf: CorpusIdf | None = None) -> dict[str, float]:
    """Mean CIDEr-D of greedy drafts and greedy refinements."""
    drafts, refined = two_pass_greedy(model, [it.features for it in items])
    refs = [it.refs for it in items]
    idf = idf or CorpusIdf.build(refs)
    return {
        "draft_CIDEr-D": cider_d([decode_caption(c, vocab) for c in drafts], refs, idf)[0],
        "refined_CIDEr-D": cider_d([decode_caption(c, vocab) for c in refined], refs, idf)[0],
    }


def greedy_reward(model: CaptionModel, items: Sequence[CorpusItem], reward: CiderReward) -> float:
    """Mean reward of greedy refined captions, the quantity SCST should not lower."""
    _, refined = two_pass_greedy(model, [it.features for it in items])
    return float(np.mean(reward(refined, [it.refs for it in items], [it.id for it in items])))


@dataclass
class TrainResult:
    model: CaptionModel
    vocab: Vocabulary
    reports: list[dict]


def train(items: Sequence[CorpusItem], config: TrainConfig, val_items: Sequence[CorpusItem] | None = None,
          vocab: Vocabulary | None = None, model: CaptionModel | None = None, stage: str = "both",
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """XE stage then SCST stage (or one of them), deterministic given ``config.seed``."""
    if not items:
        raise ContractError("empty training corpus")
    if stage not in ("xe", "scst", "both"):
        raise ContractError(f"unknown stage {stage!r}")
    vocab = vocab or build_vocabulary(it.refs for it in items)
    if model is None:
        model = CaptionModel.create(config.model_config(len(vocab), items[0].features.shape[1]), config.seed)
    val_items = list(val_items) if val_items else list(items[: min(100, len(items))])
    val_idf = CorpusIdf.build([it.refs for it in val_items])
    order_rng = np.random.default_rng([config.seed, 1])
    ss_rng = np.random.default_rng([config.seed, 2])
    sample_rng = np.random.default_rng([config.seed, 3])
    reports: list[dict] = []
    global_step = 0

    def batches():
        perm = order_rng.permutation(len(items))
        for i in range(0, len(items), config.batch_size):
            yield make_batch([items[j] for j in perm[i : i + config.batch_size]], vocab)

    def apply(tape: Tape, loss: Tensor, opt: Adam, where: str):
        if not np.isfinite(loss.value):
            raise NumericalError(f"non-finite loss at {where}")
        grads = clip_gradients(named_grads(model, tape.backward(loss)), -config.clip, config.clip)
        opt.step(grads)

    def emit(rec: dict):
        reports.append(rec)
        log.info("%s", rec)
        if on_epoch:
            on_epoch(rec)

    if stage in ("xe", "both"):
        opt = Adam(model.params, lr=lr_schedule("xe", 0, config=config))
        for epoch in range(config.xe_epochs):
            opt.lr = lr_schedule("xe", epoch, config=config)
            ss = scheduled_sampling_prob(epoch, config.ss_increment, config.ss_every, config.ss_max)
            sums = np.zeros(2)
            count = 0
            for batch in batches():
                global_step += 1
                with Tape() as tape:
                    out = xe_joint_loss(model, batch, config.lambda_xe, config.label_smoothing, ss, ss_rng)
                apply(tape, out.total, opt, f"xe epoch {epoch} step {global_step}")
                sums += (out.draft.item() * len(batch), out.delib.item() * len(batch))
                count += len(batch)
            emit({"epoch": epoch, "stage": "xe", "loss_draft": sums[0] / count, "loss_delib": sums[1] / count,
                  "reward_mean": None, "lr": opt.lr, "ss_prob": ss,
                  "metrics": greedy_scores(model, val_items, vocab, val_idf)})

    if stage in ("scst", "both") and config.scst_epochs > 0:
        reward = CiderReward([it.refs for it in items], vocab)
        opt = Adam(model.params, lr=lr_schedule("scst", 0, 0, config))
        plateau = PlateauTracker(config.scst_patience)
        start_reward = greedy_reward(model, items, reward)
        for epoch in range(config.scst_epochs):
            opt.lr = lr_schedule("scst", epoch, plateau.events, config)
            sums = np.zeros(2)
            rewards = {"draft": [], "refined": []}
            count = 0
            for batch in batches():
                global_step += 1
                with Tape() as tape:
                    out = scst_joint_step(model, batch, reward, config.lambda_rl, sample_rng)
                apply(tape, out.total, opt, f"scst epoch {epoch} step {global_step}")
                sums += (out.draft.item() * len(batch), out.delib.item() * len(batch))
                count += len(batch)
                for r in out.records:
                    rewards[r.model].append(r.reward)
            metrics = greedy_scores(model, val_items, vocab, val_idf)
            emit({"epoch": epoch, "stage": "scst", "loss_draft": sums[0] / count, "loss_delib": sums[1] / count,
                  "reward_mean": float(np.mean(rewards["refined"])),
                  "reward_draft_mean": float(np.mean(rewards["draft"])), "lr": opt.lr, "metrics": metrics,
                  "greedy_reward_start": start_reward, "greedy_reward": greedy_reward(model, items, reward)})
            plateau.update(metrics["refined_CIDEr-D"])
    return TrainResult(model, vocab, reports)


def evaluate(model: CaptionModel, items: Sequence[CorpusItem], vocab: Vocabulary, which: str = "both",
             beam: int = 3) -> dict:
    """Beam-search both passes over ``items``; metric blocks per requested pass."""
    if which not in ("draft", "refined", "both"):
        raise ContractError(f"unknown pass {which!r}")
    drafts, refined = two_pass(model, [it.features for it in items], beam)
    refs = [it.refs for it in items]
    report: dict = {"beam": beam, "count": len(items)}
    if which in ("draft", "both"):
        report["draft"] = evaluation_report([decode_caption(c, vocab) for c in drafts], refs)
    if which in ("refined", "both"):
        report["refined"] = evaluation_report([decode_caption(c, vocab) for c in refined], refs)
    return report
