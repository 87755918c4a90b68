"""Run plumbing shared by the CLI and the acceptance suite.

A saved model is two files: the tensor checkpoint and a JSON sidecar
(``<checkpoint>.json``) holding the model configuration and vocabulary.
Ablation and sweep harnesses train one configuration per row from a shared
seed and report held-out metrics for both passes.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Callable, Iterable, Sequence

from . import checkpoint
from .attention import MODES
from .captioner import CaptionModel, ModelConfig
from .data import CorpusItem
from .errors import ContractError, CorruptArtifactError
from .training import TrainConfig, evaluate, train
from .vocab import Vocabulary

RESIDUALS = {"none": (False, False), "visual": (True, False), "textual": (False, True), "both": (True, True)}


def sidecar_path(ckpt: str | os.PathLike) -> Path:
    ckpt = Path(ckpt)
    return ckpt.with_name(ckpt.name + ".json")


def write_json(path: str | os.PathLike, obj) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def save_model(path: str | os.PathLike, model: CaptionModel, vocab: Vocabulary) -> None:
    checkpoint.save(path, model.state_dict())
    write_json(sidecar_path(path), {"model_config": model.config.to_dict(), "vocab": vocab.words})


def load_model(path: str | os.PathLike) -> tuple[CaptionModel, Vocabulary]:
    side = sidecar_path(path)
    try:
        meta = json.loads(side.read_text(encoding="utf-8"))
        config = ModelConfig(**meta["model_config"])
        vocab = Vocabulary(meta["vocab"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptArtifactError(f"{side}: unreadable model sidecar ({exc})") from exc
    if len(vocab) != config.vocab_size:
        raise CorruptArtifactError(f"{side}: vocabulary size {len(vocab)} != model config {config.vocab_size}")
    values = checkpoint.load(path)
    model = CaptionModel.create(config)
    missing = [k for k in model.params if k not in values]
    if missing:
        raise CorruptArtifactError(f"{path}: checkpoint lacks entry {missing[0]!r}")
    for name, p in model.params.items():
        if values[name].shape != p.shape:
            raise CorruptArtifactError(f"{path}: entry {name!r} has shape {values[name].shape}, expected {p.shape}")
    model.load_state_dict(values)
    return model, vocab


# ------------------------------------------------------------------ ablation


def ablation_rows(modes: Iterable[str], residuals: Iterable[str]) -> list[tuple[str, str]]:
    """(mode, residual) pairs; residual flags only apply to ``cma_d``."""
    modes, residuals = list(modes), list(residuals)
    for m in modes:
        if m not in MODES:
            raise ContractError(f"unknown mode {m!r}; valid: {', '.join(MODES)}")
    for r in residuals:
        if r not in RESIDUALS:
            raise ContractError(f"unknown residual {r!r}; valid: {', '.join(RESIDUALS)}")
    rows = []
    for m in modes:
        if m == "cma_d":
            rows += [(m, r) for r in residuals]
        else:
            rows.append((m, "none"))
    return rows


def run_ablation(train_items: Sequence[CorpusItem], eval_items: Sequence[CorpusItem], base: TrainConfig,
                 modes: Iterable[str], residuals: Iterable[str], beam: int = 3,
                 on_row: Callable[[dict], None] | None = None) -> list[dict]:
    records = []
    for i, (mode, res) in enumerate(ablation_rows(modes, residuals)):
        rv, rt = RESIDUALS[res]
        cfg = base.replace(mode=mode, residual_visual=rv, residual_textual=rt)
        result = train(train_items, cfg)
        ev = evaluate(result.model, eval_items, result.vocab, "both", beam)
        rec = {"row": i, "mode": mode, "residual": res, "seed": cfg.seed, "xe_epochs": cfg.xe_epochs,
               "scst_epochs": cfg.scst_epochs, "draft": ev["draft"], "refined": ev["refined"],
               "training": result.reports}
        records.append(rec)
        if on_row:
            on_row(rec)
    return records


# --------------------------------------------------------------------- sweep


def run_sweep(train_items: Sequence[CorpusItem], eval_items: Sequence[CorpusItem], base: TrainConfig,
              lambda_xe: Sequence[float] = (), lambda_rl: Sequence[float] = (), beam: int = 3,
              on_row: Callable[[dict], None] | None = None) -> list[dict]:
    """One run per coefficient.

    XE coefficients each train an XE-only model.  SCST coefficients share a
    single XE model trained with ``base.lambda_xe`` and fine-tune a copy of it.
    """
    if any(v < 0 for v in list(lambda_xe) + list(lambda_rl)):
        raise ContractError("trade-off coefficients must be >= 0")
    records = []

    def finish(rec, model, vocab):
        ev = evaluate(model, eval_items, vocab, "both", beam)
        rec.update(seed=base.seed, draft=ev["draft"], refined=ev["refined"])
        records.append(rec)
        if on_row:
            on_row(rec)

    for lam in lambda_xe:
        result = train(train_items, base.replace(lambda_xe=float(lam)), stage="xe")
        finish({"lambda_xe": float(lam)}, result.model, result.vocab)
    if lambda_rl:
        pre = train(train_items, base, stage="xe")
        for lam in lambda_rl:
            model = CaptionModel.create(pre.model.config)
            model.load_state_dict(pre.model.state_dict())
            train(train_items, base.replace(lambda_rl=float(lam)), vocab=pre.vocab, model=model, stage="scst")
            finish({"lambda_xe": base.lambda_xe, "lambda_rl": float(lam)}, model, pre.vocab)
    return records

