"""Command-line entry points: ``cmadm <command> ...``.

Exit codes: 0 success, 2 usage or input error, 3 numerical failure,
4 corrupt artifact.  Reports are JSON lines on stdout and, for training
runs, in the output directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .attention import MODES
from .data import build_vocabulary, fingerprint, generate_corpus, read_corpus, write_corpus
from .errors import ContractError, CorruptArtifactError, NumericalError
from .experiments import RESIDUALS, load_model, run_ablation, run_sweep, save_model, write_json
from .inference import attention_trace
from .training import DESK_CONFIG, TrainConfig, evaluate, load_config, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_CORRUPT = 0, 2, 3, 4
PRESETS = {"desk": DESK_CONFIG, "full": TrainConfig()}


class UsageError(Exception):
    pass


def _emit(rec: dict, fh=None) -> None:
    line = json.dumps(rec, sort_keys=True)
    print(line, flush=True)
    if fh is not None:
        fh.write(line + "\n")
        fh.flush()


def _csv(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in _csv(text)]
    except ValueError as exc:
        raise UsageError(f"not a list of numbers: {text!r}") from exc


def _corpus(path: str | None, what: str = "--data"):
    if path is None:
        raise UsageError(f"{what} is required")
    if not Path(path).is_file():
        raise UsageError(f"{what}: no such file {path}")
    items = read_corpus(path)
    if not items:
        raise UsageError(f"{what}: {path} holds no scenes")
    return items


def _config(args) -> TrainConfig:
    base = PRESETS[args.preset]
    if getattr(args, "config", None):
        if not Path(args.config).is_file():
            raise UsageError(f"--config: no such file {args.config}")
        base = load_config(args.config, base)
    if getattr(args, "seed", None) is not None:
        base = base.replace(seed=args.seed)
    return base


def _split(items, eval_path):
    """Held-out items: ``eval_path`` if given, else the last fifth of ``items``."""
    if eval_path:
        return items, _corpus(eval_path, "--eval-data")
    cut = max(1, len(items) * 4 // 5)
    if cut >= len(items):
        raise UsageError("need at least 2 scenes to hold some out; pass --eval-data")
    return items[:cut], items[cut:]


# ------------------------------------------------------------------ commands


def cmd_gen_data(args) -> int:
    if args.num_scenes < 1:
        raise UsageError("--num-scenes must be >= 1")
    out = Path(args.out)
    if not out.parent.exists():
        raise UsageError(f"--out: directory {out.parent} does not exist")
    items = generate_corpus(args.num_scenes, args.seed, start=args.start)
    try:
        write_corpus(out, items)
    except OSError as exc:
        raise UsageError(f"cannot write {out}: {exc}") from exc
    vocab = build_vocabulary(it.refs for it in items)
    _emit({"command": "gen-data", "scenes": len(items), "seed": args.seed, "start": args.start,
           "out": str(out), "sha256": fingerprint(out), "vocab_size": len(vocab),
           "vocab_preview": vocab.words[:10]})
    return EXIT_OK


def cmd_train(args) -> int:
    items = _corpus(args.data)
    val = _corpus(args.val_data, "--val-data") if args.val_data else None
    cfg = _config(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / "model.ckpt"
    reports_path = out_dir / "reports.jsonl"
    corpus_fp = fingerprint(args.data)
    model = vocab = None
    resumed_from = None
    if args.resume:
        src = Path(args.resume)
        src_ckpt = src / "model.ckpt" if src.is_dir() else src
        manifest_path = src_ckpt.parent / "manifest.json"
        if manifest_path.is_file():
            prior = json.loads(manifest_path.read_text(encoding="utf-8"))
            if prior.get("corpus_fingerprint") != corpus_fp:
                raise UsageError(f"--resume: corpus fingerprint differs from the one recorded in {manifest_path}")
        if not src_ckpt.is_file():
            raise UsageError(f"--resume: no checkpoint at {src_ckpt}")
        model, vocab = load_model(src_ckpt)
        resumed_from = str(src_ckpt)
    manifest = {"command": "train", "config": cfg.to_dict(), "seed": cfg.seed, "stage": args.stage,
                "corpus": str(args.data), "corpus_fingerprint": corpus_fp,
                "val_fingerprint": fingerprint(args.val_data) if args.val_data else None,
                "checkpoint": str(ckpt), "reports": [str(reports_path)], "resumed_from": resumed_from,
                "status": "running"}
    write_json(out_dir / "manifest.json", manifest)
    with open(reports_path, "w", encoding="utf-8") as fh:
        result = train(items, cfg, val, vocab=vocab, model=model, stage=args.stage, on_epoch=lambda r: _emit(r, fh))
    save_model(ckpt, result.model, result.vocab)
    manifest["status"] = "complete"
    write_json(out_dir / "manifest.json", manifest)
    return EXIT_OK


def cmd_eval(args) -> int:
    items = _corpus(args.data)
    if not Path(args.checkpoint).is_file():
        raise UsageError(f"--checkpoint: no such file {args.checkpoint}")
    model, vocab = load_model(args.checkpoint)
    if args.beam < 1:
        raise UsageError("--beam must be >= 1")
    report = evaluate(model, items, vocab, args.which, args.beam)
    report.update(command="eval", checkpoint=str(args.checkpoint), data=str(args.data))
    _emit(report)
    return EXIT_OK


def cmd_ablate(args) -> int:
    modes, residuals = _csv(args.modes), _csv(args.residuals)
    bad = [m for m in modes if m not in MODES]
    if bad:
        raise UsageError(f"unknown mode {bad[0]!r}; valid: {', '.join(MODES)}")
    bad = [r for r in residuals if r not in RESIDUALS]
    if bad:
        raise UsageError(f"unknown residual {bad[0]!r}; valid: {', '.join(RESIDUALS)}")
    train_items, eval_items = _split(_corpus(args.data), args.eval_data)
    cfg = _config(args).replace(xe_epochs=args.xe_epochs, scst_epochs=args.scst_epochs)
    run_ablation(train_items, eval_items, cfg, modes, residuals, args.beam,
                 on_row=lambda r: _emit({"command": "ablate", **r}))
    return EXIT_OK


def cmd_sweep(args) -> int:
    lam_xe = _floats(args.lambda_xe) if args.lambda_xe else []
    lam_rl = _floats(args.lambda_rl) if args.lambda_rl else []
    if not lam_xe and not lam_rl:
        raise UsageError("give --lambda-xe and/or --lambda-rl")
    if any(v < 0 for v in lam_xe + lam_rl):
        raise UsageError("trade-off coefficients must be >= 0")
    train_items, eval_items = _split(_corpus(args.data), args.eval_data)
    cfg = _config(args).replace(xe_epochs=args.xe_epochs, scst_epochs=args.scst_epochs)
    run_sweep(train_items, eval_items, cfg, lam_xe, lam_rl, args.beam,
              on_row=lambda r: _emit({"command": "sweep", **r}))
    return EXIT_OK


def cmd_dump_attention(args) -> int:
    items = {it.id: it for it in _corpus(args.data)}
    if args.scene_id not in items:
        raise UsageError(f"unknown scene id {args.scene_id!r}")
    if not Path(args.checkpoint).is_file():
        raise UsageError(f"--checkpoint: no such file {args.checkpoint}")
    model, vocab = load_model(args.checkpoint)
    records = attention_trace(model, items[args.scene_id].features, vocab, args.beam)
    out = Path(args.out)
    tmp = out.with_name(out.name + ".tmp")
    try:
        tmp.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records), encoding="utf-8")
        tmp.replace(out)
    except OSError as exc:
        raise UsageError(f"cannot write {out}: {exc}") from exc
    _emit({"command": "dump-attention", "scene_id": args.scene_id, "records": len(records), "out": str(out)})
    return EXIT_OK


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cmadm", description="Two-pass captioning with cross modification attention.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def training_flags(p, with_epochs=False):
        p.add_argument("--config", help="key = value overrides of the preset")
        p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
        p.add_argument("--seed", type=int)
        if with_epochs:
            p.add_argument("--xe-epochs", type=int, default=10)
            p.add_argument("--scst-epochs", type=int, default=0)
            p.add_argument("--eval-data", help="held-out corpus (default: last fifth of --data)")
            p.add_argument("--beam", type=int, default=3)

    p = sub.add_parser("gen-data", help="write a synthetic corpus")
    p.add_argument("--num-scenes", type=int, required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--start", type=int, default=0, help="index of the first scene")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train both models")
    p.add_argument("--data")
    p.add_argument("--val-data")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--stage", choices=("xe", "scst", "both"), default="both")
    p.add_argument("--resume", help="checkpoint (or run directory) to start from")
    training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="beam-search evaluation of a checkpoint")
    p.add_argument("--data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--which", choices=("draft", "refined", "both"), default="both")
    p.add_argument("--beam", type=int, default=3)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="CMA mode / residual ablation")
    p.add_argument("--data")
    p.add_argument("--modes", default=",".join(MODES))
    p.add_argument("--residuals", default=",".join(RESIDUALS))
    training_flags(p, with_epochs=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="trade-off coefficient sweep")
    p.add_argument("--data")
    p.add_argument("--lambda-xe")
    p.add_argument("--lambda-rl")
    training_flags(p, with_epochs=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("dump-attention", help="per-step CMA weights for one scene")
    p.add_argument("--data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene-id", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--beam", type=int, default=3)
    p.set_defaults(func=cmd_dump_attention)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ContractError, FileNotFoundError) as exc:
        print(f"cmadm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"cmadm: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CorruptArtifactError as exc:
        print(f"cmadm: corrupt artifact: {exc}", file=sys.stderr)
        return EXIT_CORRUPT


if __name__ == "__main__":
    sys.exit(main())
