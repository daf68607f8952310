"""``amulet`` command-line interface.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
Errors are written to stderr as one JSON object per line.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import ConfigError, RunConfig, dump_config, load_config, set_key
from .data import FormatError, generate_synthetic, load_dataset, read_map, read_pnm, write_saliency
from .inference import infer, infer_fused_only
from .metrics import evaluate, write_pr_csv, write_report_csv
from .model import VARIANTS, AmuletNet
from .selfcheck import check_network, miniature_config
from .tensor import Tensor, corrupt_backward
from .training import TrainingDiverged, TrainState, init_msra, train

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
RESOLVED_NAME = "config.resolved"


class UsageError(Exception):
    pass


def _error(kind: str, message: str) -> None:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)


def _warn(message: str) -> None:
    print(json.dumps({"warning": message}), file=sys.stderr)


def _resolve(args, overrides: dict[str, object]) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    for key, value in getattr(args, "set", None) or []:
        set_key(cfg, key, value, f"--set {key}")
    for key, value in overrides.items():
        if value is not None:
            set_key(cfg, key, str(value), f"command-line {key}")
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def _echo(cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / RESOLVED_NAME).write_text(dump_config(cfg))


def _subdir(root: Path, name: str) -> Path:
    return root / name if (root / name).is_dir() else root


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg = _resolve(args, {"data.count": args.count, "data.seed": args.seed})
    out = Path(args.out)
    generate_synthetic(cfg.data, out)
    _echo(cfg, out)
    print(f"wrote {cfg.data.count} samples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    overrides = {"train.seed": args.seed, "train.max_iters": args.iters}
    if args.variant is not None:
        overrides["heads.min_stride"] = VARIANTS[args.variant]
    if args.no_bpr:
        overrides["heads.use_bpr"] = "false"
    cfg = _resolve(args, overrides)
    out = Path(args.out)
    dataset = load_dataset(args.data)

    model = AmuletNet(cfg.model)
    state = None
    if args.resume:
        values, momenta, trailer = checkpoint.read(args.resume)
        checkpoint.load_into(model, values, momenta)
        state = TrainState.from_json(trailer["train_state"])
    else:
        init_msra(model.params, model.specs, cfg.train.seed)
    _echo(cfg, out)
    state = train(model, dataset, cfg.train, out_dir=out, state=state)
    summary = {"iterations": state.iteration, "final_loss": state.loss_history[-1] if state.loss_history else None}
    if state.stopped:
        summary["stopped"] = state.stopped
    summary["outputs"] = len(cfg.model.active_levels) + 1
    print(json.dumps(summary))
    return EXIT_OK


def cmd_infer(args) -> int:
    values, _, trailer = checkpoint.read(args.checkpoint)
    cfg = _resolve(args, {"eval.infer_mode": args.mode})
    if not args.config:
        # no config given: the checkpoint's own model description is authoritative
        saved = checkpoint.model_config_from(trailer)
        cfg.backbone, cfg.rfc, cfg.heads = saved.backbone, saved.rfc, saved.heads
    model = AmuletNet(cfg.model)
    checkpoint.load_into(model, values)

    out = Path(args.out)
    _echo(cfg, out)
    paths = sorted(_subdir(Path(args.images), "images").glob("*.ppm"))
    if not paths:
        _warn(f"no .ppm images found in {args.images}")
        return EXIT_OK
    fn = infer_fused_only if cfg.eval.infer_mode == "fused-only" else infer
    for path in paths:
        pixels = read_pnm(path)
        if pixels.shape[0] != 3:
            raise FormatError(f"{path}: expected a P6 colour image at byte 0")
        image = Tensor(pixels[None].astype(np.float32) / 255.0)
        write_saliency(out / f"{path.stem}.pgm", fn(model(image))[0, 0])
    print(f"wrote {len(paths)} saliency maps to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolve(args, {})
    preds = {p.stem: p for p in Path(args.pred).glob("*.pgm")}
    gts = {p.stem: p for p in _subdir(Path(args.gt), "masks").glob("*.pgm")}
    missing = sorted(set(preds) ^ set(gts))
    if missing:
        for sid in missing:
            side = "ground truth" if sid in preds else "prediction"
            _error("unmatched", f"{sid}: no {side} file")
        return EXIT_RUNTIME
    if not preds:
        raise UsageError(f"no .pgm maps found in {args.pred}")
    ids = sorted(preds)
    maps = [read_map(preds[i]) for i in ids]
    masks = [(read_pnm(gts[i])[0] >= 128).astype(np.float64) for i in ids]
    for i, m, g in zip(ids, maps, masks):
        if m.shape != g.shape:
            raise FormatError(f"extent mismatch: {preds[i]} is {m.shape} but {gts[i]} is {g.shape}")
    report = evaluate(maps, masks, ids, (cfg.eval.empty_precision, cfg.eval.empty_recall))
    out = Path(args.out)
    _echo(cfg, out)
    write_report_csv(out / "report.csv", report)
    write_pr_csv(out / "pr_curve.csv", report.pr_precision, report.pr_recall)
    print(json.dumps({"images": len(ids), "fbeta": report.fbeta, "mae": report.mae}))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _resolve(args, {})
    print(dump_config(cfg), end="")
    model_cfg = miniature_config(use_bpr=cfg.heads.use_bpr)
    if args.corrupt_backward:
        with corrupt_backward(args.corrupt_backward):
            results = check_network(model_cfg, args.seed, args.per_param, args.epsilon, args.tolerance)
    else:
        results = check_network(model_cfg, args.seed, args.per_param, args.epsilon, args.tolerance)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.group:<14} worst_rel_error={r.worst:.3e} checked={r.checked} excluded={r.excluded} {status}")
    failed = [r.group for r in results if not r.passed]
    if failed:
        _error("gradcheck", f"groups exceeding tolerance {args.tolerance}: {', '.join(failed)}")
        return EXIT_RUNTIME
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _key_value(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected section.key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="amulet", description="AmuletNet saliency detection on a numpy autodiff engine.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="run config file (section.key = value lines)")
        p.add_argument("--set", action="append", type=_key_value, metavar="KEY=VALUE", help="override one config key")

    p = sub.add_parser("synth", help="generate a synthetic shape dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    common(p)
    p.add_argument("--data", required=True, help="dataset root containing manifest.csv")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--variant", choices=sorted(VARIANTS), help="restrict active levels to strides >= n")
    p.add_argument("--no-bpr", action="store_true", help="bypass boundary-preserved refinement")
    p.add_argument("--iters", type=int, help="override train.max_iters")
    p.add_argument("--seed", type=int, help="override train.seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="write saliency maps for a directory of PPM images")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["full", "fused-only"])
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score saliency maps against ground-truth masks")
    common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of a miniature network")
    common(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--per-param", type=int, default=8, help="coordinates sampled per parameter")
    p.add_argument("--epsilon", type=float, default=1e-3)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--corrupt-backward", metavar="OP", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        _error("usage", str(exc))
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        _error("config" if isinstance(exc, ConfigError) else "usage", str(exc))
        return EXIT_USAGE
    except checkpoint.CheckpointError as exc:
        _error("checkpoint", str(exc))
        return EXIT_RUNTIME
    except TrainingDiverged as exc:
        _error("diverged", str(exc))
        return EXIT_RUNTIME
    except FormatError as exc:
        _error("format", str(exc))
        return EXIT_RUNTIME
    except (OSError, ValueError) as exc:
        _error("runtime", str(exc))
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
