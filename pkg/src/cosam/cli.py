"""``cosam`` command line: gen-data, train, eval, gradcheck, profile, export-masks.

Exit codes: 0 success, 1 usage error, 2 validation failure, 3 runtime failure.
Outputs go to ``--out`` or, by default, ``$COSAM_OUTPUT_ROOT/<command>-<config hash>``
(``runs/`` when the variable is unset).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys

import numpy as np

from . import __version__, checkpoint, engine, export, profiler
from .audit import SEEDS, TOLERANCE, CHECKS, run_audit
from .config import ConfigError, RunConfig, from_dict, parse_config, parse_overrides
from .synthdata import eval_stack, make_dataset, save_dataset
from . import tensor as T

log = logging.getLogger("cosam")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2, 3
OUTPUT_ROOT_ENV = "COSAM_OUTPUT_ROOT"
PAPER_GEOMETRY = (4, 2048, 16, 8)


class UsageError(Exception):
    pass


class ValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- helpers -----------------------------------------------------------------


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override, e.g. cosam.K=2")
    p.add_argument("--seed", type=int, help="shortcut for seed=... (also seeds the data)")
    p.add_argument("--out", help="output directory")


def _train_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--steps", type=int, help="optim.steps")
    p.add_argument("--lr", type=float, help="optim.lr")
    p.add_argument("--margin", type=float, help="loss.margin")
    p.add_argument("--data", help="dataset directory written by gen-data (data.path)")


def load_config(args) -> RunConfig:
    overrides = parse_overrides(args.set)
    if args.seed is not None:
        overrides += [("seed", args.seed), ("data.seed", args.seed)]
    for flag, key in (("steps", "optim.steps"), ("lr", "optim.lr"), ("margin", "loss.margin"), ("data", "data.path")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append((key, value))
    return parse_config(args.config, overrides)


def output_dir(args, command: str, cfg: RunConfig | None = None) -> str:
    if args.out:
        out = args.out
    elif cfg is not None and cfg.out_dir:
        out = cfg.out_dir
    else:
        root = os.environ.get(OUTPUT_ROOT_ENV, "runs")
        out = os.path.join(root, f"{command}-{cfg.hash()}" if cfg is not None else command)
    os.makedirs(out, exist_ok=True)
    return out


def versions() -> dict:
    return {"cosam": __version__, "numpy": np.__version__, "python": platform.python_version()}


def write_run_record(out: str, command: str, cfg: RunConfig | None, extra: dict | None = None) -> str:
    rec = {"command": command, "versions": versions()}
    if cfg is not None:
        rec.update(config=cfg.run_dict(), config_hash=cfg.hash(), seed=cfg.seed)
    rec.update(extra or {})
    path = os.path.join(out, "run.json")
    with open(path, "w") as fh:
        json.dump(rec, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_metrics(out: str, stem: str, cfg: RunConfig, metrics: dict) -> None:
    """``{stem}.json`` ({run_id, config_hash, metrics}) and ``{stem}.txt`` (key=value lines)."""
    metrics = {k: float(v) for k, v in metrics.items()}
    report = {"run_id": f"{stem}-{cfg.hash()}", "config_hash": cfg.hash(), "metrics": metrics}
    with open(os.path.join(out, stem + ".json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out, stem + ".txt"), "w") as fh:
        fh.write("".join(f"{k}={_fmt(v)}\n" for k, v in sorted(metrics.items())))


def load_model(path: str):
    """Rebuild a model from a checkpoint written by ``train``; returns (model, cfg)."""
    if not os.path.isfile(path):
        raise ValidationError(f"checkpoint {path} does not exist")
    state, meta = checkpoint.load(path)
    if "config" not in meta or "num_train_ids" not in meta:
        raise ValidationError(f"checkpoint {path} carries no run configuration")
    cfg = from_dict(meta["config"])
    model = engine.build_model(cfg, int(meta["num_train_ids"]))
    model.load_state_dict(state)
    return model, cfg


# -- commands ----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = load_config(args)
    d = cfg.data
    out = output_dir(args, "gen-data", cfg)
    ds = make_dataset(d.num_ids, d.snippets_per_id, d.video_len, d.height, d.width, d.seed)
    save_dataset(ds, out)
    write_run_record(out, "gen-data", cfg)
    counts = {k: len(v) for k, v in ds.splits().items()}
    print(f"dataset={out} " + " ".join(f"{k}={v}" for k, v in counts.items()))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args)
    out = output_dir(args, "train", cfg)
    ds = engine.get_dataset(cfg)
    write_run_record(out, "train", cfg)
    log_path = os.path.join(out, "loss.log")
    with open(log_path, "a") as fh:

        def log_fn(rec):
            fh.write(" ".join(f"{k}={_fmt(v)}" for k, v in rec.items()) + "\n")
            if rec["step"] % 100 == 0:
                log.info("step %d total %.4f", rec["step"], rec["total"])

        result = engine.train(cfg, ds, log_fn)
    meta = {"config": cfg.run_dict(), "config_hash": cfg.hash(), "num_train_ids": len(ds.train_ids)}
    checkpoint.save(os.path.join(out, "model.ckpt"), result.model.state_dict(), meta)
    metrics = engine.evaluate(result.model, ds, cfg.data.N)
    write_metrics(out, "metrics", cfg, metrics)
    for k, v in metrics.items():
        print(f"{k}={_fmt(v)}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.checkpoint:
        model, cfg = load_model(args.checkpoint)
    else:
        cfg = load_config(args)
        model = None
    if args.checkpoint and not args.out:
        args.out = os.path.join(os.path.dirname(args.checkpoint) or ".", "eval")
    out = output_dir(args, "eval", cfg)
    ds = engine.get_dataset(cfg)
    if model is None:
        # untrained model: random initialisation from the config seed
        model = engine.build_model(cfg, len(ds.train_ids))
    metrics = engine.evaluate(model, ds, cfg.data.N)
    write_metrics(out, "metrics", cfg, metrics)
    write_run_record(out, "eval", cfg, {"checkpoint": args.checkpoint})
    for k, v in metrics.items():
        print(f"{k}={_fmt(v)}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    names = args.only.split(",") if args.only else None
    unknown = [n for n in names or [] if n not in CHECKS]
    if unknown:
        raise ValidationError(f"unknown checks {unknown}; available: {', '.join(CHECKS)}")
    seeds = tuple(range(args.seeds)) if args.seeds else SEEDS

    def report(r):
        if isinstance(r, str):
            print(r)
        else:
            print(f"{'PASS' if r.passed else 'FAIL'} {r.name} seed={r.seed} rel_err={r.error:.3e}")

    results = run_audit(names, seeds, args.tol, report)
    failed = [r for r in results if not r.passed]
    print(f"checks={len(results)} failed={len(failed)} tolerance={args.tol}")
    if args.out:
        out = output_dir(args, "gradcheck")
        with open(os.path.join(out, "gradcheck.txt"), "w") as fh:
            fh.write("".join(f"{r.name}.seed{r.seed}={r.error!r}\n" for r in results))
        write_run_record(out, "gradcheck", None, {"tolerance": args.tol, "seeds": list(seeds)})
    if failed:
        print(f"gradient audit failed: {', '.join(sorted({r.name for r in failed}))}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


def _geometry(text: str) -> tuple:
    try:
        g = tuple(int(v) for v in text.replace("x", ",").split(","))
    except ValueError:
        raise ValidationError(f"geometry {text!r} is not N,D,H,W") from None
    if len(g) != 4 or min(g) < 1:
        raise ValidationError(f"geometry {text!r} is not N,D,H,W")
    return g


def cmd_profile(args) -> int:
    geoms = [_geometry(g) for g in args.geometry] or [PAPER_GEOMETRY]
    comp = profiler.compare(geoms, D_R=args.D_R, K=args.K)
    text = profiler.format_kv(comp) if args.format == "kv" else profiler.format_table(comp)
    print(text)
    if args.out:
        out = output_dir(args, "profile")
        with open(os.path.join(out, "profile.txt"), "w") as fh:
            fh.write(profiler.format_kv(comp) + "\n")
        write_run_record(out, "profile", None, {"geometries": [list(g) for g in geoms], "D_R": args.D_R, "K": args.K})
    return EXIT_OK


def _parse_ids(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ValidationError(f"--snippets expects comma-separated indices, got {text!r}") from None


def cmd_export_masks(args) -> int:
    if args.checkpoint:
        model, cfg = load_model(args.checkpoint)
    else:
        cfg = load_config(args)
        model = None
    ds = engine.get_dataset(cfg)
    if model is None:
        model = engine.build_model(cfg, len(ds.train_ids))
    split = ds.splits()[args.split]
    ids = _parse_ids(args.snippets)
    bad = [i for i in ids if not 0 <= i < len(split)]
    if bad:
        raise ValidationError(f"snippet indices {bad} outside {args.split} split of {len(split)}")
    out = output_dir(args, "export-masks", cfg)
    frames, _, _ = eval_stack([split[i] for i in ids], cfg.data.N)
    model.eval()
    written = []
    backbone = model.backbone
    for row, idx in enumerate(ids):
        with T.no_grad():
            backbone(frames[row : row + 1])
        for layer, mask in backbone.last_masks.items():
            written += export.export_masks(mask.data[0], out, f"{args.split}{idx:04d}_cosam{layer}")
        for layer, name in backbone.srim_names.items():
            assoc = getattr(backbone, name).last_association
            if assoc is not None:
                written += export.export_associations(assoc.data, out, f"{args.split}{idx:04d}_srim{layer}")
    if not written:
        raise ValidationError("the configured model has neither COSAM nor SRIM layers to export")
    write_run_record(out, "export-masks", cfg, {"checkpoint": args.checkpoint, "split": args.split, "snippets": ids})
    print(f"wrote {len(written)} files to {out}")
    return EXIT_OK


# -- entry point -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cosam", description="Co-segmentation attention toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic video re-id dataset")
    _config_args(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the toy re-id model; writes model.ckpt, loss.log, metrics")
    _config_args(p)
    _train_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="CMC, mAP and attention coverage of a checkpoint (or an untrained model)")
    _config_args(p)
    _train_args(p)
    p.add_argument("--checkpoint", help="model.ckpt written by train")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--only", help="comma-separated check names")
    p.add_argument("--seeds", type=int, help=f"number of seeds (default {len(SEEDS)})")
    p.add_argument("--tol", type=float, default=TOLERANCE)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("profile", help="parameter / FLOP comparison of COSAM and non-local blocks")
    p.add_argument("--geometry", action="append", default=[], metavar="N,D,H,W")
    p.add_argument("--D_R", type=int, default=256)
    p.add_argument("--K", type=int, default=3)
    p.add_argument("--format", choices=("table", "kv"), default="table")
    p.add_argument("--out")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("export-masks", help="write COSAM masks / SRIM association maps as PGM and CTF1")
    _config_args(p)
    _train_args(p)
    p.add_argument("--checkpoint")
    p.add_argument("--split", choices=("train", "query", "gallery"), default="query")
    p.add_argument("--snippets", default="0", help="comma-separated snippet indices within the split")
    p.set_defaults(func=cmd_export_masks)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("cosam: a command is required (gen-data, train, eval, gradcheck, profile, export-masks)")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - report anything else as a runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
