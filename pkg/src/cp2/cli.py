"""Command-line entry points.

Every command takes an experiment config (YAML) plus ``--set section.key=value``
overrides and works inside one run directory::

    run_dir/
      config.echo       fully resolved config
      metrics.csv       per-step pretraining metrics
      checkpoints/      *.pt
      report.json       IoU report (finetune / eval)
      *.png             plots
      previews/         composed-pair grids

Exit codes: 0 success, 1 runtime failure, 2 config error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import yaml

from . import plots
from .compose import make_pair
from .config import ConfigError, ExperimentConfig, dump_config, load_config
from .errors import CP2Error, InvalidConfig, InvalidState
from .evalseg import (CLASS_NAMES, evaluate, finetune, gen_shapes_dataset, load_dataset)
from .masks import FAMILIES
from .model import load_checkpoint, model_from_checkpoint
from . import trainer

log = logging.getLogger("cp2")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
ABLATION_MODES = ("full", "instance_only", "dense_only", "no_copy_paste")
REPORT_FIELDS = ("run", "phase", "mode", "seed", "steps", "loss_first10", "loss_last10", "miou")


# -- helpers -------------------------------------------------------------------

@contextmanager
def run_lock(run_dir: Path):
    """Exclusive ownership of a run directory for the life of one command."""
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise InvalidState(f"run directory {run_dir} is locked by another command ({lock})") from None
    with os.fdopen(fd, "w") as fh:
        fh.write(str(os.getpid()))
    try:
        yield run_dir
    finally:
        lock.unlink(missing_ok=True)


def labeled_splits(cfg: ExperimentConfig):
    """(train, val) segmentation sets: read from data.labeled_dir or generated from the seed."""
    d = cfg.data
    if d.labeled_dir:
        root = Path(d.labeled_dir)
        return load_dataset(root / "train"), load_dataset(root / "val")
    train = gen_shapes_dataset(np.random.default_rng([cfg.master_seed, 202]), d.train_size,
                               d.image_size, d.num_classes)
    val = gen_shapes_dataset(np.random.default_rng([cfg.master_seed, 303]), d.val_size,
                             d.image_size, d.num_classes)
    return train, val


def finetune_and_eval(cfg: ExperimentConfig, init, run_dir: Optional[Path], splits=None):
    train, val = splits or labeled_splits(cfg)
    model, _ = finetune(init, train, cfg.evalseg, cfg.model, seed=cfg.master_seed, run_dir=run_dir,
                        config_echo=cfg.to_dict())
    metrics = None
    if run_dir is not None:
        metrics = run_dir / "finetune_metrics.csv"
        if (run_dir / "metrics.csv").exists():
            plots.plot_training_curves(run_dir / "metrics.csv", run_dir / "pretrain_curves.png")
    return evaluate(model, val, out_dir=run_dir, metrics_csv=metrics)


def _resolve_run_dir(cfg: ExperimentConfig, override: Optional[str]) -> Path:
    return Path(override or cfg.run_dir)


def _write_echo(run_dir: Path, cfg: ExperimentConfig):
    (run_dir / "config.echo").write_text(dump_config(cfg))


# -- commands ------------------------------------------------------------------

def cmd_pretrain(cfg: ExperimentConfig, run_dir: Path, args) -> int:
    with run_lock(run_dir):
        path = trainer.pretrain(cfg, run_dir=run_dir)
    print(path)
    return EXIT_OK


def cmd_quicktune(cfg: ExperimentConfig, run_dir: Path, args) -> int:
    init = args.init or cfg.quicktune.init_checkpoint
    if not init:
        raise InvalidConfig("quicktune needs --init or quicktune.init_checkpoint")
    with run_lock(run_dir):
        path = trainer.quick_tune(cfg, init_checkpoint=init, run_dir=run_dir)
    print(path)
    return EXIT_OK


def cmd_finetune(cfg: ExperimentConfig, run_dir: Path, args) -> int:
    with run_lock(run_dir):
        (run_dir / "checkpoints").mkdir(exist_ok=True)
        _write_echo(run_dir, cfg)
        report = finetune_and_eval(cfg, args.init, run_dir)
    print(f"miou {report.miou:.4f}")
    return EXIT_OK


def cmd_eval(cfg: ExperimentConfig, run_dir: Path, args) -> int:
    payload = load_checkpoint(args.model)
    model = model_from_checkpoint(payload)
    if model.classifier is None:
        raise InvalidConfig(f"{args.model} is a {payload['phase']} checkpoint without a classifier; "
                            "finetune it first")
    _, val = labeled_splits(cfg)
    with run_lock(run_dir):
        _write_echo(run_dir, cfg)
        report = evaluate(model, val, out_dir=run_dir)
    print(f"miou {report.miou:.4f}")
    return EXIT_OK


def cmd_preview_compose(cfg: ExperimentConfig, run_dir: Path, args) -> int:
    out = Path(args.out) if args.out else run_dir / "previews"
    families = list(FAMILIES[:4]) if args.family == "all" else [args.family or cfg.masks.family]
    corpus = trainer.load_corpus(cfg)
    if len(corpus) < 3:
        raise InvalidConfig("preview needs at least 3 corpus images")
    written = []
    for fam in families:
        mcfg = cfg.masks.__class__(**{**cfg.masks.__dict__, "family": fam})
        mcfg.validate()
        for i in range(args.n):
            rng = np.random.default_rng([cfg.master_seed, 404, FAMILIES.index(fam), i])
            idx = rng.choice(len(corpus), 3, replace=False)
            pair = make_pair(*(corpus[j] for j in idx), cfg.augment, mcfg, rng, cfg.model.stride,
                             ids=tuple(str(j) for j in idx))
            written.append(plots.plot_compose_grid([pair], out / f"{fam}_{i:03d}.png", title=fam))
    for p in written:
        print(p)
    return EXIT_OK


def _mean(xs):
    return float(np.mean(xs)) if len(xs) else float("nan")


def summarize_run(run_dir) -> dict:
    """One comparison row from whatever a run directory holds."""
    run_dir = Path(run_dir)
    row = {k: "" for k in REPORT_FIELDS}
    row["run"] = run_dir.name
    echo = run_dir / "config.echo"
    if echo.exists():
        cfg = yaml.safe_load(echo.read_text()) or {}
        row["mode"] = cfg.get("losses", {}).get("mode", "")
        row["seed"] = cfg.get("master_seed", "")
    ck = run_dir / "checkpoints" / "final.pt"
    if ck.exists():
        row["phase"] = load_checkpoint(ck)["phase"]
    elif (run_dir / "checkpoints" / "finetune.pt").exists():
        row["phase"] = "finetune"
    metrics = run_dir / "metrics.csv"
    if metrics.exists():
        m = plots.read_metrics(metrics)
        if m:
            row["steps"] = int(m["step"][-1])
            row["loss_first10"] = round(_mean(m["total"][:10]), 5)
            row["loss_last10"] = round(_mean(m["total"][-10:]), 5)
    rep = run_dir / "report.json"
    if rep.exists():
        row["miou"] = round(json.loads(rep.read_text())["miou"], 5)
    return row


def write_report(rows: List[dict], out_dir: Path) -> str:
    out_dir.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_FIELDS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    text = buf.getvalue()
    (out_dir / "report.csv").write_text(text)
    metric = "miou" if any(r["miou"] != "" for r in rows) else "loss_last10"
    plots.plot_report_comparison(rows, out_dir / "report.png", metric)
    return text


def cmd_report(run_dirs: Sequence[str], out: Optional[str]) -> int:
    rows = []
    for d in run_dirs:
        if not Path(d).is_dir():
            raise InvalidConfig(f"not a run directory: {d}")
        rows.append(summarize_run(d))
    out_dir = Path(out) if out else Path(run_dirs[0]).parent / "report"
    sys.stdout.write(write_report(rows, out_dir))
    return EXIT_OK


def cmd_ablate(cfg: ExperimentConfig, run_dir: Path, args) -> int:
    """Pretrain, finetune and evaluate each loss mode, then tabulate."""
    modes = args.modes.split(",") if args.modes else list(ABLATION_MODES)
    splits = labeled_splits(cfg)
    dirs = []
    for mode in modes:
        mcfg = cfg.replace(losses=cfg.losses.__class__(**{**cfg.losses.__dict__, "mode": mode}))
        mcfg.validate()
        d = run_dir / mode
        with run_lock(d):
            ck = trainer.pretrain(mcfg, run_dir=d)
            finetune_and_eval(mcfg, ck, d, splits)
        dirs.append(str(d))
    return cmd_report(dirs, str(run_dir / "report"))


COMMANDS = {
    "pretrain": cmd_pretrain,
    "quicktune": cmd_quicktune,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "preview-compose": cmd_preview_compose,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cp2", description="copy-paste contrastive pretraining toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("config", help="experiment config (YAML)")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. --set trainer.lr=0.1")
        sp.add_argument("--run-dir", help="defaults to the config's run_dir")
        return sp

    with_config("pretrain", "contrastive pretraining from scratch")
    sp = with_config("quicktune", "contrastive tuning on top of a pretrained backbone")
    sp.add_argument("--init", help="checkpoint whose backbone is loaded")
    sp = with_config("finetune", "supervised finetuning + evaluation")
    sp.add_argument("--init", required=True, help="checkpoint path or 'random'")
    sp = with_config("eval", "evaluate a finetuned checkpoint")
    sp.add_argument("--model", required=True)
    sp = with_config("preview-compose", "render composed pairs with mask overlays")
    sp.add_argument("--out", help="defaults to <run_dir>/previews")
    sp.add_argument("--n", type=int, default=4)
    sp.add_argument("--family", help="mask family or 'all'; defaults to masks.family")
    sp = with_config("ablate", "run the loss-mode grid and tabulate it")
    sp.add_argument("--modes", help=f"comma-separated subset of {','.join(ABLATION_MODES)}")

    sp = sub.add_parser("report", help="comparison table over run directories")
    sp.add_argument("run_dirs", nargs="+")
    sp.add_argument("--out", help="directory for report.csv/report.png")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            return cmd_report(args.run_dirs, args.out)
        cfg = load_config(args.config, args.overrides)
        run_dir = _resolve_run_dir(cfg, args.run_dir)
        return COMMANDS[args.command](cfg, run_dir, args)
    except (ConfigError, InvalidConfig) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CP2Error, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
