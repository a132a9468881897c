"""Command-line entry point: ``clft <command> --config ... --out ...``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import experiment as ex

log = logging.getLogger("clft")


def _with_seed(cfg: ex.ExperimentConfig, seed: int | None) -> ex.ExperimentConfig:
    if seed is not None:
        cfg.seeds = [seed]
    return cfg


def cmd_gen_data(args) -> int:
    cfg = ex.load_config(args.config)
    if not cfg.data.generate:
        raise ex.ConfigError("data.generate: is false, nothing to generate")
    corpora = ex.generate_data(cfg, ex.Workspace(args.out), overwrite=args.overwrite)
    for name, c in corpora.items():
        print(f"{name}\t{len(c)} utterances\t{c.checksum()[:16]}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = ex.load_config(args.config)
    ws = ex.Workspace(args.out)
    if (ws.pretrain / "theta_star.ckpt").exists() and not args.overwrite:
        raise FileExistsError(f"{ws.pretrain / 'theta_star.ckpt'} exists (use --overwrite)")
    if args.seed is not None:
        cfg.pretrain.seed = args.seed
    corpora = ex.load_data(cfg, ws, ("pretrain", "pretrain_valid"))
    ex.run_pretrain(cfg, ws, corpora)
    print(ws.pretrain / "theta_star.ckpt")
    return 0


def cmd_finetune(args) -> int:
    cfg = _with_seed(ex.load_config(args.config), args.seed)
    ws = ex.Workspace(args.out)
    corpora = ex.load_data(cfg, ws)
    theta, teacher = ex.load_pretrained(cfg, ws)
    ids = ex.run_finetune(cfg, ws, corpora, theta, teacher, labels=args.strategy or None)
    for rid in ids:
        print(ws.run_dir(rid))
    return 0


def cmd_probe(args) -> int:
    cfg = ex.load_config(args.config)
    ws = ex.Workspace(args.out)
    corpora = ex.load_data(cfg, ws, cfg.probe_sets)
    _, teacher = ex.load_pretrained(cfg, ws)
    if not ws.runs.is_dir():
        raise FileNotFoundError(f"no runs under {ws.runs} (run finetune first)")
    ids = ex.run_probe(cfg, ws, corpora, teacher, args.run or None)
    ex.collect(ws, ids)
    print(ws.root / "probe.csv")
    return 0


def cmd_run(args) -> int:
    cfg = _with_seed(ex.load_config(args.config), args.seed)
    root = ex.run_experiment(cfg, args.out, overwrite=args.overwrite)
    print(root / "report" / "table.csv")
    return 0


def cmd_sweep(args) -> int:
    spec = ex.load_sweep(args.config)
    _with_seed(spec.base, args.seed)
    root = ex.sweep(spec, args.out, overwrite=args.overwrite)
    print(root / "sweep.csv")
    return 0


def cmd_report(args) -> int:
    table = ex.report(args.runs, args.out)
    print(table.read_text(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="clft", description="Continual-learning fine-tuning lab for a tiny SSL encoder.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", required=True, type=Path, help="experiment config (JSON)")
        sp.add_argument("--out", required=True, type=Path, help="experiment directory")
        sp.add_argument("--overwrite", action="store_true", help="replace existing outputs")
        if seed:
            sp.add_argument("--seed", type=int, default=None, help="run a single seed instead of the config list")

    sp = sub.add_parser("gen-data", help="generate and save the synthetic corpora")
    common(sp, seed=False)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("pretrain", help="masked-latent pretraining of theta*")
    common(sp)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("finetune", help="CTC fine-tuning for each configured strategy and seed")
    common(sp)
    sp.add_argument("--strategy", action="append", help="only runs with this label (repeatable)")
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("probe", help="SSL-loss probe over every checkpoint of every run")
    common(sp, seed=False)
    sp.add_argument("--run", action="append", help="only this run id (repeatable)")
    sp.set_defaults(func=cmd_probe)

    sp = sub.add_parser("run", help="full pipeline: data, pretrain, fine-tune, probe, report")
    common(sp)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("sweep", help="sweep r, lambda or p_R (config is a sweep spec)")
    common(sp)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("report", help="CER/WER table and probe overlay from finished runs")
    sp.add_argument("runs", nargs="+", type=Path, help="experiment or run directories")
    sp.add_argument("--out", required=True, type=Path)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except ex.ConfigError as exc:
        print(f"clft: invalid config: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, FileExistsError, ValueError) as exc:
        print(f"clft: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
