"""Config-driven experiment runner.

Subcommands: ``train``, ``attack``, ``blackbox``, ``spectra``,
``verify``.  Exit codes: 0 on success, 1 when verification fails, 2 on
usage or I/O problems.  ``RDLT_OUT`` sets the default output root;
``--out`` overrides it.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import attacks as attacks_mod
from . import diagnostics, engine, persist, plots, verify
from .config import ConfigError, ExperimentConfig, build_network, load_config
from .data import Dataset, load_idx, normalization_stats, normalize, synth_spirals
from .layers import Batch
from .persist import CheckpointError
from .regularizer import DivergenceError

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_USAGE = 2

DEFAULT_OUT_ENV = "RDLT_OUT"


class CliError(Exception):
    """Fatal usage or I/O problem; message goes to stderr, exit code 2."""


def _output_dir(args, cfg: ExperimentConfig | None) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        root = Path(os.environ.get(DEFAULT_OUT_ENV, "runs"))
        sub = cfg.output_dir if cfg is not None and cfg.output_dir else "."
        out = root / sub
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_config(path) -> ExperimentConfig:
    try:
        return load_config(path)
    except FileNotFoundError as err:
        raise CliError(f"config not found: {err.filename}") from err
    except ConfigError as err:
        raise CliError(f"invalid config: {err}") from err


def _build_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    ds = cfg.dataset
    if ds.kind == "spirals":
        train = synth_spirals(ds.classes, ds.per_class, ds.noise, seed=ds.seed)
        val = synth_spirals(
            ds.classes, ds.val_per_class or ds.per_class, ds.noise, seed=ds.seed + 1, split="validation"
        )
    else:
        try:
            train = load_idx(ds.images, ds.labels)
            if ds.val_images and ds.val_labels:
                val = load_idx(ds.val_images, ds.val_labels)
                val.split = "validation"
            else:
                val = train
        except (OSError, ValueError) as err:
            raise CliError(f"failed to load dataset: {err}") from err
    if ds.normalize:
        mean, std = normalization_stats(train)
        train = normalize(train, mean, std)
        val = normalize(val, mean, std)  # validation uses training stats
    return train, val


def _checkpoint(path):
    try:
        return persist.load_checkpoint(path)
    except FileNotFoundError as err:
        raise CliError(f"checkpoint not found: {err.filename}") from err
    except CheckpointError as err:
        raise CliError(str(err)) from err


def _seed_list(cfg: ExperimentConfig, args) -> list[int]:
    return [args.seed] if args.seed is not None else cfg.seeds


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    out = _output_dir(args, cfg)
    train_set, _ = _build_datasets(cfg)
    seeds = _seed_list(cfg, args)
    metric_groups = []
    for seed in seeds:
        suffix = "" if len(seeds) == 1 else f"_seed{seed}"
        engine_cfg = engine.EngineConfig(**{**cfg.engine.__dict__, "seed": seed}).validate()
        network = build_network(cfg.model, seed)
        adv_spec = None
        if cfg.adversarial_training is not None:
            specs = cfg.adversarial_training.specs(data_std=train_set.std)
            adv_spec = specs[0]
        try:
            result = engine.train(
                network,
                train_set,
                engine_cfg,
                cfg.epochs,
                batch_size=cfg.dataset.batch_size,
                attack_spec=adv_spec,
                attack_seed=seed,
            )
        except DivergenceError as err:
            print(f"error: {err}", file=sys.stderr)
            return EXIT_USAGE
        rows = [m.as_row() for m in result.metrics]
        metrics_path = out / f"metrics{suffix}.csv"
        metrics_path.unlink(missing_ok=True)
        if rows:
            persist.write_metrics(rows, metrics_path)
        else:
            persist.write_metrics_header(
                ["epoch", "loss", "accuracy", "total_rank", "max_kappa", "max_reg_value"], metrics_path
            )
        persist.save_checkpoint(network, engine_cfg, out / f"checkpoint{suffix}.rdlt", seed=seed)
        diagnostics.write_spectral_csv(diagnostics.spectral_report(network), out / f"spectra{suffix}.csv")
        metric_groups.append(rows)
        print(f"seed {seed}: wrote metrics, checkpoint, spectra under {out}")
    if len(seeds) > 1:
        summary = persist.median_summary(metric_groups)
        summary_path = out / "summary_median.csv"
        summary_path.unlink(missing_ok=True)
        if summary:
            persist.write_metrics(summary, summary_path)
        print(f"median summary over {len(seeds)} seeds: {summary_path}")
    return EXIT_OK


def _attack_table(cfg: ExperimentConfig, evaluate) -> list[str]:
    """Rows per attack kind, columns per perturbation budget."""
    if not cfg.attacks:
        raise CliError("config defines no attacks")
    grids = [attack.epsilons for attack in cfg.attacks]
    columns = sorted({eps for grid in grids for eps in grid})
    lines = ["attack," + ",".join(f"eps_{eps:g}" for eps in columns)]
    for attack_cfg in cfg.attacks:
        cells = []
        by_eps = dict(zip(attack_cfg.epsilons, evaluate(attack_cfg)))
        for eps in columns:
            cells.append(diagnostics.format_value(by_eps[eps]) if eps in by_eps else "")
        lines.append(attack_cfg.kind + "," + ",".join(cells))
    return lines


def cmd_attack(args) -> int:
    cfg = _load_config(args.config)
    out = _output_dir(args, cfg)
    network, _, _ = _checkpoint(args.checkpoint)
    _, val_set = _build_datasets(cfg)
    seed = args.seed if args.seed is not None else cfg.seeds[0]

    def evaluate(attack_cfg):
        specs = attack_cfg.specs(data_std=val_set.std if val_set.std is not None else np.ones(1))
        return [
            attacks_mod.evaluate_under_attack(
                network, val_set, spec, seed=seed, batch_size=cfg.dataset.batch_size
            )
            for spec in specs
        ]

    try:
        lines = _attack_table(cfg, evaluate)
    except ValueError as err:
        raise CliError(str(err)) from err
    path = out / "adversarial.csv"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_blackbox(args) -> int:
    cfg = _load_config(args.config)
    out = _output_dir(args, cfg)
    source, _, _ = _checkpoint(args.checkpoint)
    target, _, _ = _checkpoint(args.target)
    _, val_set = _build_datasets(cfg)
    seed = args.seed if args.seed is not None else cfg.seeds[0]

    def evaluate(attack_cfg):
        specs = attack_cfg.specs(data_std=val_set.std if val_set.std is not None else np.ones(1))
        return [
            attacks_mod.blackbox_transfer(
                source, target, val_set, spec, seed=seed, batch_size=cfg.dataset.batch_size
            )
            for spec in specs
        ]

    try:
        lines = _attack_table(cfg, evaluate)
    except ValueError as err:
        raise CliError(str(err)) from err
    path = out / "blackbox.csv"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_spectra(args) -> int:
    network, _, _ = _checkpoint(args.checkpoint)
    out = _output_dir(args, None)
    report = diagnostics.spectral_report(network)
    diagnostics.write_spectral_csv(report, out / "spectra.csv")
    diagnostics.write_spectral_json(report, out / "spectra.json")
    if args.layer is not None:
        if not 0 <= args.layer < len(report.rows):
            raise CliError(
                f"layer {args.layer} out of range; valid layers are 0..{len(report.rows) - 1}"
            )
        selected = [report.rows[args.layer]]
    else:
        selected = report.rows
    for row in selected:
        plots.render_spectrum_svg(row.singular_values, row.layer, out / f"spectrum_layer{row.layer}.svg")
    print(f"wrote spectra.csv, spectra.json, and {len(selected)} figure(s) under {out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    ok = verify.run_verify()
    return EXIT_OK if ok else EXIT_VERIFY_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rdlt",
        description="Rank-adaptive low-rank training with spectral conditioning",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train per the experiment config")
    train.add_argument("--config", required=True)
    train.add_argument("--out", default=None)
    train.add_argument("--seed", type=int, default=None)
    train.set_defaults(fn=cmd_train)

    attack = sub.add_parser("attack", help="adversarial accuracy table for a checkpoint")
    attack.add_argument("--config", required=True)
    attack.add_argument("--checkpoint", required=True)
    attack.add_argument("--out", default=None)
    attack.add_argument("--seed", type=int, default=None)
    attack.set_defaults(fn=cmd_attack)

    blackbox = sub.add_parser("blackbox", help="transfer attack from a source to a target checkpoint")
    blackbox.add_argument("--config", required=True)
    blackbox.add_argument("--checkpoint", required=True, help="source checkpoint (attack generation)")
    blackbox.add_argument("--target", required=True, help="target checkpoint (evaluation)")
    blackbox.add_argument("--out", default=None)
    blackbox.add_argument("--seed", type=int, default=None)
    blackbox.set_defaults(fn=cmd_blackbox)

    spectra = sub.add_parser("spectra", help="spectral report and figures for a checkpoint")
    spectra.add_argument("--checkpoint", required=True)
    spectra.add_argument("--layer", type=int, default=None)
    spectra.add_argument("--out", default=None)
    spectra.set_defaults(fn=cmd_spectra)

    verify_cmd = sub.add_parser("verify", help="run the numerical property suite")
    verify_cmd.set_defaults(fn=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return EXIT_USAGE if err.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
