"""Command-line orchestration: gen-data, train, sweep-alpha, export-figures, verify.

Every command validates its config up front, writes the resolved config
next to its outputs, and keeps wall-clock noise (timestamps) out of data
files so reruns are byte-identical. Exit codes: 0 ok, 2 config error,
3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import datagen, trainer
from .config import ALPHA_SWEEP_TARGETS, RunConfig, load_config, write_resolved_config
from .errors import ConfigError, DataError, InputError, NumericError
from .objectives import WRPO_KINDS
from .policy import derive_seed, load_checkpoint, parameter_hash, save_checkpoint, stream_salt
from .schedule import FusionSchedule
from .trainer import EvalSettings, n_optimizer_steps

log = logging.getLogger(__name__)

DATASET_FILE = "dataset.jsonl"
PO_DATASET_FILE = "po_dataset.jsonl"
ATTRIBUTION_FILE = "attribution.csv"
DEVIATION_FILE = "deviation.json"
INIT_CKPT = "target_init.json"
SFT_CKPT = "target_sft.json"
PO_CKPT = "target_po.json"
SFT_TELEMETRY = "sft_telemetry.jsonl"
PO_TELEMETRY = "po_telemetry.jsonl"
METRICS_FILE = "metrics.json"
SWEEP_FILE = "sweep.csv"
RESOLVED_CONFIG = "config.resolved.json"


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(cfg: RunConfig) -> int:
    """Generate candidates, assemble quadruples, write the data artifacts."""
    out = _out_dir(cfg)
    write_resolved_config(cfg, out / RESOLVED_CONFIG)
    oracle = cfg.oracle()
    prompts = cfg.prompts()
    ensemble = cfg.ensemble()
    target = cfg.target_init().copy(frozen=True)
    target_ensemble = datagen.SourceEnsemble.single(
        "target-init", target, cfg.sampling_config()
    )
    n = cfg.n_samples()
    source_cands = datagen.generate_candidates(ensemble, prompts, n, oracle)
    target_cands = datagen.generate_candidates(target_ensemble, prompts, n, oracle)
    quadruples, attribution = datagen.assemble_quadruples(
        source_cands, target_cands, include_yls=cfg.raw["data"]["include_yls"]
    )
    datagen.write_quadruples(out / DATASET_FILE, quadruples)
    datagen.write_attribution_csv(out / ATTRIBUTION_FILE, attribution)
    report = datagen.distribution_deviation_report(target, quadruples)
    with open(out / DEVIATION_FILE, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2)
        fh.write("\n")
    save_checkpoint(target, out / INIT_CKPT, label="target-init")
    print(f"wrote {len(quadruples)} quadruples to {out / DATASET_FILE}")
    return 0


def _load_dataset(out: Path) -> list[datagen.PreferenceQuadruple]:
    path = out / DATASET_FILE
    if not path.exists():
        raise DataError(f"{path} not found; run gen-data first")
    return datagen.read_quadruples(path)


def _split(cfg: RunConfig, quadruples):
    return datagen.split_dataset(
        quadruples,
        cfg.raw["data"]["split_fraction"],
        seed=derive_seed(cfg.seed, stream_salt("split")),
    )


def _run_sft_stage(cfg: RunConfig, out: Path):
    split = _split(cfg, _load_dataset(out))
    target = cfg.target_init()
    snapshot, losses = trainer.run_sft(
        target,
        split.sft_records,
        cfg.optimizer_config("sft"),
        epochs=cfg.raw["sft"]["epochs"],
        batch_size=cfg.raw["sft"]["batch_size"],
        seed=derive_seed(cfg.seed, stream_salt("sft")),
    )
    save_checkpoint(snapshot, out / SFT_CKPT, label="target-sft")
    with open(out / SFT_TELEMETRY, "w") as fh:
        for i, loss in enumerate(losses):
            fh.write(json.dumps({"type": "step", "step": i, "loss": loss}) + "\n")
    print(f"sft: {len(losses)} steps, checkpoint {out / SFT_CKPT}")
    return snapshot


def _prepare_po_data(cfg: RunConfig, out: Path, snapshot):
    """Regenerate on-policy pairs from the SFT snapshot and carve a held-out set."""
    split = _split(cfg, _load_dataset(out))
    regenerated = trainer.regenerate_target_pairs(
        snapshot,
        split.po_records,
        cfg.n_samples(),
        cfg.sampling_config(),
        cfg.oracle(),
    )
    datagen.write_quadruples(out / PO_DATASET_FILE, regenerated)
    holdout_fraction = cfg.raw["po"]["eval_holdout_fraction"]
    n_hold = int(holdout_fraction * len(regenerated))
    if n_hold > 0:
        rng = np.random.default_rng(derive_seed(cfg.seed, stream_salt("holdout")))
        perm = rng.permutation(len(regenerated))
        heldout = [regenerated[i] for i in perm[:n_hold]]
        train = [regenerated[i] for i in perm[n_hold:]]
    else:
        heldout, train = [], regenerated
    return train, heldout


def _run_po_stage(cfg: RunConfig, out: Path, snapshot=None) -> int:
    if snapshot is None:
        path = out / SFT_CKPT
        if not path.exists():
            raise DataError(f"{path} not found; run the sft stage first")
        snapshot = load_checkpoint(path)
    train, heldout = _prepare_po_data(cfg, out, snapshot)
    objective = cfg.objective_config()
    is_wrpo = objective.kind in WRPO_KINDS
    po = cfg.raw["po"]
    total = n_optimizer_steps(len(train), po["batch_size"], po["epochs"])
    schedule = cfg.fusion_schedule(total) if is_wrpo else None
    oracle = cfg.oracle()
    evals = EvalSettings(
        every=po["eval_every"],
        quadruples=heldout or None,
        oracle=oracle,
        prompts=cfg.eval_prompts(),
        sampling=cfg.sampling_config(),
        samples_per_prompt=cfg.raw["eval"]["samples_per_prompt"],
    )
    model, telemetry = trainer.run_preference_optimization(
        snapshot.copy(frozen=False),
        snapshot,
        train,
        objective,
        cfg.optimizer_config("po"),
        schedule=schedule,
        epochs=po["epochs"],
        batch_size=po["batch_size"],
        seed=derive_seed(cfg.seed, stream_salt("po")),
        pairing=cfg.pairing(),
        evals=evals,
    )
    save_checkpoint(model, out / PO_CKPT, label=f"target-po-{objective.kind}")
    trainer.write_telemetry(out / PO_TELEMETRY, telemetry)

    accuracy = None
    if heldout:
        accuracy = trainer.eval_reward_accuracy(model, snapshot, heldout, objective.beta)
    baseline = load_checkpoint(out / INIT_CKPT) if (out / INIT_CKPT).exists() else snapshot
    quality = trainer.eval_policy_quality(
        model,
        baseline,
        cfg.eval_prompts(),
        cfg.sampling_config(),
        oracle,
        samples_per_prompt=cfg.raw["eval"]["samples_per_prompt"],
    )
    metrics = {
        "objective": objective.kind,
        "reward_accuracy": accuracy,
        "candidate_mean_score": quality.candidate_mean,
        "baseline_mean_score": quality.baseline_mean,
        "win_rate": quality.win_rate,
        "wins": quality.wins,
        "ties": quality.ties,
        "losses": quality.losses,
        "n_eval_prompts": quality.n_prompts,
    }
    with open(out / METRICS_FILE, "w") as fh:
        json.dump(metrics, fh, indent=2)
        fh.write("\n")
    print(
        f"po: {len(telemetry.steps)} steps, checkpoint hash "
        f"{parameter_hash(model)[:12]}, win rate {quality.win_rate:.2f}"
    )
    return 0


def cmd_train(cfg: RunConfig, stage: str) -> int:
    out = _out_dir(cfg)
    write_resolved_config(cfg, out / RESOLVED_CONFIG)
    if stage == "sft":
        _run_sft_stage(cfg, out)
        return 0
    if stage == "po":
        return _run_po_stage(cfg, out)
    if stage == "full":
        snapshot = _run_sft_stage(cfg, out)
        return _run_po_stage(cfg, out, snapshot)
    raise ConfigError(f"unknown stage {stage!r}")


def _sweep_one(args: tuple) -> dict:
    """One PO run of the sweep; runs in its own process when parallel."""
    raw, target, kind, out_dir = args
    cfg = RunConfig(raw=raw).validate()
    out = Path(out_dir)
    snapshot = load_checkpoint(out / SFT_CKPT)
    train, heldout = _prepare_po_data(cfg, out, snapshot)
    objective = cfg.objective_config()
    po = cfg.raw["po"]
    total = n_optimizer_steps(len(train), po["batch_size"], po["epochs"])
    steps = cfg.raw["schedule"]["total_steps"]
    schedule = FusionSchedule(
        kind=kind, target=target, total_steps=steps if steps is not None else max(1, total)
    )
    model, _ = trainer.run_preference_optimization(
        snapshot.copy(frozen=False),
        snapshot,
        train,
        objective,
        cfg.optimizer_config("po"),
        schedule=schedule,
        epochs=po["epochs"],
        batch_size=po["batch_size"],
        seed=derive_seed(cfg.seed, stream_salt("po")),
        pairing=cfg.pairing(),
    )
    accuracy = (
        trainer.eval_reward_accuracy(model, snapshot, heldout, objective.beta)
        if heldout
        else None
    )
    quality = trainer.eval_policy_quality(
        model,
        snapshot,
        cfg.eval_prompts(),
        cfg.sampling_config(),
        cfg.oracle(),
        samples_per_prompt=cfg.raw["eval"]["samples_per_prompt"],
    )
    return {
        "target": target,
        "kind": kind,
        "reward_accuracy": accuracy,
        "mean_oracle_score": quality.candidate_mean,
        "win_rate": quality.win_rate,
    }


def cmd_sweep_alpha(cfg: RunConfig, targets: list[float], kinds: list[str]) -> int:
    """One PO run per (alpha target, schedule kind) off a shared SFT snapshot."""
    if cfg.objective_config().kind not in WRPO_KINDS:
        raise ConfigError("sweep-alpha requires a wrpo_* objective kind")
    for t in targets:
        if not 0 <= t <= 1:
            raise ConfigError(f"sweep target {t} outside [0, 1]")
    out = _out_dir(cfg)
    write_resolved_config(cfg, out / RESOLVED_CONFIG)
    if not (out / DATASET_FILE).exists():
        cmd_gen_data(cfg)
    if not (out / SFT_CKPT).exists():
        _run_sft_stage(cfg, out)
    jobs = [(cfg.raw, t, k, str(out)) for t in targets for k in kinds]
    threads = int(os.environ.get("MICROWRPO_THREADS", "1"))
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(_sweep_one, jobs))
    else:
        rows = [_sweep_one(job) for job in jobs]
    rows.sort(key=lambda r: (r["target"], r["kind"]))
    with open(out / SWEEP_FILE, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["target", "kind", "reward_accuracy", "mean_oracle_score", "win_rate"])
        for r in rows:
            writer.writerow(
                [
                    repr(r["target"]),
                    r["kind"],
                    "" if r["reward_accuracy"] is None else repr(r["reward_accuracy"]),
                    repr(r["mean_oracle_score"]),
                    repr(r["win_rate"]),
                ]
            )
    print(f"wrote {len(rows)} sweep rows to {out / SWEEP_FILE}")
    return 0


def cmd_export_figures(
    telemetry_paths: list[str],
    deviation_path: str | None,
    sweep_path: str | None,
    out_dir: str,
) -> int:
    """Plot-ready CSV bundles; tolerant of missing or empty inputs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for tpath in telemetry_paths:
        if not Path(tpath).exists():
            raise DataError(f"telemetry file not found: {tpath}")
        telemetry = trainer.read_telemetry(tpath)
        dest = out / f"margin_dynamics__{Path(tpath).stem}.csv"
        with open(dest, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "alpha", "on_policy_margin", "hybrid_policy_margin"])
            for s in telemetry.steps:
                writer.writerow(
                    [
                        s.step,
                        "" if s.alpha is None else repr(s.alpha),
                        "" if s.on_policy_margin is None else repr(s.on_policy_margin),
                        "" if s.hybrid_policy_margin is None else repr(s.hybrid_policy_margin),
                    ]
                )
        if not telemetry.steps:
            log.warning("telemetry %s has no step records; wrote headers only", tpath)
        print(f"wrote {dest}")
    if deviation_path is not None:
        if not Path(deviation_path).exists():
            raise DataError(f"deviation report not found: {deviation_path}")
        with open(deviation_path) as fh:
            report = json.load(fh)
        edges = report["bin_edges"]
        dest = out / "deviation_histogram.csv"
        with open(dest, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["role", "bin_left", "bin_right", "count"])
            for role, stats in report["roles"].items():
                for i, count in enumerate(stats["histogram"]):
                    writer.writerow([role, repr(edges[i]), repr(edges[i + 1]), count])
        print(f"wrote {dest}")
    if sweep_path is not None:
        if not Path(sweep_path).exists():
            raise DataError(f"sweep file not found: {sweep_path}")
        dest = out / "alpha_sweep.csv"
        dest.write_text(Path(sweep_path).read_text())
        print(f"wrote {dest}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="microwrpo",
        description="Desk-scale weighted-reward preference optimization lab",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", default=None, help="JSON run config (defaults used if omitted)")
        p.add_argument("--seed", type=int, default=None, help="override the root seed")
        p.add_argument("--out", default=None, help="override the output directory")

    p_gen = sub.add_parser("gen-data", help="generate the preference dataset")
    add_common(p_gen)

    p_train = sub.add_parser("train", help="run a training stage")
    add_common(p_train)
    p_train.add_argument("--stage", choices=("sft", "po", "full"), default="full")

    p_sweep = sub.add_parser("sweep-alpha", help="sweep fusion-coefficient targets")
    add_common(p_sweep)
    p_sweep.add_argument(
        "--targets", type=float, nargs="+", default=ALPHA_SWEEP_TARGETS
    )
    p_sweep.add_argument(
        "--kinds", nargs="+", choices=("linear", "static"), default=["linear", "static"]
    )

    p_fig = sub.add_parser("export-figures", help="export plot-ready CSV bundles")
    p_fig.add_argument("--telemetry", nargs="*", default=[])
    p_fig.add_argument("--deviation", default=None)
    p_fig.add_argument("--sweep", default=None)
    p_fig.add_argument("--out", default="figures")

    p_ver = sub.add_parser("verify", help="run the invariant battery")
    p_ver.add_argument("--fast", action="store_true", help="smaller sample sizes")
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gen-data":
            return cmd_gen_data(load_config(args.config, seed=args.seed, out_dir=args.out))
        if args.command == "train":
            return cmd_train(
                load_config(args.config, seed=args.seed, out_dir=args.out), args.stage
            )
        if args.command == "sweep-alpha":
            return cmd_sweep_alpha(
                load_config(args.config, seed=args.seed, out_dir=args.out),
                args.targets,
                args.kinds,
            )
        if args.command == "export-figures":
            return cmd_export_figures(args.telemetry, args.deviation, args.sweep, args.out)
        if args.command == "verify":
            from .verify import run_battery

            return run_battery(fast=args.fast)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, InputError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    raise AssertionError(f"unhandled command {args.command!r}")


if __name__ == "__main__":
    sys.exit(main())
