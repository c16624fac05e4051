"""Command-line driver: generate, train, evaluate, stratify, ablate.

Every command is deterministic given its configuration and seed; report
files carry no timestamps, so re-running reproduces them byte for byte.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_run_config, render_run_config
from .data import CohortFormatError, generate_synthetic_cohort, kfold_split, load_cohort, save_cohort
from .model import CheckpointError, ConfigError, ModelConfig, load_params, read_tensors, save_params, write_tensors
from .report import read_csv, render_km_svg, write_csv, write_km_csv
from .survival import (GROUP_NAMES, InfeasibleStratificationError, concordance_index, kaplan_meier,
                       xtile_cutoffs)
from .tensor import AdamState
from .training import (LOSS_COLUMNS, VARIANTS, FoldState, folds_digest,
                       predict_risks, train_fold)

log = logging.getLogger("mifiae")


class CommandError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _run_dirs(cfg: RunConfig, variant: str, nested: bool = False) -> tuple[Path, Path]:
    if nested:
        return cfg.checkpoint_dir / "ablation" / variant, cfg.report_dir / "ablation" / variant
    return cfg.checkpoint_dir / variant, cfg.report_dir


def _load_checked_cohort(cfg: RunConfig):
    if not (cfg.cohort_dir / "manifest.txt").is_file():
        raise CommandError(f"paths.cohort_dir: no cohort at {cfg.cohort_dir} (run `generate` first)")
    cohort = load_cohort(cfg.cohort_dir)
    shape = cohort.patients[0].ct.shape
    if shape != cfg.model.input_shape:
        raise ConfigError(f"model.input_shape {cfg.model.input_shape} does not match cohort volumes "
                          f"{shape} in {cfg.cohort_dir}")
    k = cohort.patients[0].tabular.size
    if k != cfg.model.tabular_dim:
        raise ConfigError(f"model.tabular_dim {cfg.model.tabular_dim} does not match cohort "
                          f"features ({k}) in {cfg.cohort_dir}")
    if len(cohort) < cfg.folds:
        raise ConfigError(f"run.folds {cfg.folds} exceeds cohort size {len(cohort)}")
    return cohort


def _folds(cfg: RunConfig, n: int):
    return kfold_split(n, cfg.folds, cfg.training.seed)


def _save_fold_state(ckpt_dir: Path, fold: int, state: FoldState) -> None:
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    save_params(ckpt_dir / f"fold{fold}.mifi", state.params)
    arrays = {"epoch": np.array(float(state.epoch)), "step": np.array(float(state.optim.step)),
              "history": np.array(state.history, dtype=np.float64).reshape(-1, 4)}
    for name in state.params:
        if name in state.optim.m:
            arrays[f"m/{name}"] = state.optim.m[name]
            arrays[f"v/{name}"] = state.optim.v[name]
    write_tensors(ckpt_dir / f"fold{fold}.optim", arrays)


def _load_fold_state(ckpt_dir: Path, fold: int, mcfg: ModelConfig) -> FoldState:
    params = load_params(ckpt_dir / f"fold{fold}.mifi", mcfg)
    arrays = read_tensors(ckpt_dir / f"fold{fold}.optim")
    optim = AdamState(step=int(arrays["step"]))
    for name in params:
        if f"m/{name}" in arrays:
            optim.m[name] = arrays[f"m/{name}"]
            optim.v[name] = arrays[f"v/{name}"]
    history = [tuple(float(v) for v in row) for row in arrays["history"]]
    return FoldState(params, optim, int(arrays["epoch"]), history)


def _write_losses(report_dir: Path, fold: int, history) -> None:
    rows = [(e + 1, *map(float, h)) for e, h in enumerate(history)]
    write_csv(report_dir / f"losses_fold{fold}.csv", ("epoch",) + LOSS_COLUMNS, rows)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(cfg: RunConfig) -> dict:
    cohort = generate_synthetic_cohort(cfg.synthetic)
    save_cohort(cohort, cfg.cohort_dir)
    summary = {"n": len(cohort), "censoring_rate": cohort.censoring_fraction, "dir": str(cfg.cohort_dir)}
    print(f"wrote {summary['n']} patients to {cfg.cohort_dir} "
          f"(censoring rate {summary['censoring_rate']:.3f})")
    return summary


def cmd_train(cfg: RunConfig, resume: bool = False, variant: str | None = None,
              nested: bool = False) -> list[FoldState]:
    variant = variant or cfg.ablation
    cohort = _load_checked_cohort(cfg)
    ckpt_dir, report_dir = _run_dirs(cfg, variant, nested)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    report_dir.mkdir(parents=True, exist_ok=True)
    folds = _folds(cfg, len(cohort))
    (ckpt_dir / "model.cfg").write_text(cfg.model.to_text())
    (ckpt_dir / "folds.txt").write_text(
        f"variant={variant}\nfolds={cfg.folds}\nseed={cfg.training.seed}\nhash={folds_digest(folds)}\n")
    states = []
    for fold, (train_idx, _) in enumerate(folds):
        state = None
        if resume and (ckpt_dir / f"fold{fold}.optim").is_file():
            state = _load_fold_state(ckpt_dir, fold, cfg.model)
            log.info("fold %d: resuming at epoch %d", fold, state.epoch)
        state = train_fold(cohort, train_idx, cfg.model, cfg.training, variant, fold, state,
                           on_epoch=lambda s, f=fold: _save_fold_state(ckpt_dir, f, s))
        if state.epoch > cfg.training.epochs:
            raise CommandError(f"{ckpt_dir}/fold{fold}: checkpoint is past training.epochs")
        _save_fold_state(ckpt_dir, fold, state)
        _write_losses(report_dir, fold, state.history)
        first, last = state.history[0][3], state.history[-1][3]
        print(f"[{variant}] fold {fold}: L_final {first:.4f} -> {last:.4f} over {state.epoch} epochs")
        states.append(state)
    return states


def cmd_evaluate(cfg: RunConfig, variant: str | None = None, nested: bool = False) -> dict:
    variant = variant or cfg.ablation
    cohort = _load_checked_cohort(cfg)
    ckpt_dir, report_dir = _run_dirs(cfg, variant, nested)
    report_dir.mkdir(parents=True, exist_ok=True)
    folds = _folds(cfg, len(cohort))
    times, events, ids = cohort.times, cohort.events, cohort.ids
    rows, cidx = [], []
    for fold, (_, test_idx) in enumerate(folds):
        path = ckpt_dir / f"fold{fold}.mifi"
        if not path.is_file():
            raise CommandError(f"missing checkpoint {path} (run `train` first)")
        params = load_params(path, cfg.model)
        risks = predict_risks(cohort, test_idx, params, cfg.model, variant)
        write_csv(report_dir / f"risks_fold{fold}.csv", ("id", "risk", "time", "event"),
                  [(ids[i], float(r), float(times[i]), int(events[i])) for i, r in zip(test_idx, risks)])
        c = concordance_index(risks, times[test_idx], events[test_idx])
        cidx.append(c)
        try:
            st = xtile_cutoffs(risks, times[test_idx], events[test_idx], cfg.min_group_frac)
            strat = [st.cutoffs[0], st.cutoffs[1], *st.group_sizes, st.logrank_chi2, st.p_value]
        except (InfeasibleStratificationError, ValueError):
            strat = [""] * 7
        rows.append([fold, len(test_idx), c, *strat])
    mean = float(np.mean(cidx))
    std = float(np.std(cidx, ddof=1))
    header = ("fold", "n_test", "c_index", "cutoff_low", "cutoff_high", "n_low", "n_mid", "n_high",
              "logrank_chi2", "p_value")
    pad = [""] * (len(header) - 3)
    rows.append(["mean", len(cohort), mean, *pad])
    rows.append(["std", len(cohort), std, *pad])
    write_csv(report_dir / "eval_report.csv", header, rows)
    print(f"[{variant}] C-index {mean:.3f} +/- {std:.3f} over {len(folds)} folds")
    return {"variant": variant, "c_index": cidx, "mean": mean, "std": std, "folds_hash": folds_digest(folds)}


def _pooled_risks(report_dir: Path, n_folds: int, which: str):
    ids, scores, times, events = [], [], [], []
    chosen = range(n_folds) if which == "all" else [int(which)]
    for fold in chosen:
        path = report_dir / f"risks_fold{fold}.csv"
        if not path.is_file():
            raise CommandError(f"missing {path} (run `evaluate` first)")
        rows = read_csv(path)
        r = np.array([float(x["risk"]) for x in rows])
        if which == "all":
            sd = r.std()
            r = (r - r.mean()) / (sd if sd > 0 else 1.0)
        ids += [x["id"] for x in rows]
        scores.append(r)
        times += [float(x["time"]) for x in rows]
        events += [int(x["event"]) for x in rows]
    return ids, np.concatenate(scores), np.array(times), np.array(events)


def cmd_stratify(cfg: RunConfig, variant: str | None = None, nested: bool = False):
    """Three-group split of out-of-fold risks; per-fold risks are z-scored
    before pooling so fold models on different scales can be combined."""
    variant = variant or cfg.ablation
    _, report_dir = _run_dirs(cfg, variant, nested)
    ids, scores, times, events = _pooled_risks(report_dir, cfg.folds, cfg.stratify_fold)
    st = xtile_cutoffs(scores, times, events, cfg.min_group_frac)
    curves = []
    for g in range(3):
        sel = st.labels == g
        curve = kaplan_meier(times[sel], events[sel])
        write_km_csv(report_dir / f"km_group{g}.csv", curve)
        curves.append(curve)
    (report_dir / "km.svg").write_text(render_km_svg(curves, st.p_value, float(times.max())))
    write_csv(report_dir / "stratification.csv", ("key", "value"), [
        ("cutoff_low", st.cutoffs[0]), ("cutoff_high", st.cutoffs[1]),
        *((f"n_{GROUP_NAMES[g]}", st.group_sizes[g]) for g in range(3)),
        ("logrank_chi2", st.logrank_chi2), ("p_value", st.p_value)])
    write_csv(report_dir / "risk_groups.csv", ("id", "score", "group"),
              [(i, float(s), GROUP_NAMES[g]) for i, s, g in zip(ids, scores, st.labels)])
    print(f"[{variant}] groups {dict(zip(GROUP_NAMES, st.group_sizes))}, "
          f"log-rank chi2 {st.logrank_chi2:.2f}, p = {st.p_value:.3g}")
    return st


def cmd_ablate(cfg: RunConfig, variants=tuple(VARIANTS)) -> list[dict]:
    results = []
    for v in variants:
        cmd_train(cfg, variant=v, nested=True)
        results.append(cmd_evaluate(cfg, variant=v, nested=True))
    hashes = {r["folds_hash"] for r in results}
    if len(hashes) != 1:
        raise CommandError(f"ablation variants saw different folds: {sorted(hashes)}")
    header = ("variant", "mean_c_index", "std_c_index",
              *(f"fold{i}" for i in range(cfg.folds)), "folds_hash")
    rows = [(r["variant"], r["mean"], r["std"], *map(float, r["c_index"]), r["folds_hash"]) for r in results]
    cfg.report_dir.mkdir(parents=True, exist_ok=True)
    write_csv(cfg.report_dir / "ablation_table.csv", header, rows)
    print("variant      C-index (mean +/- std)")
    for r in results:
        print(f"{r['variant']:<12} {r['mean']:.3f} +/- {r['std']:.3f}")
    return results


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _apply_overrides(cfg: RunConfig, args, command: str) -> RunConfig:
    changes = {}
    if args.seed is not None:
        changes["model"] = dataclasses.replace(cfg.model, seed=args.seed)
        changes["training"] = dataclasses.replace(cfg.training, seed=args.seed)
        changes["synthetic"] = dataclasses.replace(cfg.synthetic, seed=args.seed)
    if args.ablation is not None:
        changes["ablation"] = args.ablation
    if args.folds is not None:
        changes["folds"] = args.folds
    if args.out is not None:
        out = Path(args.out)
        if command == "generate":
            changes["cohort_dir"] = out
        else:
            changes["report_dir"] = out
            changes["checkpoint_dir"] = out / "checkpoints"
    return dataclasses.replace(cfg, **changes) if changes else cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mifiae", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (("generate", "write a synthetic cohort"),
                        ("train", "k-fold training with the joint loss"),
                        ("evaluate", "per-fold test C-index"),
                        ("stratify", "three-group risk split with KM curves"),
                        ("ablate", "train and evaluate every ablation variant"),
                        ("show-config", "print the resolved configuration")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", type=Path, default=None, help="run configuration file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--ablation", choices=sorted(VARIANTS), default=None)
        p.add_argument("--folds", type=int, default=None)
        p.add_argument("--out", type=Path, default=None, help="output directory")
        if name == "train":
            p.add_argument("--resume", action="store_true", help="continue from saved checkpoints")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _apply_overrides(load_run_config(args.config), args, args.command)
        if args.command == "generate":
            cmd_generate(cfg)
        elif args.command == "train":
            cmd_train(cfg, resume=args.resume)
        elif args.command == "evaluate":
            cmd_evaluate(cfg)
        elif args.command == "stratify":
            cmd_stratify(cfg)
        elif args.command == "ablate":
            cmd_ablate(cfg)
        else:
            sys.stdout.write(render_run_config(cfg))
    except (ConfigError, CommandError, CohortFormatError, CheckpointError,
            InfeasibleStratificationError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
