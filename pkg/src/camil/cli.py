"""Command-line entry point: ``camil <command> [flags] [section.key=value ...]``.

Exit codes: 0 success, 1 stage failure, 2 usage or configuration error.
Every command stages its outputs in a temporary directory and moves them
into ``--out`` only on success, together with one ``manifest.json``.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import shutil
import sys
import tempfile
import time
from contextlib import contextmanager
from pathlib import Path

from . import __version__
from .attmil import load_checkpoint, save_checkpoint
from .config import ConfigError, dump_config, get_list, get_typed, load_config, snapshot
from .data_model import TargetSpec, binarize_target, load_cohort
from .errors import CamilError
from .evaluation import SUMMARY_COLUMNS, summary_row, write_csv
from .heatmaps import select_top_expressers, write_review_bundle
from .pipeline import (
    ANOVA_COLUMNS,
    PER_FOLD_COLUMNS,
    RANGE_COLUMNS,
    REGRESSION_COLUMNS,
    SCORE_COLUMNS,
    SEPARATION_COLUMNS,
    TTEST_COLUMNS,
    ModelResult,
    comparison_tables,
    per_fold_rows,
    resolve_preset,
    score_rows,
    test_scoreset,
    train_folds,
)
from .splitting import read_fold_plan, site_aware_folds, validate_folds, write_fold_plan
from .survival import SURVIVAL_COLUMNS, cox_rows, score_prognosis
from .synth import SynthConfig, generate_cohort, write_synthetic
from .tile_prep import (
    MANIFEST_COLUMNS,
    CannyConfig,
    preprocess_raster,
    read_raster,
    read_stain_profile,
    reference_profile,
)
from .training import TrainPreset

log = logging.getLogger("camil")

COMMANDS = ("preprocess", "split", "train", "evaluate", "compare", "survival", "heatmap", "synth")
HELP = {
    "preprocess": "tile, filter and stain-normalize PNG/PPM rasters",
    "split": "write a site-aware k-fold plan",
    "train": "train one preset on one or all folds",
    "evaluate": "score trained fold models on their test patients",
    "compare": "train and evaluate all presets and write the comparison tables",
    "survival": "Cox analysis of averaged fold-model scores",
    "heatmap": "attention heatmaps for the top-target test patients",
    "synth": "generate a synthetic cohort with known signal",
}
MANIFEST_NAME = "manifest.json"


# -- manifest -----------------------------------------------------------------


def digest(path: Path) -> str:
    """64-bit blake2b of a file, or of every file (name and bytes) under a directory."""
    h = hashlib.blake2b(digest_size=8)
    path = Path(path)
    files = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
    for f in files:
        if path.is_dir():
            h.update(f.relative_to(path).as_posix().encode())
        h.update(f.read_bytes())
    return h.hexdigest()


@contextmanager
def staged(out: Path):
    """Yield a scratch directory whose files replace those in ``out`` on clean exit."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    out.mkdir(parents=True, exist_ok=True)
    for f in sorted(p for p in tmp.rglob("*") if p.is_file()):
        dest = out / f.relative_to(tmp)
        dest.parent.mkdir(parents=True, exist_ok=True)
        f.replace(dest)
    shutil.rmtree(tmp, ignore_errors=True)


def write_manifest(tmp: Path, command: str, cp, seed: int, inputs, t0: float) -> None:
    outputs = sorted(p.relative_to(tmp).as_posix() for p in tmp.rglob("*") if p.is_file())
    manifest = {
        "command": command,
        "config": snapshot(cp),
        "seed": seed,
        "inputs": {str(p): digest(p) for p in inputs},
        "outputs": outputs,
        "tool_version": __version__,
        "wall_time_s": round(time.perf_counter() - t0, 3),
    }
    (tmp / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# -- config helpers -------------------------------------------------------------


def _existing(cp, section: str, key: str, kind: str = "file") -> Path:
    p = Path(cp.get(section, key))
    ok = p.is_dir() if kind == "dir" else p.is_file()
    if not ok:
        raise ConfigError(f"[{section}] {key}: {kind} not found: {p}")
    return p


def _target(cp) -> TargetSpec:
    cutoff = cp.get("cohort", "cutoff").strip()
    try:
        return TargetSpec(
            cp.get("cohort", "target"),
            cp.get("cohort", "target_kind"),
            float(cutoff) if cutoff else None,
            cp.get("cohort", "direction"),
        )
    except ValueError as exc:
        raise ConfigError(f"[cohort] target: {exc}") from exc


def _cohort(cp):
    features = _existing(cp, "cohort", "features_dir", "dir")
    clinical = _existing(cp, "cohort", "clinical_table")
    target = _target(cp)
    cohort = load_cohort(
        features, clinical, target, cp.get("cohort", "name"), cp.get("cohort", "merge_slides")
    )
    if not cohort.bags:
        raise ConfigError(f"no patients with both features and a target under {features}")
    return cohort, target, [features, clinical]


def _plan(cp, seed: int):
    path = _existing(cp, "split", "plan")
    return read_fold_plan(path, seed), path


_PRESET_FIELDS = {f.name: f for f in dataclasses.fields(TrainPreset)}


def _coerce(field: dataclasses.Field, raw: str):
    kind = str(field.type)
    if "bool" in kind:
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if "int" in kind and "float" not in kind:
        return int(raw)
    if "float" in kind:
        return None if raw.strip().lower() in ("", "none") else float(raw)
    return raw


def _preset(cp, name: str) -> TrainPreset:
    overrides = {}
    for key, raw in cp.items("train"):
        if key in ("preset", "ablation", "fold"):
            continue
        if key not in _PRESET_FIELDS or key == "name":
            raise ConfigError(f"[train] {key} is not a preset field")
        try:
            overrides[key] = _coerce(_PRESET_FIELDS[key], raw)
        except ValueError as exc:
            raise ConfigError(f"[train] {key} = {raw!r}: {exc}") from exc
    try:
        return resolve_preset(name, **overrides)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def _models(models_dir: Path, preset: str, k: int) -> dict[int, Path]:
    d = models_dir / preset
    found = {f: d / f"fold{f}.milm" for f in range(k) if (d / f"fold{f}.milm").is_file()}
    if not found:
        raise ConfigError(f"no checkpoints under {d}")
    return found


# -- commands -----------------------------------------------------------------


def cmd_synth(cp, args, out: Path, seed: int, t0: float) -> None:
    s = "synth"
    try:
        cfg = SynthConfig(
            n_patients=get_typed(cp, s, "n_patients", int),
            n_sites=get_typed(cp, s, "n_sites", int),
            instances_per_bag=(get_typed(cp, s, "instances_min", int), get_typed(cp, s, "instances_max", int)),
            d=get_typed(cp, s, "d", int),
            signal_dim_count=get_typed(cp, s, "signal_dim_count", int),
            signal_strength=get_typed(cp, s, "signal_strength", float),
            label_noise_sd=get_typed(cp, s, "label_noise_sd", float),
            hazard_coef=get_typed(cp, s, "hazard_coef", float),
            site_shift_sd=get_typed(cp, s, "site_shift_sd", float),
            target_kind=cp.get(s, "target_kind"),
            seed=seed,
        )
    except ValueError as exc:
        raise ConfigError(f"[synth] {exc}") from exc
    cohort, truth = generate_cohort(cfg, cp.get("cohort", "name"))
    with staged(out) as tmp:
        write_synthetic(cohort, truth, tmp, cfg)
        write_manifest(tmp, "synth", cp, seed, [], t0)


def cmd_split(cp, args, out: Path, seed: int, t0: float) -> None:
    cohort, target, inputs = _cohort(cp)
    labels = binarize_target(cohort.targets(), target, cohort.patient_ids)
    k = get_typed(cp, "split", "k", int)
    tol = get_typed(cp, "split", "tol", float)
    plan = site_aware_folds(cohort, labels, k, get_typed(cp, "split", "val_frac", float), seed, tol)
    check = validate_folds(plan, cohort.sites(), labels, tol)
    for failure in check.failures:
        log.warning("fold plan: %s", failure)
    rows = [
        {
            "fold": i,
            "n_train": len(e.train_ids),
            "n_val": len(e.val_ids),
            "n_test": len(e.test_ids),
            "test_sites": " ".join(e.test_sites),
            "class_rate_deviation": check.deviations[i],
        }
        for i, e in enumerate(plan.folds)
    ]
    with staged(out) as tmp:
        write_fold_plan(plan, tmp / "fold_plan.csv")
        write_csv(tmp / "fold_summary.csv", rows, list(rows[0]))
        write_manifest(tmp, "split", cp, seed, inputs, t0)


def _preset_name(cp, section: str) -> str:
    name = cp.get(section, "preset")
    ablation = cp.get("train", "ablation").strip() if section == "train" else ""
    return f"{name}+{ablation}" if ablation else name


def cmd_train(cp, args, out: Path, seed: int, t0: float) -> None:
    cohort, target, inputs = _cohort(cp)
    plan, plan_path = _plan(cp, seed)
    preset = _preset(cp, _preset_name(cp, "train"))
    fold = cp.get("train", "fold").strip()
    folds = [int(fold)] if fold else list(range(plan.k))
    if any(not 0 <= f < plan.k for f in folds):
        raise ConfigError(f"fold must be in 0..{plan.k - 1}")
    trained = train_folds(cohort, plan, preset, seed, folds, target, get_typed(cp, "run", "jobs", int))
    with staged(out / preset.name) as tmp:
        for f, (params, tlog) in sorted(trained.items()):
            save_checkpoint(params, tmp / f"fold{f}.milm")
            tlog.write_csv(tmp / f"fold{f}_log.csv")
        write_manifest(tmp, "train", cp, seed, inputs + [plan_path], t0)


def cmd_evaluate(cp, args, out: Path, seed: int, t0: float) -> None:
    cohort, target, inputs = _cohort(cp)
    plan, plan_path = _plan(cp, seed)
    name = cp.get("evaluate", "preset")
    ckpts = _models(Path(cp.get("evaluate", "models_dir")), name, plan.k)
    result = ModelResult(
        name, {f: test_scoreset(cohort, plan, f, load_checkpoint(p), target) for f, p in ckpts.items()}
    )
    with staged(out) as tmp:
        write_csv(tmp / "per_fold_metrics.csv", per_fold_rows(cohort.name, result), PER_FOLD_COLUMNS)
        write_csv(tmp / "test_scores.csv", score_rows(result), SCORE_COLUMNS)
        write_csv(
            tmp / "summary.csv", [summary_row(cohort.name, name, result.reports, result.pooled)], SUMMARY_COLUMNS
        )
        write_manifest(tmp, "evaluate", cp, seed, inputs + [plan_path, *ckpts.values()], t0)


def cmd_compare(cp, args, out: Path, seed: int, t0: float) -> None:
    cohort, target, inputs = _cohort(cp)
    plan, plan_path = _plan(cp, seed)
    base = get_list(cp, "compare", "presets")
    names = base + [f"camil_regression+{a}" for a in get_list(cp, "compare", "ablations")]
    if not names:
        raise ConfigError("[compare] presets is empty")
    jobs = get_typed(cp, "run", "jobs", int)
    presets = [_preset(cp, n) for n in names]
    results, models = [], {}
    for preset in presets:
        trained = train_folds(cohort, plan, preset, seed, None, target, jobs)
        models[preset.name] = trained
        results.append(
            ModelResult(preset.name, {f: test_scoreset(cohort, plan, f, p, target) for f, (p, _) in trained.items()})
        )
    tables = comparison_tables(cohort.name, results, cp.get("compare", "reference"))
    layout = {
        "summary": ("table1_metrics.csv", SUMMARY_COLUMNS),
        "anova": ("table2_anova.csv", ANOVA_COLUMNS),
        "ttests": ("table3_ttests.csv", TTEST_COLUMNS),
        "separation": ("table4_separation.csv", SEPARATION_COLUMNS),
        "regression": ("table5_regression.csv", REGRESSION_COLUMNS),
        "ranges": ("prediction_ranges.csv", RANGE_COLUMNS),
        "per_fold": ("per_fold_metrics.csv", PER_FOLD_COLUMNS),
    }
    with staged(out) as tmp:
        for key, (fname, cols) in layout.items():
            write_csv(tmp / fname, tables[key], cols)
        for name, trained in models.items():
            for f, (params, tlog) in sorted(trained.items()):
                (tmp / "models" / name).mkdir(parents=True, exist_ok=True)
                save_checkpoint(params, tmp / "models" / name / f"fold{f}.milm")
                tlog.write_csv(tmp / "models" / name / f"fold{f}_log.csv")
        write_manifest(tmp, "compare", cp, seed, inputs + [plan_path], t0)


def cmd_survival(cp, args, out: Path, seed: int, t0: float) -> None:
    cohort, target, inputs = _cohort(cp)
    plan, plan_path = _plan(cp, seed)
    name = cp.get("survival", "preset")
    ckpts = _models(Path(cp.get("survival", "models_dir")), name, plan.k)
    models = [load_checkpoint(p) for p in ckpts.values()]
    rows = []
    for mode in get_list(cp, "survival", "mode"):
        for cov in get_list(cp, "survival", "covariates"):
            try:
                res = score_prognosis(cohort, models, mode, cov)
            except ValueError as exc:
                raise ConfigError(f"[survival] {exc}") from exc
            rows += cox_rows(name, f"{mode}/{'UV' if cov == 'none' else 'MV'}", res)
    with staged(out) as tmp:
        write_csv(tmp / "survival.csv", rows, SURVIVAL_COLUMNS)
        write_manifest(tmp, "survival", cp, seed, inputs + [plan_path, *ckpts.values()], t0)


def cmd_heatmap(cp, args, out: Path, seed: int, t0: float) -> None:
    cohort, target, inputs = _cohort(cp)
    plan, plan_path = _plan(cp, seed)
    h = "heatmap"
    fold = get_typed(cp, h, "fold", int)
    models_dir = Path(cp.get(h, "models_dir"))
    clf = _models(models_dir, cp.get(h, "classification_preset"), plan.k)
    reg = _models(models_dir, cp.get(h, "regression_preset"), plan.k)
    if fold not in clf or fold not in reg:
        raise ConfigError(f"fold {fold} checkpoint missing for one of the heatmap presets")
    test_ids = sorted(plan.folds[fold].test_ids)
    values = cohort.targets(test_ids)
    n = min(get_typed(cp, h, "n_top", int), len(test_ids))
    chosen = select_top_expressers(cohort.subset(test_ids), values, n)
    with staged(out) as tmp:
        write_review_bundle(
            cohort, chosen, load_checkpoint(clf[fold]), load_checkpoint(reg[fold]), tmp,
            cp.get(h, "colormap"), get_typed(cp, h, "cell_px", int),
        )
        write_manifest(tmp, "heatmap", cp, seed, inputs + [plan_path, clf[fold], reg[fold]], t0)


def cmd_preprocess(cp, args, out: Path, seed: int, t0: float) -> None:
    p = "preprocess"
    raster_dir = _existing(cp, p, "raster_dir", "dir")
    rasters = sorted(f for f in raster_dir.iterdir() if f.suffix.lower() in (".png", ".ppm"))
    if not rasters:
        raise ConfigError(f"no PNG or PPM rasters in {raster_dir}")
    profile_path = cp.get(p, "target_profile").strip()
    target = read_stain_profile(_existing(cp, p, "target_profile")) if profile_path else reference_profile()
    canny = CannyConfig(
        get_typed(cp, p, "canny_sigma", float),
        get_typed(cp, p, "canny_low", float),
        get_typed(cp, p, "canny_high", float),
        get_typed(cp, p, "min_segment_px", int),
    )
    mpp = get_typed(cp, p, "mpp", float)
    rows = []
    with staged(out) as tmp:
        for f in rasters:
            rows += preprocess_raster(read_raster(f), f.stem, mpp, target, canny, tmp / "tiles").rows
        write_csv(tmp / "preprocess_manifest.csv", rows, MANIFEST_COLUMNS)
        inputs = [raster_dir] + ([Path(profile_path)] if profile_path else [])
        write_manifest(tmp, "preprocess", cp, seed, inputs, t0)


HANDLERS = {
    "synth": cmd_synth,
    "split": cmd_split,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "survival": cmd_survival,
    "heatmap": cmd_heatmap,
    "preprocess": cmd_preprocess,
}


# -- entry point ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="run config file (key = value sections)")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--jobs", type=int, help="worker cap for parallel folds")
    common.add_argument("--out", type=Path, help="artifact directory")
    common.add_argument("--preset", help="training preset, e.g. camil_regression or camil_regression+use_sgd")
    common.add_argument("--fold", type=int, help="single fold to train or render")
    common.add_argument("--print-config", action="store_true", help="print the merged config and exit")
    common.add_argument("overrides", nargs="*", metavar="section.key=value")
    parser = argparse.ArgumentParser(prog="camil", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=HELP[name])
    return parser


def _apply_flags(cp, args) -> None:
    if args.seed is not None:
        cp.set("run", "seed", str(args.seed))
    if args.jobs is not None:
        cp.set("run", "jobs", str(args.jobs))
    if args.preset is not None:
        base, _, ablation = args.preset.partition("+")
        cp.set("train", "preset", base)
        cp.set("train", "ablation", ablation)
        for section in ("evaluate", "survival"):
            cp.set(section, "preset", args.preset)
    if args.fold is not None:
        cp.set("train", "fold", str(args.fold))
        cp.set("heatmap", "fold", str(args.fold))


def _error(command: str, code: int, exc: BaseException) -> int:
    payload = {"stage": command, "exit_code": code, "error": type(exc).__name__, "message": str(exc)}
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        cp = load_config(args.config, args.overrides)
        _apply_flags(cp, args)
        if args.print_config:
            sys.stdout.write(dump_config(cp))
            return 0
        seed = get_typed(cp, "run", "seed", int)
        out = args.out or Path(cp.get("run", "out_root")) / args.command
    except ConfigError as exc:
        return _error(args.command, 2, exc)
    t0 = time.perf_counter()
    try:
        HANDLERS[args.command](cp, args, out, seed, t0)
    except (ConfigError, FileNotFoundError) as exc:
        return _error(args.command, 2, exc)
    except (CamilError, ValueError, ArithmeticError, OSError) as exc:
        return _error(args.command, 1, exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
