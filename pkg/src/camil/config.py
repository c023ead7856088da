"""Run configuration: flat ``key = value`` sections with includes and command-line overrides.

An ``[include]`` section lists files to read first (``files = a.ini, b.ini``,
relative to the including file); keys in the including file win. Overrides
given as ``section.key=value`` win over everything.
"""

from __future__ import annotations

import configparser
import io
from pathlib import Path

from .errors import CamilError


class ConfigError(CamilError, ValueError):
    pass


DEFAULTS: dict[str, dict[str, str]] = {
    "run": {"seed": "0", "jobs": "1", "out_root": "runs"},
    "cohort": {
        "name": "synthetic",
        "features_dir": "runs/synth/features",
        "clinical_table": "runs/synth/clinical.csv",
        "target": "target",
        "target_kind": "median_split",
        "cutoff": "",
        "direction": "positive_if_gt",
        "merge_slides": "concat",
    },
    "synth": {
        "n_patients": "200",
        "n_sites": "8",
        "instances_min": "16",
        "instances_max": "48",
        "d": "32",
        "signal_dim_count": "3",
        "signal_strength": "1.0",
        "label_noise_sd": "0.05",
        "hazard_coef": "-2.0",
        "site_shift_sd": "0.1",
        "target_kind": "fraction",
    },
    "split": {"k": "5", "val_frac": "0.2", "tol": "0.1", "plan": "runs/split/fold_plan.csv"},
    "train": {"preset": "camil_regression", "ablation": "", "fold": ""},
    "evaluate": {"models_dir": "runs/train", "preset": "camil_regression"},
    "compare": {
        "presets": "camil_classification, graziani_regression, camil_regression",
        "ablations": "",
        "reference": "camil_regression",
    },
    "survival": {
        "models_dir": "runs/train",
        "preset": "camil_regression",
        "mode": "continuous",
        "covariates": "none",
    },
    "heatmap": {
        "models_dir": "runs/train",
        "classification_preset": "camil_classification",
        "regression_preset": "camil_regression",
        "fold": "0",
        "n_top": "10",
        "colormap": "reds",
        "cell_px": "16",
    },
    "preprocess": {
        "raster_dir": "rasters",
        "mpp": "0.5",
        "target_profile": "",
        "canny_sigma": "1.4",
        "canny_low": "50",
        "canny_high": "150",
        "min_segment_px": "10",
    },
}


def _parser() -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    return cp


def _read_file(path: Path, cp: configparser.ConfigParser, seen: tuple[Path, ...]) -> None:
    path = path.resolve()
    if path in seen:
        raise ConfigError(f"include cycle through {path}")
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    own = _parser()
    try:
        own.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if own.has_section("include"):
        for name in own.get("include", "files", fallback="").split(","):
            if name.strip():
                _read_file(path.parent / name.strip(), cp, seen + (path,))
    for section in own.sections():
        if section == "include":
            continue
        if not cp.has_section(section):
            cp.add_section(section)
        for k, v in own.items(section):
            cp.set(section, k, v)


def load_config(path=None, overrides=()) -> configparser.ConfigParser:
    """Defaults, then the file (with includes), then ``section.key=value`` overrides."""
    cp = _parser()
    cp.read_dict(DEFAULTS)
    if path is not None:
        _read_file(Path(path), cp, ())
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, option = key.strip().partition(".")
        if not sep or not dot or not option:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section, option, value.strip())
    unknown = [s for s in cp.sections() if s not in DEFAULTS]
    if unknown:
        raise ConfigError(f"unknown config sections: {unknown}")
    return cp


def dump_config(cp: configparser.ConfigParser) -> str:
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def snapshot(cp: configparser.ConfigParser) -> dict[str, dict[str, str]]:
    return {s: dict(cp.items(s)) for s in cp.sections()}


def get_list(cp: configparser.ConfigParser, section: str, key: str) -> list[str]:
    return [x.strip() for x in cp.get(section, key, fallback="").split(",") if x.strip()]


def get_typed(cp: configparser.ConfigParser, section: str, key: str, kind):
    raw = cp.get(section, key)
    try:
        if kind is bool:
            return cp.getboolean(section, key)
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key} = {raw!r} is not a valid {kind.__name__}") from exc
