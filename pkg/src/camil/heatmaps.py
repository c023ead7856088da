"""Attention heatmaps on the patch grid and top-expresser selection for review."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
from PIL import Image

from .attmil import ModelParams, forward_bag, predict_scores
from .data_model import FeatureBag

log = logging.getLogger(__name__)

# light and dark endpoints of single-hue ramps (sRGB)
COLORMAPS = {
    "reds": ((255, 245, 240), (103, 0, 13)),
    "blues": ((247, 251, 255), (8, 48, 107)),
    "greys": ((255, 255, 255), (0, 0, 0)),
}
HEATMAP_COLUMNS = ("x", "y", "attention_raw", "attention_norm")


@dataclass(frozen=True)
class AttentionMap:
    grid_w: int
    grid_h: int
    attention: np.ndarray
    coords: np.ndarray
    model_id: str = ""

    def __post_init__(self):
        a = np.asarray(self.attention, dtype=np.float64)
        c = np.asarray(self.coords, dtype=np.int64)
        if a.ndim != 1 or a.size == 0 or c.shape != (a.size, 2):
            raise ValueError("one (x, y) coordinate per attention value is required")
        if (a < 0).any() or abs(a.sum() - 1.0) > 1e-6:
            raise ValueError("attention must be nonnegative and sum to 1")
        if (c < 0).any() or c[:, 0].max() >= self.grid_w or c[:, 1].max() >= self.grid_h:
            raise ValueError("coordinates fall outside the grid")
        a.setflags(write=False)
        c.setflags(write=False)
        object.__setattr__(self, "attention", a)
        object.__setattr__(self, "coords", c)


def extract_attention(bag: FeatureBag, model: ModelParams, model_id: str = "") -> AttentionMap:
    """Eval-mode attention over a bag, aligned with its tile coordinates."""
    if bag.tile_coords is None:
        raise ValueError("bag has no tile coordinates; attention cannot be placed on a grid")
    att = forward_bag(bag, model).attention
    coords = np.asarray(bag.tile_coords, dtype=np.int64)
    w, h = (coords.max(axis=0) + 1).tolist()
    return AttentionMap(int(w), int(h), att, coords, model_id or model.preset)


def normalize_attention(att: np.ndarray) -> np.ndarray:
    """Min-max scaling to [0, 1]; a constant map becomes 0.5 everywhere."""
    att = np.asarray(att, dtype=np.float64)
    lo, hi = att.min(), att.max()
    if hi <= lo:
        log.warning("constant attention; rendering the colormap midpoint")
        return np.full_like(att, 0.5)
    return (att - lo) / (hi - lo)


def apply_colormap(values: np.ndarray, colormap: str = "reds") -> np.ndarray:
    try:
        lo, hi = (np.array(c, dtype=np.float64) for c in COLORMAPS[colormap])
    except KeyError:
        raise ValueError(f"unknown colormap {colormap!r}; choose from {sorted(COLORMAPS)}") from None
    v = np.asarray(values, dtype=np.float64)[..., None]
    return np.rint(lo + v * (hi - lo)).astype(np.uint8)


def render_heatmap(amap: AttentionMap, out, colormap: str = "reds", cell_px: int = 16) -> Path:
    """Write an RGBA PNG (transparent where no patch) and a CSV beside it.

    Returns the PNG path; the CSV shares its stem.
    """
    if cell_px < 1:
        raise ValueError("cell_px must be positive")
    out = Path(out)
    norm = normalize_attention(amap.attention)
    colors = apply_colormap(norm, colormap)
    img = np.zeros((amap.grid_h, amap.grid_w, 4), dtype=np.uint8)
    xs, ys = amap.coords[:, 0], amap.coords[:, 1]
    img[ys, xs, :3] = colors
    img[ys, xs, 3] = 255
    img = np.repeat(np.repeat(img, cell_px, axis=0), cell_px, axis=1)
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img, mode="RGBA").save(out, format="PNG")
    with open(out.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HEATMAP_COLUMNS)
        for (x, y), raw, n in zip(amap.coords.tolist(), amap.attention, norm):
            w.writerow([x, y, repr(float(raw)), repr(float(n))])
    return out


def select_top_expressers(cohort, target_values: Mapping[str, float], n: int) -> list[str]:
    """Highest-target patients first, ties broken by patient id."""
    ids = [p for p in cohort.patient_ids if p in target_values]
    if n > len(ids):
        raise ValueError(f"asked for {n} patients but only {len(ids)} have a target")
    ids.sort(key=lambda p: (-float(target_values[p]), p))
    return ids[:n]


def write_review_bundle(
    cohort,
    patient_ids,
    clf_model: ModelParams,
    reg_model: ModelParams,
    out_dir,
    colormap: str = "reds",
    cell_px: int = 16,
) -> Path:
    """Side-by-side classification and regression maps per patient plus a metadata table."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for pid in patient_ids:
        bag = cohort.bags[pid]
        for tag, model in (("classification", clf_model), ("regression", reg_model)):
            render_heatmap(extract_attention(bag, model, tag), out_dir / pid / f"{tag}.png", colormap, cell_px)
        rows.append(
            {
                "patient_id": pid,
                "target": cohort.records[pid].target_value,
                "classification_score": float(predict_scores(clf_model, [bag])[0]),
                "regression_score": float(predict_scores(reg_model, [bag])[0]),
            }
        )
    with open(out_dir / "metadata.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["patient_id"], lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return out_dir
