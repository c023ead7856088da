"""Tile preparation: tessellation, background rejection, brightness and stain normalization.

Tiles are 224 px squares covering 256 um of tissue, so the effective
resolution is about 1.14 microns per pixel whatever the scan resolution.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

from .errors import DegenerateError, FormatError

log = logging.getLogger(__name__)

TILE_PX = 224
TILE_EDGE_UM = 256.0
TARGET_P90 = 240.0
OD_I0 = 256.0
LUMA = np.array([0.299, 0.587, 0.114])
MANIFEST_COLUMNS = ("slide_id", "x", "y", "rejected", "reject_reason")


@dataclass(frozen=True)
class Patch:
    pixels: np.ndarray
    grid_pos: tuple[int, int] = (0, 0)
    source_mpp: float = TILE_EDGE_UM / TILE_PX

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.shape != (TILE_PX, TILE_PX, 3):
            raise ValueError(f"patch must be {TILE_PX}x{TILE_PX}x3, got {px.shape}")
        if px.dtype != np.uint8:
            raise ValueError(f"patch pixels must be uint8, got {px.dtype}")
        if not self.source_mpp > 0:
            raise ValueError("source_mpp must be positive")
        px = px.copy()
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "grid_pos", (int(self.grid_pos[0]), int(self.grid_pos[1])))

    def with_pixels(self, pixels: np.ndarray) -> "Patch":
        return Patch(pixels, self.grid_pos, self.source_mpp)


@dataclass(frozen=True)
class StainProfile:
    """Unit optical-density directions (hematoxylin, eosin) and their 99th-percentile concentrations."""

    stain_matrix: np.ndarray
    max_concentrations: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.stain_matrix, dtype=np.float64)
        c = np.asarray(self.max_concentrations, dtype=np.float64)
        if m.shape != (3, 2) or c.shape != (2,):
            raise ValueError("stain matrix must be 3x2 and concentrations a 2-vector")
        if not (np.isfinite(m).all() and np.isfinite(c).all()):
            raise ValueError("stain profile must be finite")
        if not (c > 0).all():
            raise ValueError("max concentrations must be positive")
        norms = np.linalg.norm(m, axis=0)
        if not (norms > 0).all():
            raise ValueError("stain vectors must be non-zero")
        m = m / norms
        m.setflags(write=False)
        c = c.copy()
        c.setflags(write=False)
        object.__setattr__(self, "stain_matrix", m)
        object.__setattr__(self, "max_concentrations", c)


@dataclass(frozen=True)
class TileGrid:
    """Non-overlapping top-left anchored grid; positions are (column, row) indices."""

    source_extent_px: int
    positions: tuple[tuple[int, int], ...]
    tile_edge_um: float = TILE_EDGE_UM
    tile_px: int = TILE_PX

    @property
    def output_mpp(self) -> float:
        return self.tile_edge_um / self.tile_px

    def origin(self, pos: tuple[int, int]) -> tuple[int, int]:
        """Top-left pixel of a tile in the source raster."""
        return pos[0] * self.source_extent_px, pos[1] * self.source_extent_px


@dataclass(frozen=True)
class CannyConfig:
    sigma: float = 1.4
    low: float = 50.0
    high: float = 150.0
    min_len: int = 10
    max_segments: int = 2


def build_tile_grid(raster_w: int, raster_h: int, source_mpp: float) -> TileGrid:
    if not source_mpp > 0:
        raise ValueError("source_mpp must be positive")
    extent = int(round(TILE_EDGE_UM / source_mpp))
    if extent < 1:
        raise ValueError(f"source_mpp {source_mpp} gives an empty tile extent")
    nx, ny = raster_w // extent, raster_h // extent
    if nx == 0 or ny == 0:
        log.warning("raster %dx%d is smaller than one %d px tile; grid is empty", raster_w, raster_h, extent)
        return TileGrid(extent, ())
    positions = tuple((x, y) for y in range(ny) for x in range(nx))
    return TileGrid(extent, positions)


def extract_tiles(raster: np.ndarray, grid: TileGrid, source_mpp: float) -> list[Patch]:
    """Cut grid squares out of an RGB raster and resample them to 224 px (bilinear)."""
    raster = np.asarray(raster)
    if raster.ndim != 3 or raster.shape[2] != 3 or raster.dtype != np.uint8:
        raise ValueError("raster must be an HxWx3 uint8 array")
    e = grid.source_extent_px
    out = []
    for pos in grid.positions:
        x0, y0 = grid.origin(pos)
        sq = raster[y0 : y0 + e, x0 : x0 + e]
        if e != grid.tile_px:
            sq = cv2.resize(sq, (grid.tile_px, grid.tile_px), interpolation=cv2.INTER_LINEAR)
        out.append(Patch(np.ascontiguousarray(sq), pos, source_mpp))
    return out


def edge_segments(pixels: np.ndarray, cfg: CannyConfig = CannyConfig()) -> int:
    """Number of 8-connected Canny edge components with at least ``min_len`` pixels."""
    gray = cv2.cvtColor(np.ascontiguousarray(pixels), cv2.COLOR_RGB2GRAY)
    blurred = cv2.GaussianBlur(gray, (0, 0), cfg.sigma)
    edges = cv2.Canny(blurred, cfg.low, cfg.high)
    n, _, stats, _ = cv2.connectedComponentsWithStats(edges, connectivity=8)
    # label 0 is the background
    return int((stats[1:, cv2.CC_STAT_AREA] >= cfg.min_len).sum())


def reject_patch(p: Patch, canny_cfg: CannyConfig = CannyConfig()) -> bool:
    """True when the patch shows too few edges to be in-focus tissue."""
    return edge_segments(p.pixels, canny_cfg) <= canny_cfg.max_segments


def luminance(pixels: np.ndarray) -> np.ndarray:
    return np.asarray(pixels, dtype=np.float64) @ LUMA


def standardize_brightness(p: Patch) -> Patch:
    """Scale all channels so the 90th-percentile luminance lands on 240.

    Rounding to 8 bits moves the percentile by at most half a level, so a
    patch already within that band is returned unchanged. This keeps the
    operation idempotent.
    """
    p90 = float(np.percentile(luminance(p.pixels), 90))
    if p90 <= 0:
        raise DegenerateError("no signal: 90th-percentile luminance is zero")
    if abs(p90 - TARGET_P90) <= 0.5:
        return p
    scaled = np.rint(p.pixels.astype(np.float64) * (TARGET_P90 / p90))
    return p.with_pixels(np.clip(scaled, 0, 255).astype(np.uint8))


def optical_density(pixels: np.ndarray) -> np.ndarray:
    """Base-10 optical density, one row per pixel."""
    rgb = np.asarray(pixels, dtype=np.float64).reshape(-1, 3)
    return -np.log10((rgb + 1.0) / OD_I0)


def _nnls2(od: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Nonnegative least squares for every row of ``od`` against two columns.

    With two unknowns the active-set solution is one of four candidates
    (both free, either alone, none); the best feasible one is exact.
    """
    g = m.T @ m
    b = od @ m  # (n, 2)
    both = np.linalg.solve(g, b.T).T
    c0 = np.clip(b[:, 0] / g[0, 0], 0, None)
    c1 = np.clip(b[:, 1] / g[1, 1], 0, None)
    cands = np.stack(
        [
            both,
            np.stack([c0, np.zeros_like(c0)], axis=1),
            np.stack([np.zeros_like(c1), c1], axis=1),
            np.zeros_like(both),
        ]
    )  # (4, n, 2)
    resid = ((od[None] - cands @ m.T) ** 2).sum(axis=2)
    resid[0, (both < 0).any(axis=1)] = np.inf
    pick = resid.argmin(axis=0)
    return cands[pick, np.arange(od.shape[0])]


def stain_concentrations(pixels: np.ndarray, stain_matrix: np.ndarray) -> np.ndarray:
    return _nnls2(optical_density(pixels), np.asarray(stain_matrix, dtype=np.float64))


def estimate_stains(p: Patch | np.ndarray, alpha: float = 1.0, beta: float = 0.15) -> StainProfile:
    """Estimate the two stain directions from the optical-density scatter of a patch."""
    pixels = p.pixels if isinstance(p, Patch) else np.asarray(p)
    od = optical_density(pixels)
    tissue = od[(od >= beta).any(axis=1)]
    if tissue.shape[0] < 0.1 * od.shape[0] or tissue.shape[0] < 3:
        raise DegenerateError(
            f"insufficient tissue: {tissue.shape[0]} of {od.shape[0]} pixels above OD {beta}"
        )
    cov = np.cov(tissue, rowvar=False)
    evals, evecs = np.linalg.eigh(cov)
    if not np.isfinite(evals).all() or evals[1] <= 1e-12 * max(evals[2], 1e-300):
        raise DegenerateError("degenerate stain: optical density scatter has rank below two")
    plane = evecs[:, [2, 1]]
    # orient the plane so stain directions come out with positive OD
    plane = plane * np.where(plane.sum(axis=0) < 0, -1.0, 1.0)
    proj = tissue @ plane
    phi = np.arctan2(proj[:, 1], proj[:, 0])
    lo, hi = np.percentile(phi, [alpha, 100.0 - alpha])
    v_lo = plane @ np.array([math.cos(lo), math.sin(lo)])
    v_hi = plane @ np.array([math.cos(hi), math.sin(hi)])
    # hematoxylin absorbs more red light than eosin
    he = np.stack([v_lo, v_hi], axis=1) if v_lo[0] > v_hi[0] else np.stack([v_hi, v_lo], axis=1)
    he = he / np.linalg.norm(he, axis=0)
    if abs(np.linalg.det(he.T @ he)) < 1e-10:
        raise DegenerateError("degenerate stain: the two stain directions coincide")
    conc = _nnls2(od, he)
    max_c = np.percentile(conc, 99, axis=0)
    if not (max_c > 0).all():
        raise DegenerateError("degenerate stain: a stain has zero concentration")
    return StainProfile(he, max_c)


def normalize_patch(p: Patch, source: StainProfile, target: StainProfile) -> Patch:
    """Re-express a patch's stain concentrations in the target stain basis."""
    conc = stain_concentrations(p.pixels, source.stain_matrix)
    conc = conc * (target.max_concentrations / source.max_concentrations)
    od = conc @ target.stain_matrix.T
    rgb = OD_I0 * np.power(10.0, -od) - 1.0
    rgb = np.clip(np.rint(rgb), 0, 255).astype(np.uint8)
    return p.with_pixels(rgb.reshape(p.pixels.shape))


def render_stains(concentrations: np.ndarray, stain_matrix: np.ndarray, shape=(TILE_PX, TILE_PX)) -> np.ndarray:
    """RGB image from per-pixel concentrations through a stain matrix (inverse of the OD map)."""
    od = np.asarray(concentrations, dtype=np.float64).reshape(-1, 2) @ np.asarray(stain_matrix).T
    rgb = np.clip(np.rint(OD_I0 * np.power(10.0, -od) - 1.0), 0, 255).astype(np.uint8)
    return rgb.reshape(*shape, 3)


# --- files -----------------------------------------------------------------


def write_stain_profile(path, profile: StainProfile) -> None:
    m, c = profile.stain_matrix, profile.max_concentrations
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "hematoxylin", "eosin"])
        for name, row in zip("rgb", m):
            w.writerow([name, repr(float(row[0])), repr(float(row[1]))])
        w.writerow(["max_concentration", repr(float(c[0])), repr(float(c[1]))])


def _parse_stain_profile(lines) -> StainProfile:
    rows = {}
    for rec in csv.DictReader(lines):
        try:
            rows[rec["row"]] = (float(rec["hematoxylin"]), float(rec["eosin"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad stain profile row {rec!r}") from exc
    missing = {"r", "g", "b", "max_concentration"} - rows.keys()
    if missing:
        raise FormatError(f"stain profile is missing rows {sorted(missing)}")
    return StainProfile(np.array([rows["r"], rows["g"], rows["b"]]), np.array(rows["max_concentration"]))


def read_stain_profile(path) -> StainProfile:
    with open(path, newline="") as fh:
        return _parse_stain_profile(fh)


def reference_profile() -> StainProfile:
    """Checked-in target profile used when no target image is supplied."""
    text = resources.files("camil").joinpath("data/reference_stain_profile.csv").read_text()
    return _parse_stain_profile(text.splitlines())


def read_raster(path) -> np.ndarray:
    """Load a PNG or PPM file as an HxWx3 uint8 array."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def write_png(path, pixels: np.ndarray) -> None:
    Image.fromarray(np.asarray(pixels, dtype=np.uint8), mode="RGB").save(path, format="PNG")


@dataclass
class PreprocessResult:
    slide_id: str
    rows: list[dict] = field(default_factory=list)
    kept: list[Patch] = field(default_factory=list)


def preprocess_raster(
    raster: np.ndarray,
    slide_id: str,
    source_mpp: float,
    target: StainProfile | None = None,
    canny_cfg: CannyConfig = CannyConfig(),
    out_dir=None,
) -> PreprocessResult:
    """Run the tile pipeline on one raster and optionally write the kept tiles as PNG."""
    target = target or reference_profile()
    grid = build_tile_grid(raster.shape[1], raster.shape[0], source_mpp)
    res = PreprocessResult(slide_id)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    for patch in extract_tiles(raster, grid, source_mpp):
        x, y = patch.grid_pos
        reason = ""
        if reject_patch(patch, canny_cfg):
            reason = "few_edges"
        else:
            try:
                patch = standardize_brightness(patch)
                patch = normalize_patch(patch, estimate_stains(patch), target)
            except DegenerateError as exc:
                reason = str(exc).split(":")[0].replace(" ", "_")
        res.rows.append(
            {"slide_id": slide_id, "x": x, "y": y, "rejected": int(bool(reason)), "reject_reason": reason}
        )
        if not reason:
            res.kept.append(patch)
            if out_dir is not None:
                write_png(Path(out_dir) / f"{slide_id}__{x}_{y}.png", patch.pixels)
    return res


def write_manifest(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=MANIFEST_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)
