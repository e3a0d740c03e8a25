"""Image-side preprocessing: tiling, background exclusion, stain normalization.

Slides are ingested as plain raster images, tiled into non-overlapping
256x256 patches, filtered by an Otsu tissue mask on a downscaled thumbnail
plus a minimum grayscale standard deviation, and optionally rewritten in
Reinhard (statistics matching in l-alpha-beta space) and Macenko (optical
density stain-vector estimation) normalized variants.
"""

from __future__ import annotations

import csv
import io
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import CapacityError, DataError, DegenerateStainError, ParameterError
from .seeding import rng_for

logger = logging.getLogger(__name__)

OD_I0 = 256.0  # transmitted-light reference with +1 offset so log stays finite
OD_BETA = 0.15  # transparency threshold on every OD channel
STAIN_ALPHA = 1.0  # percentile for the extreme stain angles
MIN_TISSUE_PIXELS = 100

# Ruderman opponent color space used by the statistics-matching normalizer.
# The inverse is computed numerically: the published 4-decimal inverse is too
# coarse to round-trip within one intensity level.
_RGB2LMS = np.array(
    [
        [0.3811, 0.5783, 0.0402],
        [0.1967, 0.7244, 0.0782],
        [0.0241, 0.1288, 0.8444],
    ]
)
_LMS2RGB = np.linalg.inv(_RGB2LMS)
_A = np.array([[1.0, 1.0, 1.0], [1.0, 1.0, -2.0], [1.0, -1.0, 0.0]])
_B = np.diag([1.0 / np.sqrt(3.0), 1.0 / np.sqrt(6.0), 1.0 / np.sqrt(2.0)])
_LOGLMS2LAB = _B @ _A
_LAB2LOGLMS = _A.T @ _B


@dataclass
class RgbPatch:
    """One 8-bit sRGB patch with its slide coordinates."""

    pixels: np.ndarray  # H x W x 3 uint8
    patch_id: str = ""
    slide_id: str = ""
    x: int = 0
    y: int = 0
    level: int = 0

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.dtype != np.uint8:
            raise ParameterError(f"patch pixels must be uint8, got {self.pixels.dtype}")
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ParameterError(f"patch must be HxWx3, got shape {self.pixels.shape}")


@dataclass
class ReinhardTarget:
    means: np.ndarray  # per-channel means in l-alpha-beta
    stds: np.ndarray

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        self.stds = np.asarray(self.stds, dtype=np.float64)
        if np.any(self.stds <= 0):
            raise DataError("Reinhard target stds must be strictly positive")


@dataclass
class MacenkoTarget:
    stain_matrix: np.ndarray  # 3x2, unit-norm columns: hematoxylin, eosin
    max_concentrations: np.ndarray  # 2

    def __post_init__(self):
        self.stain_matrix = np.asarray(self.stain_matrix, dtype=np.float64)
        self.max_concentrations = np.asarray(self.max_concentrations, dtype=np.float64)
        norms = np.linalg.norm(self.stain_matrix, axis=0)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise DataError(f"stain matrix columns must be unit norm, got {norms}")
        if np.any(self.stain_matrix < 0):
            raise DataError("stain matrix entries must be non-negative")


# -- grayscale & masks ---------------------------------------------------------------


def luma(pixels: np.ndarray) -> np.ndarray:
    """Rec. 601 grayscale of an RGB array, as float64."""
    p = np.asarray(pixels, dtype=np.float64)
    return 0.299 * p[..., 0] + 0.587 * p[..., 1] + 0.114 * p[..., 2]


def otsu_threshold(histogram: np.ndarray) -> int:
    """Smallest threshold t maximizing between-class variance of {<t, >=t}."""
    h = np.asarray(histogram, dtype=np.float64)
    if h.shape != (256,):
        raise ParameterError(f"histogram must have 256 bins, got shape {h.shape}")
    total = h.sum()
    if total <= 0:
        raise ParameterError("histogram is empty")
    nonzero = np.flatnonzero(h)
    if len(nonzero) == 1:
        logger.warning("degenerate histogram: all mass in bin %d", int(nonzero[0]))
        return int(nonzero[0])

    p = h / total
    w0 = np.concatenate([[0.0], np.cumsum(p)])[:-1]  # mass strictly below t
    cum_mean = np.concatenate([[0.0], np.cumsum(p * np.arange(256))])[:-1]
    grand_mean = float(np.sum(p * np.arange(256)))
    w1 = 1.0 - w0
    with np.errstate(invalid="ignore", divide="ignore"):
        mu0 = np.where(w0 > 0, cum_mean / np.where(w0 > 0, w0, 1.0), 0.0)
        mu1 = np.where(w1 > 0, (grand_mean - cum_mean) / np.where(w1 > 0, w1, 1.0), 0.0)
        between = w0 * w1 * (mu0 - mu1) ** 2
    return int(np.argmax(between))  # argmax returns the smallest maximizing t


def tissue_mask(thumbnail: np.ndarray) -> np.ndarray:
    """Boolean mask of tissue pixels: darker than the Otsu threshold."""
    thumb = np.asarray(thumbnail)
    if thumb.ndim != 2:
        raise ParameterError(f"thumbnail must be 2-D grayscale, got shape {thumb.shape}")
    hist = np.bincount(thumb.astype(np.uint8).ravel(), minlength=256)[:256]
    t = otsu_threshold(hist)
    return thumb < t


def patch_std_filter(
    patch: RgbPatch, min_std: float = 8.0, per_channel: bool = False
) -> bool:
    """Keep a patch when its intensity spread reaches ``min_std``.

    Grayscale by default; with ``per_channel`` any single channel reaching
    the threshold keeps the patch.
    """
    if per_channel:
        stds = patch.pixels.astype(np.float64).std(axis=(0, 1))
        return bool(stds.max() >= min_std)
    return bool(luma(patch.pixels).std() >= min_std)


def block_mean(gray: np.ndarray, factor: int) -> np.ndarray:
    """Downscale by averaging factor x factor blocks (truncating edges)."""
    h, w = gray.shape
    h2, w2 = (h // factor) * factor, (w // factor) * factor
    blocks = gray[:h2, :w2].reshape(h2 // factor, factor, w2 // factor, factor)
    return blocks.mean(axis=(1, 3))


# -- Reinhard normalization -----------------------------------------------------------


def rgb_to_lab(pixels: np.ndarray) -> np.ndarray:
    """uint8 sRGB to Ruderman l-alpha-beta (log-LMS opponent space)."""
    rgb = np.asarray(pixels, dtype=np.float64) / 255.0
    lms = rgb @ _RGB2LMS.T
    lms = np.maximum(lms, 1e-6)  # pure black would take log(0)
    return np.log10(lms) @ _LOGLMS2LAB.T


def lab_to_rgb(lab: np.ndarray) -> np.ndarray:
    """Inverse of :func:`rgb_to_lab`, clamped and quantized to uint8."""
    lms = np.power(10.0, np.asarray(lab, dtype=np.float64) @ _LAB2LOGLMS.T)
    rgb = lms @ _LMS2RGB.T
    return np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)


def lab_channel_stats(lab: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    flat = lab.reshape(-1, 3)
    return flat.mean(axis=0), flat.std(axis=0)


def reinhard_fit(pool: list[RgbPatch]) -> ReinhardTarget:
    """Average per-patch channel statistics over a reference pool."""
    if not pool:
        raise ParameterError("reference pool is empty")
    means = []
    stds = []
    for patch in pool:
        m, s = lab_channel_stats(rgb_to_lab(patch.pixels))
        means.append(m)
        stds.append(s)
    return ReinhardTarget(means=np.mean(means, axis=0), stds=np.mean(stds, axis=0))


def match_lab_stats(lab: np.ndarray, target: ReinhardTarget) -> np.ndarray:
    """Affine map taking each channel's statistics onto the target's.

    Channels with vanishing spread are shifted only, so flat inputs do not
    blow up; idempotent in continuous space.
    """
    mean, std = lab_channel_stats(lab)
    scale = np.ones(3)
    for c in range(3):
        if std[c] < 1e-6:
            logger.warning("channel %d has no spread; shifting without scaling", c)
        else:
            scale[c] = target.stds[c] / std[c]
    return (lab - mean) * scale + target.means


def reinhard_apply(patch: RgbPatch, target: ReinhardTarget) -> RgbPatch:
    """Match the patch's l-alpha-beta statistics to the target."""
    lab = match_lab_stats(rgb_to_lab(patch.pixels), target)
    return replace(patch, pixels=lab_to_rgb(lab))


# -- Macenko normalization ------------------------------------------------------------


def rgb_to_od(pixels: np.ndarray) -> np.ndarray:
    """Optical density, flattened to (n_pixels, 3)."""
    i = np.asarray(pixels, dtype=np.float64).reshape(-1, 3)
    return -np.log10((i + 1.0) / OD_I0)


def od_to_rgb(od: np.ndarray) -> np.ndarray:
    i = OD_I0 * np.power(10.0, -od) - 1.0
    return np.clip(np.round(i), 0, 255).astype(np.uint8)


def od_tissue_rows(od: np.ndarray, beta: float = OD_BETA) -> np.ndarray:
    """Rows whose every OD channel exceeds the transparency threshold."""
    return od[np.all(od > beta, axis=1)]


def macenko_applicable(patch: RgbPatch, min_tissue: int = MIN_TISSUE_PIXELS) -> bool:
    """Whether the patch holds enough stained pixels to estimate stains."""
    return len(od_tissue_rows(rgb_to_od(patch.pixels))) >= min_tissue


def estimate_stain_matrix(od_tissue: np.ndarray, alpha: float = STAIN_ALPHA) -> np.ndarray:
    """Two extreme stain directions in the top-2 OD eigenplane.

    Columns are unit-norm with hematoxylin first (larger blue-channel OD);
    small negative entries from percentile noise are clipped to zero before
    renormalizing.
    """
    cov = np.cov(od_tissue.T)
    evals, evecs = np.linalg.eigh(cov)
    if evals[1] <= 1e-10 * max(evals[2], 1e-30) or evals[2] <= 0:
        raise DegenerateStainError("optical density covariance is rank deficient")
    basis = evecs[:, [2, 1]]
    flip = basis[np.argmax(np.abs(basis), axis=0), np.arange(2)] < 0
    basis[:, flip] *= -1.0

    theta = od_tissue @ basis
    phi = np.arctan2(theta[:, 1], theta[:, 0])
    lo, hi = np.percentile(phi, [alpha, 100.0 - alpha])
    v_lo = basis @ np.array([np.cos(lo), np.sin(lo)])
    v_hi = basis @ np.array([np.cos(hi), np.sin(hi)])
    hematoxylin, eosin = (v_lo, v_hi) if v_lo[2] > v_hi[2] else (v_hi, v_lo)

    stains = np.column_stack([hematoxylin, eosin])
    stains = np.maximum(stains, 0.0)
    norms = np.linalg.norm(stains, axis=0)
    if np.any(norms < 1e-12):
        raise DegenerateStainError("stain direction collapsed to zero after clipping")
    return stains / norms


def stain_concentrations(od: np.ndarray, stain_matrix: np.ndarray) -> np.ndarray:
    """Least-squares concentrations (2 x n_pixels) for every pixel."""
    return np.linalg.lstsq(stain_matrix, od.T, rcond=None)[0]


def macenko_fit(
    pool: list[RgbPatch],
    beta: float = OD_BETA,
    alpha: float = STAIN_ALPHA,
    min_tissue: int = MIN_TISSUE_PIXELS,
) -> MacenkoTarget:
    """Fit stain matrix and reference concentrations from a patch pool.

    Per-patch stain matrices and 99th-percentile concentrations are
    averaged; the averaged columns are renormalized to unit length.
    """
    if not pool:
        raise ParameterError("reference pool is empty")
    matrices = []
    max_cs = []
    for patch in pool:
        od = rgb_to_od(patch.pixels)
        tissue = od_tissue_rows(od, beta)
        if len(tissue) < min_tissue:
            logger.warning("patch %s: too few tissue pixels for stain fit", patch.patch_id)
            continue
        stains = estimate_stain_matrix(tissue, alpha)
        conc = stain_concentrations(od, stains)
        matrices.append(stains)
        max_cs.append(np.percentile(conc, 99, axis=1))
    if not matrices:
        raise CapacityError("no patch in the pool has enough tissue pixels")
    mean_matrix = np.mean(matrices, axis=0)
    mean_matrix /= np.linalg.norm(mean_matrix, axis=0)
    return MacenkoTarget(stain_matrix=mean_matrix, max_concentrations=np.mean(max_cs, axis=0))


def macenko_apply(
    patch: RgbPatch,
    target: MacenkoTarget,
    beta: float = OD_BETA,
    alpha: float = STAIN_ALPHA,
    min_tissue: int = MIN_TISSUE_PIXELS,
) -> RgbPatch:
    """Re-express the patch in the target's stain basis and concentration range.

    Patches without enough stained pixels pass through unchanged (see
    :func:`macenko_applicable`).
    """
    od = rgb_to_od(patch.pixels)
    tissue = od_tissue_rows(od, beta)
    if len(tissue) < min_tissue:
        logger.warning(
            "patch %s: %d tissue pixels < %d, skipping normalization",
            patch.patch_id, len(tissue), min_tissue,
        )
        return replace(patch, pixels=patch.pixels.copy())
    stains = estimate_stain_matrix(tissue, alpha)
    conc = stain_concentrations(od, stains)
    max_c = np.percentile(conc, 99, axis=1)
    scale = np.where(max_c > 1e-8, target.max_concentrations / np.maximum(max_c, 1e-8), 1.0)
    od_new = (target.stain_matrix @ (conc * scale[:, None])).T
    pixels = od_to_rgb(od_new).reshape(patch.pixels.shape)
    return replace(patch, pixels=pixels)


# -- patch extraction pipeline ---------------------------------------------------------


@dataclass
class PipelineConfig:
    out_dir: Path
    patch_size: int = 256
    thumb_scale: int = 32
    min_std: float = 8.0
    per_channel_std: bool = False
    tissue_fraction: float = 0.5
    reinhard: bool = True
    macenko: bool = True
    target_pool_size: int = 500
    seed: int = 0

    def __post_init__(self):
        self.out_dir = Path(self.out_dir)
        if self.patch_size < 1 or self.thumb_scale < 1:
            raise ParameterError("patch_size and thumb_scale must be positive")
        if self.patch_size % self.thumb_scale != 0:
            raise ParameterError("patch_size must be a multiple of thumb_scale")


@dataclass
class PipelineResult:
    manifest_path: Path
    n_kept: int
    n_dropped: int
    reinhard_target: ReinhardTarget | None = None
    macenko_target: MacenkoTarget | None = None
    manifest_rows: list = field(default_factory=list)


MANIFEST_HEADER = ["patch_id", "slide_id", "x", "y", "variant", "kept", "reason"]


def _tile_slide(image: np.ndarray, slide_id: str, config: PipelineConfig):
    """Yield (patch, kept, reason) for every full tile of one slide."""
    ps = config.patch_size
    h, w = image.shape[:2]
    thumb = np.round(block_mean(luma(image), config.thumb_scale)).astype(np.uint8)
    mask = tissue_mask(thumb)
    cells = ps // config.thumb_scale
    for y in range(0, h - ps + 1, ps):
        for x in range(0, w - ps + 1, ps):
            patch = RgbPatch(
                pixels=image[y : y + ps, x : x + ps].copy(),
                patch_id=f"{slide_id}_x{x}_y{y}",
                slide_id=slide_id,
                x=x,
                y=y,
            )
            ty, tx = y // config.thumb_scale, x // config.thumb_scale
            footprint = mask[ty : ty + cells, tx : tx + cells]
            if footprint.mean() < config.tissue_fraction:
                yield patch, False, "background"
            elif not patch_std_filter(patch, config.min_std, config.per_channel_std):
                yield patch, False, "low_std"
            else:
                yield patch, True, ""


def run_patch_pipeline(slide_paths: list, config: PipelineConfig) -> PipelineResult:
    """Tile slides, filter background and flat patches, write variants.

    Emits PNGs under ``out_dir/patches`` plus a manifest CSV mapping each
    patch and variant to its slide, coordinates and keep decision. The
    manifest is written atomically and in deterministic (slide, x, y,
    variant) order, so identical inputs reproduce identical bytes.
    """
    out_dir = Path(config.out_dir)
    patches_dir = out_dir / "patches"
    patches_dir.mkdir(parents=True, exist_ok=True)

    kept: list[RgbPatch] = []
    rows: list[list] = []
    for path in sorted(Path(p) for p in slide_paths):
        slide_id = path.stem
        try:
            image = np.asarray(Image.open(path).convert("RGB"))
        except (OSError, ValueError) as exc:
            logger.error("skipping unreadable slide %s: %s", path, exc)
            continue
        for patch, keep, reason in _tile_slide(image, slide_id, config):
            if keep:
                kept.append(patch)
            else:
                rows.append([patch.patch_id, slide_id, patch.x, patch.y, "raw", False, reason])

    reinhard_target = macenko_target = None
    if kept and (config.reinhard or config.macenko):
        rng = rng_for(config.seed, "stain-targets")
        pool_size = min(config.target_pool_size, len(kept))
        pool = [kept[i] for i in sorted(rng.choice(len(kept), size=pool_size, replace=False))]
        if config.reinhard:
            reinhard_target = reinhard_fit(pool)
        if config.macenko:
            macenko_target = macenko_fit(pool)

    for patch in kept:
        Image.fromarray(patch.pixels).save(patches_dir / f"{patch.patch_id}__raw.png")
        rows.append([patch.patch_id, patch.slide_id, patch.x, patch.y, "raw", True, ""])
        if reinhard_target is not None:
            norm = reinhard_apply(patch, reinhard_target)
            Image.fromarray(norm.pixels).save(patches_dir / f"{patch.patch_id}__reinhard.png")
            rows.append([patch.patch_id, patch.slide_id, patch.x, patch.y, "reinhard", True, ""])
        if macenko_target is not None:
            reason = ""
            if macenko_applicable(patch):
                norm = macenko_apply(patch, macenko_target)
            else:
                norm = patch
                reason = "macenko_skipped"
            Image.fromarray(norm.pixels).save(patches_dir / f"{patch.patch_id}__macenko.png")
            rows.append(
                [patch.patch_id, patch.slide_id, patch.x, patch.y, "macenko", True, reason]
            )

    variant_order = {"raw": 0, "reinhard": 1, "macenko": 2}
    rows.sort(key=lambda r: (r[1], r[2], r[3], variant_order[r[4]]))

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_HEADER)
    writer.writerows(rows)
    manifest_path = out_dir / "manifest.csv"
    tmp = out_dir / ".manifest.csv.tmp"
    tmp.write_text(buf.getvalue())
    os.replace(tmp, manifest_path)

    return PipelineResult(
        manifest_path=manifest_path,
        n_kept=len(kept),
        n_dropped=sum(1 for r in rows if not r[5]),
        reinhard_target=reinhard_target,
        macenko_target=macenko_target,
        manifest_rows=rows,
    )
