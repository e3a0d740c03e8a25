"""Feature-space structure analyses.

Covers the ordered distance profiles around a tumor reference patch, PCA
with explained-variance ratios, site prediction on dimensionality-reduced
features, and per-component separability via orientation-maxed one-vs-one
AUROC.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, ParameterError, TaskError
from .probes import knn_predict
from .seeding import rng_for
from .splits import GroupedSplit, rows_by_value
from .table import EmbeddingTable


@dataclass
class PcaModel:
    """Mean vector plus orthonormal components ordered by eigenvalue."""

    mean: np.ndarray  # D
    components: np.ndarray  # D x D, columns are components
    eigenvalues: np.ndarray  # D, descending, >= 0
    evr: np.ndarray  # explained variance ratios

    def __post_init__(self):
        d = self.components.shape[0]
        gram = self.components.T @ self.components
        if not np.allclose(gram, np.eye(d), atol=1e-8):
            raise TaskError("PCA components are not orthonormal")
        if np.any(np.diff(self.eigenvalues) > 1e-10):
            raise TaskError("eigenvalues are not sorted descending")
        total = self.eigenvalues.sum()
        if total > 0 and abs(self.evr.sum() - 1.0) > 1e-9:
            raise TaskError("explained variance ratios do not sum to 1")

    @property
    def rank(self) -> int:
        return int(np.sum(self.eigenvalues > 1e-12 * max(1.0, self.eigenvalues[0])))


@dataclass
class DistanceProfile:
    """Sorted Euclidean distances from a reference patch to one group."""

    group: str  # "ss" | "ossh" | "osoh"
    sorted_distances: np.ndarray
    class_labels: np.ndarray  # aligned with sorted_distances
    reference_patch_id: str


@dataclass
class SeparabilityProfile:
    component_index: np.ndarray
    evr: np.ndarray
    ovo_auroc: np.ndarray

    @property
    def n_components(self) -> int:
        return len(self.component_index)


# -- PCA ----------------------------------------------------------------------------


def fit_pca(table_or_x: EmbeddingTable | np.ndarray) -> PcaModel:
    """PCA by SVD of the centered data matrix.

    Deterministic up to per-component sign; the sign is fixed so each
    component's largest-magnitude entry is positive. With fewer rows than
    dimensions, trailing components carry eigenvalue zero.
    """
    x = table_or_x.features if isinstance(table_or_x, EmbeddingTable) else table_or_x
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    if n < 2:
        raise ParameterError(f"PCA needs at least 2 rows, got {n}")
    mean = x.mean(axis=0)
    centered = x - mean
    # full matrices only when N < D, so the basis still spans all of R^D
    # without materializing an N x N left factor on tall inputs
    _, s, vt = np.linalg.svd(centered, full_matrices=n < d)
    eigenvalues = np.zeros(d)
    r = min(n, d)
    eigenvalues[:r] = (s[:r] ** 2) / (n - 1)
    components = vt.T
    # sign convention: largest-|entry| of each column positive
    flip = components[np.argmax(np.abs(components), axis=0), np.arange(d)] < 0
    components[:, flip] *= -1.0
    total = eigenvalues.sum()
    evr = eigenvalues / total if total > 0 else np.zeros(d)
    return PcaModel(mean=mean, components=components, eigenvalues=eigenvalues, evr=evr)


def project(
    table_or_x: EmbeddingTable | np.ndarray, model: PcaModel, n_components: int
) -> np.ndarray:
    """Coordinates of the centered rows on the first ``n_components`` components."""
    x = table_or_x.features if isinstance(table_or_x, EmbeddingTable) else table_or_x
    x = np.asarray(x, dtype=np.float64)
    d = model.components.shape[0]
    if not 1 <= n_components <= d:
        raise ParameterError(f"n_components must be in [1, {d}], got {n_components}")
    return (x - model.mean) @ model.components[:, :n_components]


def reconstruct(z: np.ndarray, model: PcaModel) -> np.ndarray:
    """Inverse of :func:`project` for full-rank projections."""
    n_components = z.shape[1]
    return model.mean + z @ model.components[:, :n_components].T


# -- one-vs-one AUROC ----------------------------------------------------------------


def _auroc_midrank(scores: np.ndarray, positive: np.ndarray) -> float:
    """AUROC of scores with ties counted half, via the rank-sum statistic."""
    n = len(scores)
    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    # midranks: every member of a tie group gets the group's average rank
    change = np.flatnonzero(sorted_scores[1:] != sorted_scores[:-1]) + 1
    starts = np.concatenate([[0], change])
    ends = np.concatenate([change, [n]])
    ranks = np.empty(n)
    ranks[order] = np.repeat(0.5 * (starts + ends - 1) + 1.0, ends - starts)
    n_pos = int(positive.sum())
    n_neg = n - n_pos
    rank_sum = ranks[positive].sum()
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def ovo_auroc_oriented(scores: np.ndarray, labels: np.ndarray) -> float:
    """Macro one-vs-one AUROC with unknown score orientation.

    For each class pair the AUROC is computed on the pair's rows only and
    flipped to max(a, 1-a), since a 1-D projection carries no preferred
    sign; the unweighted mean over pairs is returned, always in [0.5, 1].
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ParameterError("scores and labels must have equal length")
    classes = [c for c in np.unique(labels)]
    if len(classes) < 2:
        raise TaskError(f"need at least 2 non-empty classes, got {len(classes)}")
    by_class = {c: np.flatnonzero(labels == c) for c in classes}
    aucs = []
    for i in range(len(classes)):
        for j in range(i + 1, len(classes)):
            rows = np.concatenate([by_class[classes[i]], by_class[classes[j]]])
            positive = labels[rows] == classes[j]
            a = _auroc_midrank(scores[rows], positive)
            aucs.append(max(a, 1.0 - a))
    return float(np.mean(aucs))


def separability_profile(
    table: EmbeddingTable, model: PcaModel, n_components: int
) -> SeparabilityProfile:
    """Site separability of each principal component's 1-D projection.

    Components beyond the model rank carry no variance and are excluded.
    """
    d = model.components.shape[0]
    if not 1 <= n_components <= d:
        raise ParameterError(f"n_components must be in [1, {d}], got {n_components}")
    n_components = min(n_components, model.rank)
    z = project(table, model, n_components)
    indices = np.arange(n_components)
    aurocs = np.array(
        [ovo_auroc_oriented(z[:, j], table.sites) for j in indices]
    )
    return SeparabilityProfile(
        component_index=indices,
        evr=model.evr[:n_components].copy(),
        ovo_auroc=aurocs,
    )


# -- reduced-feature site prediction ---------------------------------------------------


def reduced_knn_curve(
    table: EmbeddingTable,
    split: GroupedSplit,
    l_list: tuple[int, ...] = (1, 2, 3, 5, 10, 20, 30, 50),
    k: int = 5,
) -> tuple[list[tuple[int, float]], float]:
    """KNN site accuracy on features projected onto the first l components.

    PCA is fitted on the whole table; the split must be the same one used
    for the non-reduced experiment. Returns the per-l curve plus the
    non-reduced baseline accuracy.
    """
    d = table.dim
    bad = [l for l in l_list if not 1 <= l <= d]
    if bad:
        raise ParameterError(f"component counts out of range [1, {d}]: {bad}")
    model = fit_pca(table)
    x = table.features.astype(np.float64)
    ty, sy = table.sites[split.train_idx], table.sites[split.test_idx]

    baseline_pred = knn_predict(x[split.train_idx], ty, x[split.test_idx], k=k)
    baseline = float(np.mean(baseline_pred == sy))

    z_full = project(table, model, max(l_list))
    curve = []
    for l in l_list:
        pred = knn_predict(z_full[split.train_idx, :l], ty, z_full[split.test_idx, :l], k=k)
        curve.append((int(l), float(np.mean(pred == sy))))
    return curve, baseline


# -- distance profiles ----------------------------------------------------------------


def distance_profiles(
    table: EmbeddingTable,
    reference_patch_id: str,
    n_per_group: int = 1000,
    n_other_slides: int = 5,
    seed: int = 0,
) -> list[DistanceProfile]:
    """Ordered Euclidean distances from a tumor reference patch.

    Three groups: patches of the reference's own slide (ss), patches of
    other cancerous slides from the same site (ossh), and of cancerous
    slides from the other site (osoh). Each slide contributes equally from
    both classes, so a slide is eligible when it holds at least
    n_per_group/2 patches of each class.
    """
    if n_per_group < 2 or n_per_group % 2 != 0:
        raise ParameterError("n_per_group must be a positive even number")
    if not table.has_class_labels():
        raise TaskError("distance profiles require class labels on every row")
    matches = np.flatnonzero(table.patch_ids == reference_patch_id)
    if len(matches) != 1:
        raise ParameterError(f"reference patch {reference_patch_id!r} not found")
    ref_row = int(matches[0])
    if table.classes[ref_row] != 1:
        raise ParameterError("reference patch must be labeled tumor")
    ref_slide = str(table.slide_ids[ref_row])
    ref_site = int(table.sites[ref_row])

    half = n_per_group // 2
    by_slide = {str(s): rows for s, rows in rows_by_value(table.slide_ids).items()}

    def slide_class_rows(slide: str) -> tuple[np.ndarray, np.ndarray] | None:
        rows = by_slide[slide]
        normal = rows[table.classes[rows] == 0]
        tumor = rows[table.classes[rows] == 1]
        if len(normal) < half or len(tumor) < half:
            return None
        return normal, tumor

    def draw_balanced(slide: str, rng: np.random.Generator) -> np.ndarray:
        normal, tumor = slide_class_rows(slide)
        rows = np.concatenate(
            [
                rng.choice(normal, size=half, replace=False),
                rng.choice(tumor, size=half, replace=False),
            ]
        )
        return np.sort(rows)

    if slide_class_rows(ref_slide) is None:
        raise CapacityError(
            f"reference slide {ref_slide!r} lacks {half} patches of each class"
        )

    eligible_same = []
    eligible_other = []
    for slide in sorted(by_slide):
        if slide == ref_slide:
            continue
        rows = by_slide[slide]
        if (table.classes[rows] == 1).sum() == 0:
            continue  # only cancerous slides qualify
        if slide_class_rows(slide) is None:
            continue
        if int(table.sites[rows[0]]) == ref_site:
            eligible_same.append(slide)
        else:
            eligible_other.append(slide)
    for name, pool in (("ossh", eligible_same), ("osoh", eligible_other)):
        if len(pool) < n_other_slides:
            raise CapacityError(
                f"group {name} needs {n_other_slides} eligible slides, found {len(pool)}"
            )

    rng = rng_for(seed, "distance-profiles")
    groups = {"ss": draw_balanced(ref_slide, rng)}
    same_pick = rng.permutation(len(eligible_same))[:n_other_slides]
    other_pick = rng.permutation(len(eligible_other))[:n_other_slides]
    groups["ossh"] = np.concatenate(
        [draw_balanced(eligible_same[i], rng) for i in same_pick]
    )
    groups["osoh"] = np.concatenate(
        [draw_balanced(eligible_other[i], rng) for i in other_pick]
    )

    ref_feature = table.features[ref_row].astype(np.float64)
    profiles = []
    for group in ("ss", "ossh", "osoh"):
        rows = groups[group]
        diffs = table.features[rows].astype(np.float64) - ref_feature
        dists = np.sqrt(np.sum(diffs * diffs, axis=1))
        order = np.argsort(dists, kind="stable")
        profiles.append(
            DistanceProfile(
                group=group,
                sorted_distances=dists[order],
                class_labels=table.classes[rows][order].copy(),
                reference_patch_id=reference_patch_id,
            )
        )
    return profiles
