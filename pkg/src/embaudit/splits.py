"""Sampling and splitting protocols.

Three protocols live here: per-slide subsampling with a fixed per-site
budget, patient-level train/val/test splitting by greedy bin-filling, and
the slide-level biased split builder for the confounded downstream task
(four training compositions, fixed cross-composed test set).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import CapacityError, ParameterError, SplitError, TaskError
from .seeding import rng_for
from .table import EmbeddingTable

logger = logging.getLogger(__name__)


def rows_by_value(values: np.ndarray) -> dict:
    """Group row indices by value in one O(N log N) pass."""
    values = np.asarray(values)
    uniq, inv = np.unique(values, return_inverse=True)
    order = np.argsort(inv, kind="stable")
    counts = np.bincount(inv, minlength=len(uniq))
    groups = np.split(order, np.cumsum(counts)[:-1])
    return {u: g for u, g in zip(uniq, groups)}

PATCHES_PER_BIAS_SLIDE = 2500
BIAS_TRAIN_TOTAL = 30_000
BIAS_VAL_TOTAL = 5_000
BIAS_TEST_PER_CELL = 5_000
BIAS_SLIDES_PER_CELL = 7

SUBSETS = ("train", "val", "test")


@dataclass
class GroupedSplit:
    """Disjoint row-index sets with group (patient or slide) integrity."""

    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    group_level: str  # "patient" | "slide"
    seed: int

    def __post_init__(self):
        self.train_idx = np.asarray(self.train_idx, dtype=np.int64)
        self.val_idx = np.asarray(self.val_idx, dtype=np.int64)
        self.test_idx = np.asarray(self.test_idx, dtype=np.int64)
        if self.group_level not in ("patient", "slide"):
            raise ParameterError(f"unknown group level {self.group_level!r}")

    def subset(self, name: str) -> np.ndarray:
        return {"train": self.train_idx, "val": self.val_idx, "test": self.test_idx}[name]

    def check_disjoint(self, n_rows: int) -> None:
        all_idx = np.concatenate([self.train_idx, self.val_idx, self.test_idx])
        if all_idx.size and (all_idx.min() < 0 or all_idx.max() >= n_rows):
            raise SplitError("split indices out of range")
        if np.unique(all_idx).size != all_idx.size:
            raise SplitError("split subsets overlap")


@dataclass
class BiasSpec:
    """Per-cell patch counts of one biased training composition.

    Cells are (site, class) pairs; class 0 is normal tissue, class 1 tumor.
    """

    ratio_label: str
    train_counts: dict[tuple[int, int], int]
    val_counts: dict[tuple[int, int], int]
    test_counts: dict[tuple[int, int], int]

    def __post_init__(self):
        if sum(self.train_counts.values()) != BIAS_TRAIN_TOTAL:
            raise SplitError(f"train counts must sum to {BIAS_TRAIN_TOTAL}")
        if sum(self.val_counts.values()) != BIAS_VAL_TOTAL:
            raise SplitError(f"validation counts must sum to {BIAS_VAL_TOTAL}")
        if sum(self.test_counts.values()) != 2 * BIAS_TEST_PER_CELL:
            raise SplitError(f"test counts must sum to {2 * BIAS_TEST_PER_CELL}")


def subsample_per_site(
    table: EmbeddingTable, budget_per_site: int, seed: int
) -> np.ndarray:
    """Draw up to ``budget_per_site`` patches per site, spread over slides.

    A site with m slides contributes floor(budget/m) patches per slide,
    drawn uniformly without replacement; slides with fewer patches
    contribute all of them. Deterministic given the seed.
    """
    if budget_per_site < 1:
        raise ParameterError("budget_per_site must be >= 1")
    sites = np.unique(table.sites)
    if table.codebook.site_names:
        for absent in set(range(len(table.codebook.site_names))) - set(int(s) for s in sites):
            logger.warning("site %d has no slides in this table; empty contribution", absent)

    by_site = rows_by_value(table.sites)
    picked: list[np.ndarray] = []
    for site in sites:
        site_rows = by_site[site]
        by_slide = rows_by_value(table.slide_ids[site_rows])
        m = len(by_slide)
        per_slide = budget_per_site // m
        if per_slide < 1:
            raise ParameterError(
                f"budget {budget_per_site} below slide count {m} for site {int(site)}"
            )
        for slide in sorted(by_slide):
            rows = site_rows[by_slide[slide]]
            if len(rows) <= per_slide:
                picked.append(np.sort(rows))
            else:
                rng = rng_for(seed, "subsample", int(site), str(slide))
                picked.append(np.sort(rng.choice(rows, size=per_slide, replace=False)))
    if not picked:
        return np.empty(0, dtype=np.int64)
    return np.concatenate(picked)


def patient_split(
    table: EmbeddingTable,
    fractions: tuple[float, float, float] = (0.6, 0.1, 0.3),
    seed: int = 0,
    rows: np.ndarray | None = None,
) -> GroupedSplit:
    """Split rows into train/val/test at patient level.

    Patients are shuffled with the seed, then greedily assigned to the
    subset with the largest remaining patch-count deficit (ties broken
    train, val, test). When as many patients remain as there are still
    empty subsets, those patients fill the empty subsets, so each subset
    holds at least one patient whenever three or more exist.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ParameterError(f"fractions must be 3 positive values, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ParameterError(f"fractions must sum to 1, got {sum(fractions)}")

    if rows is None:
        rows = np.arange(table.n_rows, dtype=np.int64)
    else:
        rows = np.asarray(rows, dtype=np.int64)

    patients = np.unique(table.patient_ids[rows])
    if len(patients) < 3:
        raise SplitError(f"need at least 3 patients, table subset has {len(patients)}")

    rng = rng_for(seed, "patient-split")
    order = rng.permutation(len(patients))
    patients = patients[order]

    patient_rows = {p: rows[g] for p, g in rows_by_value(table.patient_ids[rows]).items()}

    total = float(len(rows))
    targets = np.array(fractions) * total
    counts = np.zeros(3)
    assigned: list[list[int]] = [[], [], []]
    remaining = len(patients)
    for p in patients:
        deficits = targets - counts
        empty = [i for i in range(3) if not assigned[i]]
        if empty and remaining == len(empty):
            pick = max(empty, key=lambda i: (deficits[i], -i))
        else:
            pick = int(np.argmax(deficits))  # first max wins: train, val, test order
        prows = patient_rows[p]
        assigned[pick].extend(prows)
        counts[pick] += len(prows)
        remaining -= 1

    split = GroupedSplit(
        train_idx=np.sort(np.array(assigned[0], dtype=np.int64)),
        val_idx=np.sort(np.array(assigned[1], dtype=np.int64)),
        test_idx=np.sort(np.array(assigned[2], dtype=np.int64)),
        group_level="patient",
        seed=seed,
    )
    split.check_disjoint(table.n_rows)
    return split


# -- biased downstream splits ----------------------------------------------------


def _bias_split_defs(s0: int, s1: int) -> list[tuple[str, dict[tuple[int, int], int]]]:
    return [
        ("0.5/0.5", {(s0, 0): 7500, (s0, 1): 7500, (s1, 0): 7500, (s1, 1): 7500}),
        ("0.67/0.33", {(s0, 0): 5000, (s0, 1): 10000, (s1, 0): 10000, (s1, 1): 5000}),
        ("0.83/0.17", {(s0, 0): 2500, (s0, 1): 12500, (s1, 0): 12500, (s1, 1): 2500}),
        ("1/0", {(s0, 0): 0, (s0, 1): 15000, (s1, 0): 15000, (s1, 1): 0}),
    ]


def _apportion_val(train_counts: dict, cells: Sequence[tuple[int, int]]) -> dict:
    """Scale train composition down to the validation total.

    Largest-remainder rounding keeps every cell within one patch of the
    exact proportion, so validation mirrors the training composition.
    """
    exact = {
        c: train_counts[c] * BIAS_VAL_TOTAL / BIAS_TRAIN_TOTAL for c in cells
    }
    counts = {c: int(np.floor(exact[c])) for c in cells}
    shortfall = BIAS_VAL_TOTAL - sum(counts.values())
    by_frac = sorted(cells, key=lambda c: (-(exact[c] - counts[c]), cells.index(c)))
    for c in by_frac[:shortfall]:
        counts[c] += 1
    return counts


def _slide_class_pools(
    table: EmbeddingTable, sites: Sequence[int]
) -> dict[tuple[int, int], list[str]]:
    """Partition each site's slides into a normal pool and a tumor pool.

    A slide qualifies for class c when it holds at least 2,500 patches of
    that class. Slides qualifying for both are alternated between the two
    pools to balance them; the partition is deterministic (slide-id order).
    """
    by_site = rows_by_value(table.sites)
    pools: dict[tuple[int, int], list[str]] = {}
    for site in sites:
        site_rows = by_site[site]
        by_slide = rows_by_value(table.slide_ids[site_rows])
        normal_pool: list[str] = []
        tumor_pool: list[str] = []
        both: list[str] = []
        for slide in sorted(str(s) for s in by_slide):
            rows = site_rows[by_slide[slide]]
            n_normal = int((table.classes[rows] == 0).sum())
            n_tumor = int((table.classes[rows] == 1).sum())
            can_normal = n_normal >= PATCHES_PER_BIAS_SLIDE
            can_tumor = n_tumor >= PATCHES_PER_BIAS_SLIDE
            if can_normal and can_tumor:
                both.append(slide)
            elif can_normal:
                normal_pool.append(slide)
            elif can_tumor:
                tumor_pool.append(slide)
        for slide in both:
            if len(normal_pool) <= len(tumor_pool):
                normal_pool.append(slide)
            else:
                tumor_pool.append(slide)
        pools[(site, 0)] = normal_pool
        pools[(site, 1)] = tumor_pool
    return pools


def build_bias_splits(
    table: EmbeddingTable, seed: int = 0
) -> list[tuple[BiasSpec, GroupedSplit]]:
    """Build the four biased training compositions plus the fixed test set.

    Each composition holds 30,000 training patches, realized as whole slides
    contributing 2,500 patches each, with the tumor share per site sweeping
    from balanced (0.5/0.5) to fully site-correlated (1/0). The test set
    (5,000 normal from the first site, 5,000 tumor from the second) is
    identical across compositions; validation holds 5,000 patches from
    held-out slides matching each composition. No slide appears in more
    than one subset of a split.
    """
    if not table.has_class_labels():
        raise TaskError("bias splits require class labels on every row")
    sites = sorted(int(s) for s in np.unique(table.sites))
    if len(sites) != 2:
        raise ParameterError(f"bias splits need exactly 2 sites, table has {len(sites)}")
    s0, s1 = sites
    cells = [(s0, 0), (s0, 1), (s1, 0), (s1, 1)]

    pools = _slide_class_pools(table, sites)
    deficits = {
        cell: BIAS_SLIDES_PER_CELL - len(pools[cell])
        for cell in cells
        if len(pools[cell]) < BIAS_SLIDES_PER_CELL
    }
    if deficits:
        detail = ", ".join(
            f"site {site} class {cls}: short {miss} slide(s)"
            for (site, cls), miss in sorted(deficits.items())
        )
        raise CapacityError(f"insufficient eligible slides for bias splits ({detail})")

    # per-cell slide order: sorted ids, then one seeded shuffle shared by all splits
    ordered_pools: dict[tuple[int, int], list[str]] = {}
    for cell in cells:
        pool = sorted(pools[cell])
        rng = rng_for(seed, "bias", "slides", cell[0], cell[1])
        ordered_pools[cell] = [pool[i] for i in rng.permutation(len(pool))]

    # per-(slide, class) patch draw, shared across splits so the test set is fixed
    rows_by_slide = {str(k): v for k, v in rows_by_value(table.slide_ids).items()}

    def drawn_rows(slide: str, cls: int) -> np.ndarray:
        rows = rows_by_slide[slide]
        rows = rows[table.classes[rows] == cls]
        rng = rng_for(seed, "bias", "patches", slide, cls)
        order = rng.permutation(len(rows))
        return rows[order][:PATCHES_PER_BIAS_SLIDE]

    test_cells = {(s0, 0): BIAS_TEST_PER_CELL, (s1, 1): BIAS_TEST_PER_CELL}
    test_slides: dict[tuple[int, int], list[str]] = {}
    test_rows: list[np.ndarray] = []
    for cell, count in test_cells.items():
        n_slides = count // PATCHES_PER_BIAS_SLIDE
        test_slides[cell] = ordered_pools[cell][:n_slides]
        for slide in test_slides[cell]:
            test_rows.append(drawn_rows(slide, cell[1]))
    test_idx = np.sort(np.concatenate(test_rows))

    results: list[tuple[BiasSpec, GroupedSplit]] = []
    for ratio_label, train_counts in _bias_split_defs(s0, s1):
        val_counts = _apportion_val(train_counts, cells)
        spec = BiasSpec(
            ratio_label=ratio_label,
            train_counts=train_counts,
            val_counts=val_counts,
            test_counts={(s0, 0): BIAS_TEST_PER_CELL, (s0, 1): 0,
                         (s1, 0): 0, (s1, 1): BIAS_TEST_PER_CELL},
        )

        train_rows: list[np.ndarray] = []
        val_rows: list[np.ndarray] = []
        for cell in cells:
            pool = [s for s in ordered_pools[cell] if s not in test_slides.get(cell, [])]
            need_train = train_counts[cell] // PATCHES_PER_BIAS_SLIDE
            need_val = val_counts[cell]
            avail_val = (len(pool) - need_train) * PATCHES_PER_BIAS_SLIDE
            if need_train > len(pool) or need_val > avail_val:
                raise CapacityError(
                    f"split {ratio_label}: site {cell[0]} class {cell[1]} needs "
                    f"{need_train} train slide(s) plus {need_val} validation patches, "
                    f"pool has {len(pool)} slide(s)"
                )
            for slide in pool[:need_train]:
                train_rows.append(drawn_rows(slide, cell[1]))
            remaining = need_val
            for slide in pool[need_train:]:
                if remaining <= 0:
                    break
                take = min(remaining, PATCHES_PER_BIAS_SLIDE)
                val_rows.append(drawn_rows(slide, cell[1])[:take])
                remaining -= take

        split = GroupedSplit(
            train_idx=np.sort(np.concatenate(train_rows)) if train_rows else np.empty(0, np.int64),
            val_idx=np.sort(np.concatenate(val_rows)) if val_rows else np.empty(0, np.int64),
            test_idx=test_idx,
            group_level="slide",
            seed=seed,
        )
        split.check_disjoint(table.n_rows)
        results.append((spec, split))
    return results


def save_split_ids(table: EmbeddingTable, split: GroupedSplit, path: str | Path) -> None:
    """Write subset membership as patch ids, for audit reproducibility."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["subset", "patch_id"])
        for name in SUBSETS:
            for idx in split.subset(name):
                writer.writerow([name, table.patch_ids[idx]])
