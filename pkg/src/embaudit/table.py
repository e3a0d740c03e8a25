"""In-memory embedding table and its EMB1 container format.

The container is a fixed 32-byte header followed by row-major float32
features; per-row metadata lives in a ``<path>.meta.csv`` sidecar so labels
can be edited without rewriting the matrix, and display names plus the
model tag in an optional ``<path>.codebook.json``.
"""

from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConsistencyError, DataError, FormatError, IncompatibilityError

MAGIC = b"EMB1"
FORMAT_VERSION = 1
DTYPE_F32 = 0x01
_HEADER = struct.Struct("<4sIQQB7x")  # magic, version, N, D, dtype code, reserved

NORM_VARIANTS = ("raw", "reinhard", "macenko")

META_HEADER = ["patch_id", "slide_id", "patient_id", "site", "class", "norm_variant"]


@dataclass(frozen=True)
class PatchMeta:
    """Identity and labels of one embedded patch."""

    patch_id: str
    slide_id: str
    patient_id: str
    site_label: int
    class_label: int | None = None
    norm_variant: str = "raw"


@dataclass
class LabelCodebook:
    """Display names for site and class indices."""

    site_names: list[str] = field(default_factory=list)
    class_names: list[str] = field(default_factory=list)

    def validate(self, table: "EmbeddingTable") -> None:
        if table.n_rows == 0:
            return
        if self.site_names and int(table.sites.max()) >= len(self.site_names):
            raise ConsistencyError(
                f"codebook has {len(self.site_names)} site names but table uses "
                f"site index {int(table.sites.max())}"
            )
        present = table.classes[table.classes >= 0]
        if self.class_names and present.size and int(present.max()) >= len(self.class_names):
            raise ConsistencyError(
                f"codebook has {len(self.class_names)} class names but table uses "
                f"class index {int(present.max())}"
            )


class EmbeddingTable:
    """N x D float32 feature matrix with aligned per-row metadata.

    Metadata is stored columnarly (object arrays for ids, int arrays for
    labels) so that tables with hundreds of thousands of rows stay cheap;
    ``meta(i)`` and iteration materialize :class:`PatchMeta` views on demand.
    Instances are immutable after construction and safe to share across
    threads.
    """

    def __init__(
        self,
        features: np.ndarray,
        patch_ids: Sequence[str] | np.ndarray,
        slide_ids: Sequence[str] | np.ndarray,
        patient_ids: Sequence[str] | np.ndarray,
        sites: Sequence[int] | np.ndarray,
        classes: Sequence[int | None] | np.ndarray | None = None,
        norm_variants: Sequence[str] | np.ndarray | None = None,
        model_tag: str = "",
        codebook: LabelCodebook | None = None,
    ):
        features = np.asarray(features, dtype=np.float32)
        if features.ndim != 2:
            raise ConsistencyError(f"features must be 2-D, got shape {features.shape}")
        n = features.shape[0]
        if features.shape[1] < 1 and n > 0:
            raise ConsistencyError("feature dimension must be >= 1")

        self.features = features
        self.patch_ids = np.asarray(patch_ids, dtype=object)
        self.slide_ids = np.asarray(slide_ids, dtype=object)
        self.patient_ids = np.asarray(patient_ids, dtype=object)
        self.sites = np.asarray(sites, dtype=np.int64)
        if classes is None:
            self.classes = np.full(n, -1, dtype=np.int64)
        else:
            self.classes = np.asarray(
                [(-1 if c is None else int(c)) for c in classes], dtype=np.int64
            )
        if norm_variants is None:
            self.norm_variants = np.asarray(["raw"] * n, dtype=object)
        else:
            self.norm_variants = np.asarray(norm_variants, dtype=object)
        self.model_tag = model_tag
        self.codebook = codebook if codebook is not None else LabelCodebook()
        self._validate()

    # -- construction helpers -------------------------------------------------

    @classmethod
    def from_meta(
        cls,
        features: np.ndarray,
        meta: Sequence[PatchMeta],
        model_tag: str = "",
        codebook: LabelCodebook | None = None,
    ) -> "EmbeddingTable":
        return cls(
            features,
            patch_ids=[m.patch_id for m in meta],
            slide_ids=[m.slide_id for m in meta],
            patient_ids=[m.patient_id for m in meta],
            sites=[m.site_label for m in meta],
            classes=[m.class_label for m in meta],
            norm_variants=[m.norm_variant for m in meta],
            model_tag=model_tag,
            codebook=codebook,
        )

    # -- invariants ------------------------------------------------------------

    def _validate(self) -> None:
        n = self.features.shape[0]
        for name, col in (
            ("patch_id", self.patch_ids),
            ("slide_id", self.slide_ids),
            ("patient_id", self.patient_ids),
            ("site", self.sites),
            ("class", self.classes),
            ("norm_variant", self.norm_variants),
        ):
            if len(col) != n:
                raise ConsistencyError(
                    f"metadata column {name} has {len(col)} rows, matrix has {n}"
                )
        bad = ~np.isfinite(self.features).all(axis=1)
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            raise DataError(f"non-finite feature value in row {row}")
        if len(set(self.patch_ids)) != n:
            seen: set[str] = set()
            for pid in self.patch_ids:
                if pid in seen:
                    raise ConsistencyError(f"duplicate patch_id {pid!r}")
                seen.add(pid)
        unknown = set(self.norm_variants) - set(NORM_VARIANTS)
        if unknown:
            raise ConsistencyError(f"unknown norm_variant values: {sorted(unknown)}")
        # slide -> patient and slide -> site must be functions
        slide_patient: dict[str, str] = {}
        slide_site: dict[str, int] = {}
        for sid, pid, site in zip(self.slide_ids, self.patient_ids, self.sites):
            if slide_patient.setdefault(sid, pid) != pid:
                raise ConsistencyError(f"slide {sid!r} maps to multiple patients")
            if slide_site.setdefault(sid, int(site)) != int(site):
                raise ConsistencyError(f"slide {sid!r} maps to multiple sites")
        self.codebook.validate(self)

    # -- views -----------------------------------------------------------------

    @property
    def n_rows(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def meta(self, i: int) -> PatchMeta:
        c = int(self.classes[i])
        return PatchMeta(
            patch_id=str(self.patch_ids[i]),
            slide_id=str(self.slide_ids[i]),
            patient_id=str(self.patient_ids[i]),
            site_label=int(self.sites[i]),
            class_label=None if c < 0 else c,
            norm_variant=str(self.norm_variants[i]),
        )

    def iter_meta(self) -> Iterator[PatchMeta]:
        for i in range(self.n_rows):
            yield self.meta(i)

    def has_class_labels(self) -> bool:
        return self.n_rows > 0 and bool((self.classes >= 0).all())

    def site_list(self) -> np.ndarray:
        return np.unique(self.sites)

    def __len__(self) -> int:
        return self.n_rows

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EmbeddingTable):
            return NotImplemented
        return (
            self.model_tag == other.model_tag
            and self.features.shape == other.features.shape
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.patch_ids, other.patch_ids)
            and np.array_equal(self.slide_ids, other.slide_ids)
            and np.array_equal(self.patient_ids, other.patient_ids)
            and np.array_equal(self.sites, other.sites)
            and np.array_equal(self.classes, other.classes)
            and np.array_equal(self.norm_variants, other.norm_variants)
        )


# -- container I/O --------------------------------------------------------------


def _meta_path(path: Path) -> Path:
    return path.with_name(path.name + ".meta.csv")


def _codebook_path(path: Path) -> Path:
    return path.with_name(path.name + ".codebook.json")


def save_table(table: EmbeddingTable, path: str | Path) -> None:
    """Write the EMB1 container, metadata sidecar and codebook.

    ``load_table(save_table(t))`` reproduces ``t`` bit-exactly on features
    and field-exactly on metadata.
    """
    path = Path(path)
    n, d = table.features.shape
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, n, d, DTYPE_F32)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(table.features, dtype="<f4").tobytes())

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(META_HEADER)
    for i in range(n):
        c = int(table.classes[i])
        writer.writerow(
            [
                table.patch_ids[i],
                table.slide_ids[i],
                table.patient_ids[i],
                int(table.sites[i]),
                "" if c < 0 else c,
                table.norm_variants[i],
            ]
        )
    _meta_path(path).write_text(buf.getvalue())

    codebook = {
        "model_tag": table.model_tag,
        "site_names": list(table.codebook.site_names),
        "class_names": list(table.codebook.class_names),
    }
    _codebook_path(path).write_text(json.dumps(codebook, indent=2, sort_keys=True) + "\n")


def load_table(path: str | Path) -> EmbeddingTable:
    """Read and validate an EMB1 container with its sidecar metadata."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, n, d, dtype_code = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    if dtype_code != DTYPE_F32:
        raise FormatError(f"{path}: unsupported dtype code {dtype_code:#x}")
    expect = _HEADER.size + n * d * 4
    if len(raw) != expect:
        raise FormatError(f"{path}: expected {expect} bytes for N={n} D={d}, got {len(raw)}")
    features = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(n, d).copy()

    meta_file = _meta_path(path)
    if not meta_file.exists():
        raise FormatError(f"missing metadata sidecar {meta_file}")
    with open(meta_file, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != META_HEADER:
            raise FormatError(f"{meta_file}: unexpected header {header}")
        rows = list(reader)
    if len(rows) != n:
        raise ConsistencyError(f"{meta_file}: {len(rows)} metadata rows but matrix has {n}")

    patch_ids = [r[0] for r in rows]
    slide_ids = [r[1] for r in rows]
    patient_ids = [r[2] for r in rows]
    try:
        sites = [int(r[3]) for r in rows]
    except ValueError as exc:
        raise FormatError(f"{meta_file}: non-integer site label: {exc}") from exc
    classes = [None if r[4] == "" else int(r[4]) for r in rows]
    variants = [r[5] for r in rows]

    model_tag = ""
    codebook = LabelCodebook()
    cb_file = _codebook_path(path)
    if cb_file.exists():
        data = json.loads(cb_file.read_text())
        model_tag = data.get("model_tag", "")
        codebook = LabelCodebook(
            site_names=list(data.get("site_names", [])),
            class_names=list(data.get("class_names", [])),
        )

    return EmbeddingTable(
        features,
        patch_ids=patch_ids,
        slide_ids=slide_ids,
        patient_ids=patient_ids,
        sites=sites,
        classes=classes,
        norm_variants=variants,
        model_tag=model_tag,
        codebook=codebook,
    )


def concat_tables(tables: Sequence[EmbeddingTable]) -> EmbeddingTable:
    """Concatenate tables row-wise, in argument order."""
    if not tables:
        raise ConsistencyError("cannot concatenate an empty list of tables")
    first = tables[0]
    for t in tables[1:]:
        if t.dim != first.dim:
            raise IncompatibilityError(f"feature dimensions differ: {first.dim} vs {t.dim}")
        if t.model_tag != first.model_tag:
            raise IncompatibilityError(
                f"model tags differ: {first.model_tag!r} vs {t.model_tag!r}"
            )
    features = np.concatenate([t.features for t in tables], axis=0)
    return EmbeddingTable(
        features,
        patch_ids=np.concatenate([t.patch_ids for t in tables]),
        slide_ids=np.concatenate([t.slide_ids for t in tables]),
        patient_ids=np.concatenate([t.patient_ids for t in tables]),
        sites=np.concatenate([t.sites for t in tables]),
        classes=np.concatenate([t.classes for t in tables]),
        norm_variants=np.concatenate([t.norm_variants for t in tables]),
        model_tag=first.model_tag,
        codebook=first.codebook,
    )
