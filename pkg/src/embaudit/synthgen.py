"""Ground-truth synthetic embedding generator.

Embeddings follow an additive model: class signature + site signature +
slide offset + isotropic Gaussian noise, each a fixed unit vector scaled by
its strength. Site vectors are mutually orthogonalized so pairwise site
separations are uniform, which keeps every accuracy threshold analytically
predictable. Used as the verification oracle for the experiment drivers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError
from .seeding import rng_for
from .table import EmbeddingTable, LabelCodebook

PLACEMENTS = ("top_variance", "low_variance", "random")


@dataclass
class SynthConfig:
    dims: int = 64
    n_sites: int = 2
    n_classes: int = 2
    patients_per_site: int = 4
    slides_per_patient: int = 2
    patches_per_slide: int = 100
    site_strength: float = 4.0  # norm of the site signature
    class_strength: float = 1.0
    slide_strength: float = 0.5
    noise: float = 1.0
    signature_placement: str = "top_variance"
    seed: int = 0
    # low_variance only: directions carrying boosted variance so the site
    # signature ranks below them in a PCA
    n_distractors: int = 8

    def validate(self) -> None:
        counts = {
            "dims": self.dims,
            "n_sites": self.n_sites,
            "n_classes": self.n_classes,
            "patients_per_site": self.patients_per_site,
            "slides_per_patient": self.slides_per_patient,
            "patches_per_slide": self.patches_per_slide,
        }
        for name, value in counts.items():
            if value < 1:
                raise ParameterError(f"{name} must be >= 1, got {value}")
        for name, value in (
            ("site_strength", self.site_strength),
            ("class_strength", self.class_strength),
            ("slide_strength", self.slide_strength),
        ):
            if not np.isfinite(value) or value < 0:
                raise ParameterError(f"{name} must be finite and >= 0, got {value}")
        if not np.isfinite(self.noise) or self.noise <= 0:
            raise ParameterError(f"noise must be positive, got {self.noise}")
        if self.signature_placement not in PLACEMENTS:
            raise ParameterError(
                f"signature_placement must be one of {PLACEMENTS}, "
                f"got {self.signature_placement!r}"
            )
        if self.n_sites > self.dims:
            raise ParameterError("orthogonal site vectors require n_sites <= dims")
        if self.signature_placement == "low_variance":
            if self.n_distractors < 1:
                raise ParameterError("low_variance placement needs n_distractors >= 1")
            if self.n_sites + self.n_distractors > self.dims:
                raise ParameterError("n_sites + n_distractors must not exceed dims")


@dataclass
class SynthTruth:
    """Planted structure, for oracle tests."""

    site_vectors: np.ndarray  # S x D, orthonormal rows
    class_vectors: np.ndarray  # C x D, unit rows
    slide_vectors: np.ndarray  # n_slides x D, unit rows
    slide_ids: list[str] = field(default_factory=list)
    distractors: np.ndarray | None = None  # n_d x D when placement is low_variance


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def generate_with_truth(config: SynthConfig) -> tuple[EmbeddingTable, SynthTruth]:
    """Generate the table together with its planted signature vectors."""
    config.validate()
    rng = rng_for(config.seed, "synthgen")
    d = config.dims
    s = config.n_sites
    c = config.n_classes

    n_extra = config.n_distractors if config.signature_placement == "low_variance" else 0
    basis_src = rng.standard_normal((d, s + n_extra))
    q, _ = np.linalg.qr(basis_src)
    site_vectors = q[:, :s].T.copy()
    distractors = q[:, s : s + n_extra].T.copy() if n_extra else None

    class_vectors = _unit_rows(rng, c, d)

    n_slides = s * config.patients_per_site * config.slides_per_patient
    slide_vectors = _unit_rows(rng, n_slides, d)

    patch_ids: list[str] = []
    slide_ids: list[str] = []
    patient_ids: list[str] = []
    site_idx: list[int] = []
    class_idx: list[int] = []
    slide_no: list[int] = []
    all_slide_ids: list[str] = []

    slide_counter = 0
    for site in range(s):
        for pat in range(config.patients_per_site):
            patient = f"site{site}_pat{pat}"
            for sl in range(config.slides_per_patient):
                slide = f"{patient}_sl{sl}"
                all_slide_ids.append(slide)
                for i in range(config.patches_per_slide):
                    patch_ids.append(f"{slide}_p{i}")
                    slide_ids.append(slide)
                    patient_ids.append(patient)
                    site_idx.append(site)
                    class_idx.append(i % c)
                    slide_no.append(slide_counter)
                slide_counter += 1

    n = len(patch_ids)
    site_arr = np.array(site_idx)
    class_arr = np.array(class_idx)
    slide_arr = np.array(slide_no)

    features = config.noise * rng.standard_normal((n, d))
    features += config.site_strength * site_vectors[site_arr]
    features += config.class_strength * class_vectors[class_arr]
    features += config.slide_strength * slide_vectors[slide_arr]
    if distractors is not None:
        boost = 3.0 * (config.site_strength + config.noise)
        features += (boost * rng.standard_normal((n, n_extra))) @ distractors

    codebook = LabelCodebook(
        site_names=[f"site{i}" for i in range(s)],
        class_names=[f"class{i}" for i in range(c)],
    )
    table = EmbeddingTable(
        features.astype(np.float32),
        patch_ids=patch_ids,
        slide_ids=slide_ids,
        patient_ids=patient_ids,
        sites=site_arr,
        classes=class_arr,
        norm_variants=None,
        model_tag="synthgen-v1",
        codebook=codebook,
    )
    truth = SynthTruth(
        site_vectors=site_vectors,
        class_vectors=class_vectors,
        slide_vectors=slide_vectors,
        slide_ids=all_slide_ids,
        distractors=distractors,
    )
    return table, truth


def generate(config: SynthConfig) -> EmbeddingTable:
    """Generate a synthetic embedding table; deterministic given the config."""
    table, _ = generate_with_truth(config)
    return table
