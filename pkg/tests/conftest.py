import numpy as np
import pytest

from embaudit.stainproc import RgbPatch, od_to_rgb
from embaudit.table import EmbeddingTable


def make_table(
    rng: np.random.Generator,
    n_sites: int = 2,
    patients_per_site: int = 3,
    slides_per_patient: int = 2,
    patches_per_slide: int = 5,
    dim: int = 4,
    with_classes: bool = True,
    model_tag: str = "test",
) -> EmbeddingTable:
    """Random table with a full patient/slide hierarchy."""
    patch_ids, slide_ids, patient_ids, sites, classes = [], [], [], [], []
    for site in range(n_sites):
        for p in range(patients_per_site):
            patient = f"s{site}p{p}"
            for sl in range(slides_per_patient):
                slide = f"{patient}sl{sl}"
                for i in range(patches_per_slide):
                    patch_ids.append(f"{slide}_{i}")
                    slide_ids.append(slide)
                    patient_ids.append(patient)
                    sites.append(site)
                    classes.append(i % 2 if with_classes else None)
    n = len(patch_ids)
    features = rng.standard_normal((n, dim)).astype(np.float32)
    return EmbeddingTable(
        features,
        patch_ids=patch_ids,
        slide_ids=slide_ids,
        patient_ids=patient_ids,
        sites=sites,
        classes=classes if with_classes else None,
        model_tag=model_tag,
    )


def make_he_patch(
    rng: np.random.Generator,
    stain_matrix: np.ndarray,
    h: int = 64,
    w: int = 64,
) -> RgbPatch:
    """Two-stain image from a known mixing matrix, noise-free up to quantization.

    A share of pixels is pure in each stain so the extreme-angle estimate can
    land exactly on the planted directions.
    """
    m = stain_matrix / np.linalg.norm(stain_matrix, axis=0)
    n = h * w
    kind = rng.random(n)
    conc = np.zeros((n, 2))
    pure_a = kind < 0.15
    pure_b = (kind >= 0.15) & (kind < 0.3)
    mixed = ~(pure_a | pure_b)
    conc[pure_a, 0] = rng.uniform(0.6, 1.4, pure_a.sum())
    conc[pure_b, 1] = rng.uniform(0.7, 1.4, pure_b.sum())
    conc[mixed, 0] = rng.uniform(0.5, 1.2, mixed.sum())
    conc[mixed, 1] = rng.uniform(0.5, 1.2, mixed.sum())
    pixels = od_to_rgb(conc @ m.T).reshape(h, w, 3)
    return RgbPatch(pixels=pixels, patch_id="synth-he")


STAIN_A = np.array([0.45, 0.55, 0.75])  # blue-dominant, plays hematoxylin
STAIN_B = np.array([0.60, 0.75, 0.30])


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)
