import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from embaudit.errors import CapacityError, ParameterError, TaskError
from embaudit.geometry import (
    distance_profiles,
    fit_pca,
    ovo_auroc_oriented,
    project,
    reconstruct,
    reduced_knn_curve,
    separability_profile,
)
from embaudit.probes import knn_predict
from embaudit.splits import patient_split
from embaudit.synthgen import SynthConfig, generate

from conftest import make_table


# -- PCA ---------------------------------------------------------------------------


def test_pca_one_dimensional_data():
    model = fit_pca(np.array([[1.0, 0.0], [-1.0, 0.0]]))
    assert np.allclose(model.components[:, 0], [1.0, 0.0])  # sign-fixed to +e1
    assert np.allclose(model.evr, [1.0, 0.0])
    assert model.eigenvalues[0] == pytest.approx(2.0)  # unbiased variance of {+1,-1}


def test_pca_matches_covariance_eigendecomposition_oracle(rng):
    for _ in range(20):
        n, d = int(rng.integers(10, 60)), int(rng.integers(2, 9))
        x = rng.standard_normal((n, d)) @ np.diag(rng.uniform(0.2, 3.0, d))
        model = fit_pca(x)
        cov = np.cov(x, rowvar=False, ddof=1)
        evals, evecs = np.linalg.eigh(cov)
        evals, evecs = evals[::-1], evecs[:, ::-1]
        assert np.allclose(model.eigenvalues, evals, atol=1e-8)
        for j in range(d):
            dot = abs(model.components[:, j] @ evecs[:, j])
            assert dot == pytest.approx(1.0, abs=1e-8)  # equal up to sign


def test_pca_isotropic_evr():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((100_000, 4))
    model = fit_pca(x)
    assert np.all(np.abs(model.evr - 0.25) < 0.02)


def test_pca_orthonormal_and_evr_normalized(rng):
    x = rng.standard_normal((40, 6))
    model = fit_pca(x)
    assert np.allclose(model.components.T @ model.components, np.eye(6), atol=1e-8)
    assert model.evr.sum() == pytest.approx(1.0, abs=1e-9)
    assert np.all(np.diff(model.eigenvalues) <= 1e-10)


def test_pca_fewer_rows_than_dims_trailing_zero_eigenvalues(rng):
    x = rng.standard_normal((5, 12))
    model = fit_pca(x)
    assert np.allclose(model.eigenvalues[5:], 0.0)
    assert model.rank <= 4  # centering removes one more degree of freedom
    assert np.allclose(model.components.T @ model.components, np.eye(12), atol=1e-8)


def test_pca_requires_two_rows():
    with pytest.raises(ParameterError):
        fit_pca(np.ones((1, 3)))


def test_pca_deterministic_sign_convention(rng):
    x = rng.standard_normal((30, 5))
    model = fit_pca(x)
    peaks = model.components[
        np.argmax(np.abs(model.components), axis=0), np.arange(5)
    ]
    assert np.all(peaks > 0)


# -- projection -----------------------------------------------------------------------


def test_project_full_rank_reconstruction(rng):
    x = rng.standard_normal((25, 7))
    model = fit_pca(x)
    z = project(x, model, 7)
    assert np.abs(reconstruct(z, model) - x).max() < 1e-8


def test_project_one_dimensional_example():
    x = np.array([[1.0, 0.0], [-1.0, 0.0]])
    model = fit_pca(x)
    z = project(x, model, 1)
    assert np.allclose(z.ravel(), [1.0, -1.0])


def test_project_range_validation(rng):
    x = rng.standard_normal((10, 4))
    model = fit_pca(x)
    with pytest.raises(ParameterError):
        project(x, model, 0)
    with pytest.raises(ParameterError):
        project(x, model, 5)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 100_000), l=st.integers(1, 6))
def test_projection_contracts_pairwise_distances(seed, l):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((15, 6))
    model = fit_pca(x)
    z = project(x, model, l)
    for i in range(0, 15, 3):
        for j in range(i + 1, 15, 4):
            full = np.linalg.norm(x[i] - x[j])
            reduced = np.linalg.norm(z[i] - z[j])
            assert reduced <= full + 1e-9


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_euclidean_distance_symmetry_and_identity(seed):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((2, 8))
    assert np.linalg.norm(x - y) == pytest.approx(np.linalg.norm(y - x), abs=1e-12)
    assert np.linalg.norm(x - x) == 0.0


# -- oriented one-vs-one AUROC ----------------------------------------------------------


def test_auroc_perfect_separation():
    assert ovo_auroc_oriented(np.array([1.0, 2, 3, 4]), np.array([0, 0, 1, 1])) == 1.0


def test_auroc_orientation_flip():
    # raw AUROC 0.0; the orientation max flips it
    assert ovo_auroc_oriented(np.array([4.0, 3, 2, 1]), np.array([0, 0, 1, 1])) == 1.0


def test_auroc_three_quarters():
    got = ovo_auroc_oriented(np.array([0.1, 0.4, 0.35, 0.8]), np.array([0, 0, 1, 1]))
    assert got == pytest.approx(0.75)  # 3 of 4 cross-class pairs correctly ordered


def test_auroc_requires_two_classes():
    with pytest.raises(TaskError):
        ovo_auroc_oriented(np.array([1.0, 2.0]), np.array([3, 3]))


def pair_counting_auroc(scores, labels, pos, neg):
    """Independent oracle: count correctly ordered cross-class pairs."""
    s_pos = scores[labels == pos]
    s_neg = scores[labels == neg]
    wins = 0.0
    for a in s_pos:
        for b in s_neg:
            if a > b:
                wins += 1.0
            elif a == b:
                wins += 0.5
    return wins / (len(s_pos) * len(s_neg))


def oracle_ovo(scores, labels):
    classes = np.unique(labels)
    vals = []
    for i in range(len(classes)):
        for j in range(i + 1, len(classes)):
            a = pair_counting_auroc(scores, labels, classes[j], classes[i])
            vals.append(max(a, 1 - a))
    return float(np.mean(vals))


def test_auroc_matches_pair_counting_oracle(rng):
    for _ in range(60):
        n = int(rng.integers(4, 200))
        n_classes = int(rng.integers(2, 5))
        labels = rng.integers(0, n_classes, size=n)
        while len(np.unique(labels)) < 2:
            labels = rng.integers(0, n_classes, size=n)
        if rng.random() < 0.5:
            scores = rng.integers(0, 6, size=n).astype(float)  # force ties
        else:
            scores = rng.standard_normal(n)
        got = ovo_auroc_oriented(scores, labels)
        want = oracle_ovo(scores, labels)
        assert abs(got - want) < 1e-12
        assert got >= 0.5


def test_auroc_skips_empty_classes():
    scores = np.array([1.0, 2.0, 3.0, 4.0])
    labels = np.array([0, 0, 5, 5])  # class ids need not be dense
    assert ovo_auroc_oriented(scores, labels) == 1.0


# -- separability profile ----------------------------------------------------------------


def top_variance_table(seed=0):
    config = SynthConfig(
        dims=24, n_sites=2, n_classes=1, patients_per_site=10, slides_per_patient=1,
        patches_per_slide=60, site_strength=4.0, class_strength=0.0,
        slide_strength=0.1, noise=0.5, signature_placement="top_variance", seed=seed,
    )
    return generate(config)


def test_separability_signature_on_first_component():
    table = top_variance_table()
    model = fit_pca(table)
    profile = separability_profile(table, model, 12)
    assert profile.ovo_auroc[0] > 0.95
    assert np.all(profile.ovo_auroc[5:] < 0.6)


def test_separability_evr_passthrough():
    table = top_variance_table()
    model = fit_pca(table)
    profile = separability_profile(table, model, 10)
    assert np.array_equal(profile.evr, model.evr[:10])


def test_separability_permuted_labels_near_half():
    rng = np.random.default_rng(7)
    table = top_variance_table()
    model = fit_pca(table)
    scores = project(table, model, 1)[:, 0]
    permuted = rng.permutation(table.sites)
    auc = ovo_auroc_oriented(scores, permuted)
    assert 0.5 <= auc <= 0.55


def test_separability_excludes_zero_variance_components(rng):
    x = rng.standard_normal((6, 10)).astype(np.float32)
    table = make_table(rng, n_sites=2, patients_per_site=3, slides_per_patient=1,
                       patches_per_slide=1, dim=10)
    table.features[:] = x[: table.n_rows]
    model = fit_pca(table)
    profile = separability_profile(table, model, 10)
    assert profile.n_components <= model.rank


# -- reduced KNN curve ---------------------------------------------------------------------


def test_reduced_curve_full_rank_equals_baseline():
    table = top_variance_table(seed=3)
    split = patient_split(table, seed=1)
    curve, baseline = reduced_knn_curve(table, split, l_list=(1, 24), k=5)
    assert curve[-1][1] == baseline  # full basis preserves every distance


def test_reduced_curve_top_variance_saturates_at_one_component():
    table = top_variance_table(seed=4)
    split = patient_split(table, seed=1)
    curve, baseline = reduced_knn_curve(table, split, l_list=(1, 2, 5), k=5)
    assert abs(curve[0][1] - baseline) <= 0.02


def test_reduced_curve_low_variance_signature_needs_more_components():
    config = SynthConfig(
        dims=24, n_sites=2, n_classes=1, patients_per_site=12, slides_per_patient=1,
        patches_per_slide=60, site_strength=4.0, class_strength=0.0,
        slide_strength=0.0, noise=0.5, signature_placement="low_variance",
        n_distractors=4, seed=5,
    )
    table = generate(config)
    split = patient_split(table, seed=1)
    curve, baseline = reduced_knn_curve(table, split, l_list=(1, 8), k=5)
    acc_1 = curve[0][1]
    acc_past_distractors = curve[1][1]
    assert abs(acc_1 - 0.5) < 0.1  # distractor axis carries no site signal
    assert acc_past_distractors > acc_1 + 0.2
    assert abs(acc_past_distractors - baseline) <= 0.02  # signature recovered


def test_reduced_curve_rejects_out_of_range_components():
    table = top_variance_table()
    split = patient_split(table, seed=1)
    with pytest.raises(ParameterError):
        reduced_knn_curve(table, split, l_list=(1, 999))


# -- distance profiles ------------------------------------------------------------------


def profile_table(seed=0):
    config = SynthConfig(
        dims=16, n_sites=2, n_classes=2, patients_per_site=7, slides_per_patient=1,
        patches_per_slide=40, site_strength=8.0, class_strength=0.5,
        slide_strength=0.5, noise=0.5, seed=seed,
    )
    return generate(config)


def test_distance_profiles_groups_and_sorting():
    table = profile_table()
    ref = str(table.patch_ids[1])  # patch index 1 has class 1 (alternating)
    profiles = distance_profiles(table, ref, n_per_group=20, n_other_slides=5, seed=0)
    assert [p.group for p in profiles] == ["ss", "ossh", "osoh"]
    for p in profiles:
        d = p.sorted_distances
        assert np.all(d >= 0)
        assert np.all(np.diff(d) >= 0)
        assert len(p.class_labels) == len(d)
    assert len(profiles[0].sorted_distances) == 20
    assert len(profiles[1].sorted_distances) == 100
    assert len(profiles[2].sorted_distances) == 100


def test_distance_profiles_self_distance_zero_when_drawn():
    table = profile_table()
    ref = str(table.patch_ids[1])
    # with n_per_group covering the whole slide the reference must be drawn
    profiles = distance_profiles(table, ref, n_per_group=40, n_other_slides=5, seed=0)
    ss = profiles[0]
    assert ss.sorted_distances[0] == 0.0


def test_distance_profiles_site_separation_dominates():
    table = profile_table(seed=2)
    tumor_rows = np.flatnonzero(table.classes == 1)
    rng = np.random.default_rng(0)
    for ref_row in rng.choice(tumor_rows, size=5, replace=False):
        profiles = distance_profiles(
            table, str(table.patch_ids[ref_row]), n_per_group=20, n_other_slides=5,
            seed=int(ref_row),
        )
        by = {p.group: p for p in profiles}
        assert by["ss"].sorted_distances[-1] < by["osoh"].sorted_distances[0]


def test_distance_profiles_reference_must_be_tumor():
    table = profile_table()
    normal_ref = str(table.patch_ids[0])  # class 0
    with pytest.raises(ParameterError, match="tumor"):
        distance_profiles(table, normal_ref, n_per_group=10, seed=0)


def test_distance_profiles_unknown_reference():
    table = profile_table()
    with pytest.raises(ParameterError):
        distance_profiles(table, "no-such-patch", n_per_group=10, seed=0)


def test_distance_profiles_capacity_error():
    table = profile_table()
    ref = str(table.patch_ids[1])
    with pytest.raises(CapacityError):
        distance_profiles(table, ref, n_per_group=10, n_other_slides=50, seed=0)


def test_distance_profiles_requires_even_group_size():
    table = profile_table()
    with pytest.raises(ParameterError):
        distance_profiles(table, str(table.patch_ids[1]), n_per_group=7, seed=0)
