import struct

import numpy as np
import pytest

from embaudit.errors import ConsistencyError, DataError, FormatError, IncompatibilityError
from embaudit.table import (
    EmbeddingTable,
    LabelCodebook,
    PatchMeta,
    concat_tables,
    load_table,
    save_table,
)

from conftest import make_table


def small_table(features, classes=None, model_tag="m"):
    n = len(features)
    return EmbeddingTable(
        np.asarray(features, dtype=np.float32),
        patch_ids=[f"p{i}" for i in range(n)],
        slide_ids=[f"sl{i % 2}" for i in range(n)],
        patient_ids=[f"pa{i % 2}" for i in range(n)],
        sites=[i % 2 for i in range(n)],
        classes=classes,
        model_tag=model_tag,
    )


def test_round_trip_small(tmp_path):
    t = small_table(np.arange(12, dtype=np.float32).reshape(3, 4))
    path = tmp_path / "t.emb"
    save_table(t, path)
    t2 = load_table(path)
    assert t2.n_rows == 3 and t2.dim == 4
    assert t == t2


def test_round_trip_100_random_tables(tmp_path):
    rng = np.random.default_rng(99)
    for i in range(100):
        t = make_table(
            rng,
            n_sites=int(rng.integers(1, 4)),
            patients_per_site=int(rng.integers(1, 4)),
            slides_per_patient=int(rng.integers(1, 3)),
            patches_per_slide=int(rng.integers(1, 6)),
            dim=int(rng.integers(1, 9)),
            with_classes=bool(rng.integers(0, 2)),
        )
        path = tmp_path / f"t{i}.emb"
        save_table(t, path)
        t2 = load_table(path)
        assert np.array_equal(
            t.features.view(np.uint32), t2.features.view(np.uint32)
        ), "features must round-trip bit-exactly"
        assert t == t2


def test_round_trip_empty_table(tmp_path):
    t = EmbeddingTable(
        np.empty((0, 8), dtype=np.float32),
        patch_ids=[], slide_ids=[], patient_ids=[], sites=[],
    )
    save_table(t, tmp_path / "e.emb")
    t2 = load_table(tmp_path / "e.emb")
    assert t2.n_rows == 0 and t2.dim == 8


def test_round_trip_widest_feature_dim(tmp_path):
    rng = np.random.default_rng(1)
    t = small_table(rng.standard_normal((2, 1536)).astype(np.float32))
    save_table(t, tmp_path / "wide.emb")
    t2 = load_table(tmp_path / "wide.emb")
    assert t2.dim == 1536
    assert np.array_equal(t.features, t2.features)


def test_header_layout(tmp_path):
    t = small_table(np.zeros((3, 4), dtype=np.float32))
    path = tmp_path / "t.emb"
    save_table(t, path)
    raw = path.read_bytes()
    assert raw[0:4] == b"EMB1"
    assert struct.unpack("<I", raw[4:8])[0] == 1
    assert struct.unpack("<Q", raw[8:16])[0] == 3
    assert struct.unpack("<Q", raw[16:24])[0] == 4
    assert raw[24] == 0x01
    assert raw[25:32] == b"\x00" * 7
    assert len(raw) == 32 + 3 * 4 * 4


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.emb"
    path.write_bytes(b"NOPE" + b"\x00" * 60)
    with pytest.raises(FormatError):
        load_table(path)


def test_metadata_row_count_mismatch(tmp_path):
    t = small_table(np.zeros((3, 4), dtype=np.float32))
    path = tmp_path / "t.emb"
    save_table(t, path)
    meta = path.with_name(path.name + ".meta.csv")
    lines = meta.read_text().splitlines()
    meta.write_text("\n".join(lines[:-1]) + "\n")  # drop one row
    with pytest.raises(ConsistencyError):
        load_table(path)


def test_nan_row_reported(tmp_path):
    features = np.zeros((9, 2), dtype=np.float32)
    features[7, 1] = np.nan
    with pytest.raises(DataError, match="row 7"):
        EmbeddingTable(
            features,
            patch_ids=[f"p{i}" for i in range(9)],
            slide_ids=["s"] * 9,
            patient_ids=["pa"] * 9,
            sites=[0] * 9,
        )


def test_duplicate_patch_id_rejected():
    with pytest.raises(ConsistencyError, match="duplicate"):
        EmbeddingTable(
            np.zeros((2, 2), dtype=np.float32),
            patch_ids=["p", "p"],
            slide_ids=["s", "s"],
            patient_ids=["pa", "pa"],
            sites=[0, 0],
        )


def test_slide_maps_must_be_functions():
    with pytest.raises(ConsistencyError, match="multiple patients"):
        EmbeddingTable(
            np.zeros((2, 2), dtype=np.float32),
            patch_ids=["a", "b"],
            slide_ids=["s", "s"],
            patient_ids=["p1", "p2"],
            sites=[0, 0],
        )
    with pytest.raises(ConsistencyError, match="multiple sites"):
        EmbeddingTable(
            np.zeros((2, 2), dtype=np.float32),
            patch_ids=["a", "b"],
            slide_ids=["s", "s"],
            patient_ids=["p", "p"],
            sites=[0, 1],
        )


def test_missing_class_is_legal_and_round_trips(tmp_path):
    t = small_table(np.zeros((4, 2), dtype=np.float32), classes=[0, None, 1, None])
    assert not t.has_class_labels()
    save_table(t, tmp_path / "t.emb")
    t2 = load_table(tmp_path / "t.emb")
    assert t2.meta(1).class_label is None
    assert t2.meta(0).class_label == 0


def test_meta_view_fields():
    t = small_table(np.zeros((2, 2), dtype=np.float32), classes=[1, 0])
    m = t.meta(0)
    assert isinstance(m, PatchMeta)
    assert m.patch_id == "p0" and m.slide_id == "sl0" and m.site_label == 0
    assert m.class_label == 1 and m.norm_variant == "raw"


def test_concat_tables():
    a = small_table(np.ones((2, 8), dtype=np.float32))
    b = EmbeddingTable(
        np.zeros((3, 8), dtype=np.float32),
        patch_ids=[f"q{i}" for i in range(3)],
        slide_ids=["x"] * 3,
        patient_ids=["y"] * 3,
        sites=[1] * 3,
        model_tag="m",
    )
    merged = concat_tables([a, b])
    assert merged.n_rows == 5
    assert list(merged.patch_ids) == ["p0", "p1", "q0", "q1", "q2"]


def test_concat_dimension_mismatch():
    a = small_table(np.ones((2, 8), dtype=np.float32))
    b = small_table(np.ones((2, 16), dtype=np.float32))
    b2 = EmbeddingTable(
        b.features, patch_ids=["q0", "q1"], slide_ids=["x"] * 2,
        patient_ids=["y"] * 2, sites=[0, 0], model_tag="m",
    )
    with pytest.raises(IncompatibilityError):
        concat_tables([a, b2])


def test_concat_duplicate_patch_id():
    a = small_table(np.ones((2, 4), dtype=np.float32))
    b = small_table(np.ones((2, 4), dtype=np.float32))
    with pytest.raises(ConsistencyError):
        concat_tables([a, b])


def test_codebook_round_trip(tmp_path):
    t = EmbeddingTable(
        np.zeros((2, 2), dtype=np.float32),
        patch_ids=["a", "b"],
        slide_ids=["s", "s"],
        patient_ids=["p", "p"],
        sites=[0, 0],
        classes=[0, 1],
        model_tag="extractor-v2",
        codebook=LabelCodebook(site_names=["siteA"], class_names=["normal", "tumor"]),
    )
    save_table(t, tmp_path / "t.emb")
    t2 = load_table(tmp_path / "t.emb")
    assert t2.model_tag == "extractor-v2"
    assert t2.codebook.site_names == ["siteA"]
    assert t2.codebook.class_names == ["normal", "tumor"]


def test_codebook_range_validation():
    with pytest.raises(ConsistencyError):
        EmbeddingTable(
            np.zeros((1, 2), dtype=np.float32),
            patch_ids=["a"], slide_ids=["s"], patient_ids=["p"], sites=[3],
            codebook=LabelCodebook(site_names=["only-one"]),
        )
