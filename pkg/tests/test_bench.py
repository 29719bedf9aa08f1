import numpy as np
import pytest

from conftest import auroc_pair_count_reference, best_rank2_reconstruction_reference
from odpc.bench import (
    ClassCatalog,
    PipelineSettings,
    SyntheticSpec,
    auroc,
    builtin_catalog,
    export_projection,
    generate_synthetic_raw,
    load_manifest_dataset,
    make_split,
    openness,
    openness_literal,
    pca_projection,
    read_results_csv,
    run_benchmark,
    synthetic_class_names,
    synthetic_feature_dataset,
    write_manifest,
    write_results_csv,
    write_table_md,
)
from odpc.encoders import EmbeddingMatrix, ToyEncoderConfig
from odpc.errors import ConfigError, InvalidArgumentError


# ---------------------------------------------------------------------------
# openness

@pytest.mark.parametrize(
    "n_train,n_test_total,expected",
    [(6, 10, 13.39), (4, 14, 33.33), (4, 54, 62.86), (20, 100, 42.26), (20, 200, 57.35)],
)
def test_openness_matches_published_benchmark_values(n_train, n_test_total, expected):
    assert openness(n_train, n_test_total) == pytest.approx(expected, abs=0.01)


def test_openness_closed_world_zero():
    for m in (1, 5, 80):
        assert openness(m, m) == pytest.approx(0.0, abs=1e-12)


def test_openness_monotone_in_total_classes():
    values = [openness(6, t) for t in range(6, 60)]
    assert all(b > a for a, b in zip(values, values[1:]))


def test_openness_invalid_counts():
    with pytest.raises(InvalidArgumentError):
        openness(0, 5)
    with pytest.raises(InvalidArgumentError):
        openness(6, 5)


def test_openness_literal_form_documented_discrepancy():
    # the alternative denominator reading gives 7.42% for the 6-known /
    # 4-unknown split, far from the published 13.39%
    assert openness_literal(6, 10, 4) == pytest.approx(7.42, abs=0.01)


# ---------------------------------------------------------------------------
# auroc

def test_auroc_perfect_separation():
    assert auroc([0.1, 0.2], [0.9, 1.0]) == 1.0
    assert auroc([0.9, 1.0], [0.1, 0.2]) == 0.0


def test_auroc_identical_multisets_half():
    assert auroc([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == 0.5


def test_auroc_hand_counted():
    assert auroc([1.0, 3.0], [2.0, 4.0]) == 0.75


@pytest.mark.parametrize("seed", range(10))
def test_auroc_equals_pair_count_oracle(seed):
    r = np.random.default_rng(seed)
    n_id, n_ood = int(r.integers(3, 80)), int(r.integers(3, 80))
    if seed % 2:
        id_s = r.integers(0, 12, n_id).astype(float)   # force ties
        ood_s = r.integers(0, 12, n_ood).astype(float)
    else:
        id_s = r.standard_normal(n_id)
        ood_s = r.standard_normal(n_ood)
    assert auroc(id_s, ood_s) == float(auroc_pair_count_reference(list(id_s), list(ood_s)))


def test_auroc_complement_on_tie_free_scores(rng):
    a = rng.standard_normal(30)
    b = rng.standard_normal(40)
    assert auroc(a, b) + auroc(b, a) == pytest.approx(1.0, abs=1e-12)


def test_auroc_invariant_under_monotone_transform(rng):
    a = rng.standard_normal(25)
    b = rng.standard_normal(25) + 0.5
    base = auroc(a, b)
    assert auroc(np.exp(a), np.exp(b)) == pytest.approx(base, abs=1e-12)
    assert auroc(3 * a + 7, 3 * b + 7) == pytest.approx(base, abs=1e-12)


def test_auroc_rejects_empty():
    with pytest.raises(InvalidArgumentError):
        auroc([], [1.0])


# ---------------------------------------------------------------------------
# splits

def test_make_split_counts_per_protocol():
    checks = {
        "cifar10_6v4": (6, 4),
        "cifar_plus_10": (4, 10),
        "cifar_plus_50": (4, 50),
        "cifar100_20v80": (20, 80),
        "synthetic": (6, 4),
    }
    for protocol, (k, u) in checks.items():
        split = make_split(protocol, builtin_catalog(protocol), seed=3)
        assert len(split.known_classes) == k
        assert len(split.unknown_classes) == u
        assert not set(split.known_classes) & set(split.unknown_classes)


def test_make_split_deterministic():
    catalog = builtin_catalog("cifar10_6v4")
    a = make_split("cifar10_6v4", catalog, seed=9)
    b = make_split("cifar10_6v4", catalog, seed=9)
    c = make_split("cifar10_6v4", catalog, seed=10)
    assert a.known_classes == b.known_classes and a.unknown_classes == b.unknown_classes
    assert a.known_classes != c.known_classes or a.unknown_classes != c.unknown_classes


def test_cifar_plus_splits_respect_animal_markers():
    catalog = builtin_catalog("cifar_plus_10")
    split = make_split("cifar_plus_10", catalog, seed=1)
    assert set(split.known_classes) == {"airplane", "automobile", "ship", "truck"}
    assert set(split.unknown_classes) <= catalog.extra_animal_classes
    big = make_split("cifar_plus_50", builtin_catalog("cifar_plus_50"), seed=1)
    assert len(big.unknown_classes) == 50
    assert set(big.unknown_classes) == set(builtin_catalog("cifar_plus_50").extra_animal_classes)


def test_tinyimagenet_split_needs_user_catalog():
    with pytest.raises(ConfigError):
        builtin_catalog("tinyimagenet_20v180")
    catalog = ClassCatalog(classes=tuple(f"wnid_{i:03d}" for i in range(200)))
    split = make_split("tinyimagenet_20v180", catalog, seed=0)
    assert len(split.known_classes) == 20 and len(split.unknown_classes) == 180
    assert split.openness_pct == pytest.approx(57.35, abs=0.01)


def test_split_openness_property():
    split = make_split("cifar10_6v4", builtin_catalog("cifar10_6v4"), seed=0)
    assert split.openness_pct == pytest.approx(13.39, abs=0.01)


def test_insufficient_catalog_rejected():
    tiny = ClassCatalog(classes=("a", "b", "c"))
    with pytest.raises(InvalidArgumentError):
        make_split("cifar10_6v4", tiny, seed=0)


# ---------------------------------------------------------------------------
# synthetic data and manifests

def test_synthetic_raw_shapes_and_determinism():
    spec = SyntheticSpec(seed=5)
    names, raw, labels, is_train = generate_synthetic_raw(spec)
    assert len(names) == 10 and len(set(names)) == 10
    assert raw.shape == (10 * 300, 64)
    assert int(is_train.sum()) == 10 * 200
    names2, raw2, labels2, is_train2 = generate_synthetic_raw(spec)
    assert np.array_equal(raw, raw2)
    assert names == names2


def test_synthetic_feature_dataset_has_unit_rows():
    ds = synthetic_feature_dataset(SyntheticSpec(seed=1, train_per_class=20, test_per_class=10),
                                   ToyEncoderConfig())
    assert ds.features.rows == 10 * 30
    norms = np.linalg.norm(ds.features.values.astype(np.float64), axis=1)
    assert np.max(np.abs(norms - 1.0)) < 1e-4


def test_manifest_roundtrip(tmp_path, rng):
    names = list(synthetic_class_names(3))
    labels = np.array([0, 1, 2, 1])
    is_train = np.array([True, True, False, False])
    ids = [f"s{i}" for i in range(4)]
    path = tmp_path / "labels.json"
    write_manifest(path, "toy", names, labels, is_train, ids, animal_classes=[names[0]])
    feats = EmbeddingMatrix(rng.standard_normal((4, 8)).astype(np.float32))
    ds = load_manifest_dataset(path, feats)
    assert ds.class_names == names
    assert np.array_equal(ds.labels, labels)
    assert np.array_equal(ds.is_train, is_train)
    assert ds.sample_ids == ids


def test_manifest_row_count_mismatch(tmp_path, rng):
    names = list(synthetic_class_names(2))
    path = tmp_path / "labels.json"
    write_manifest(path, "toy", names, np.array([0, 1]), np.array([True, False]), ["a", "b"])
    with pytest.raises(ConfigError):
        load_manifest_dataset(path, EmbeddingMatrix(rng.standard_normal((3, 4)).astype(np.float32)))


# ---------------------------------------------------------------------------
# benchmark runs (desk-scale settings to stay fast)

def _fast_settings(variant="pcc_ce"):
    from odpc.trainer import TrainingConfig

    return PipelineSettings(
        training=TrainingConfig(epochs=2),
        synthetic=SyntheticSpec(train_per_class=40, test_per_class=20),
        variant=variant,
    )


def test_run_benchmark_repeats_and_determinism():
    res1 = run_benchmark("synthetic", 2, _fast_settings(), base_seed=3)
    res2 = run_benchmark("synthetic", 2, _fast_settings(), base_seed=3)
    assert res1.aurocs == res2.aurocs
    assert res1.seeds == [3, 4]
    assert res1.openness_pct == pytest.approx(13.39, abs=0.01)
    assert all(0.0 <= a <= 1.0 for a in res1.aurocs)


def test_run_benchmark_single_repeat_zero_std():
    res = run_benchmark("synthetic", 1, _fast_settings("passthrough"), base_seed=0)
    assert res.std == 0.0


def test_results_csv_roundtrip_and_table(tmp_path):
    res = run_benchmark("synthetic", 2, _fast_settings("passthrough"), base_seed=1)
    path = tmp_path / "results.csv"
    write_results_csv([res], path)
    rows = read_results_csv(path)
    assert len(rows) == 2
    assert rows[0]["protocol"] == "synthetic"
    assert float(rows[0]["auroc"]) == res.aurocs[0]
    table = tmp_path / "table.md"
    write_table_md(rows, table)
    text = table.read_text()
    assert "synthetic" in text and "+-" in text


def test_run_benchmark_imported_dataset(tmp_path, rng):
    # an imported-features protocol: 10 fake classes, 30 samples each
    names = [f"c{i}" for i in range(10)]
    labels = np.repeat(np.arange(10), 30)
    is_train = np.tile(np.arange(30) < 20, 10)
    feats = rng.standard_normal((300, 512))
    feats /= np.linalg.norm(feats, axis=1, keepdims=True)
    ds_path = tmp_path / "labels.json"
    write_manifest(ds_path, "fake", names, labels, is_train, [str(i) for i in range(300)])
    dataset = load_manifest_dataset(ds_path, EmbeddingMatrix(feats.astype(np.float32), normalized=True))
    catalog = ClassCatalog(classes=tuple(names))
    settings = _fast_settings("passthrough")
    res = run_benchmark("synthetic", 1, settings, base_seed=0, dataset=dataset, catalog=catalog)
    assert 0.0 <= res.aurocs[0] <= 1.0


def test_run_benchmark_validates_repeats():
    with pytest.raises(InvalidArgumentError):
        run_benchmark("synthetic", 0, _fast_settings())


# ---------------------------------------------------------------------------
# projection export

def test_projection_identity_on_centered_2d():
    pts = np.array([[2.0, 0.0], [-2.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
    coords, comps = pca_projection(pts, 2)
    # recovered up to the fixed sign convention; x-axis has larger variance
    assert np.allclose(np.abs(coords), np.abs(pts), atol=1e-12)
    assert np.allclose(np.abs(comps), np.eye(2), atol=1e-12)
    for row in comps:
        nz = row[np.abs(row) > 1e-12]
        assert nz[0] > 0


def test_projection_duplicated_sample_duplicates_row(tmp_path):
    pts = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 2.0]])
    coords = export_projection(pts, ["a", "b", "a", "c"], tmp_path / "proj.csv")
    assert np.allclose(coords[0], coords[2])
    lines = (tmp_path / "proj.csv").read_text().strip().splitlines()
    assert lines[0] == "sample_id,x,y,label,id_or_ood"
    assert len(lines) == 5


@pytest.mark.parametrize("seed", range(3))
def test_projection_matches_eigendecomposition_rank2(seed):
    r = np.random.default_rng(seed)
    data = r.standard_normal((10, 512))
    coords, comps = pca_projection(data, 2)
    ours = coords @ comps
    ref = best_rank2_reconstruction_reference(data)
    assert np.max(np.abs(ours - ref)) < 1e-6


def test_projection_rank0_rejected():
    flat = np.ones((5, 4))
    with pytest.raises(InvalidArgumentError):
        pca_projection(flat, 2)


def test_projection_needs_three_samples():
    with pytest.raises(InvalidArgumentError):
        pca_projection(np.eye(2), 2)


def test_export_projection_id_ood_flags(tmp_path):
    pts = np.vstack([np.eye(3), -np.eye(3)])
    export_projection(pts, list("abcdef"), tmp_path / "p.csv",
                      id_flags=[True, True, True, False, False, False])
    lines = (tmp_path / "p.csv").read_text().strip().splitlines()[1:]
    assert [ln.split(",")[-1] for ln in lines] == ["id"] * 3 + ["ood"] * 3
