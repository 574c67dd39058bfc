import numpy as np
import pytest

from crlab.data import (
    AugmentParams,
    DatasetSpec,
    OodSpec,
    augment,
    export_csv,
    generate_dataset,
    import_csv,
    inject_ood,
    ood_centers,
    sample_batch,
)
from crlab.numerics import ConfigError, make_rng


def test_zero_noise_samples_sit_on_centers():
    centers = np.array([[5.0, 0.0], [-5.0, 0.0]])
    ds = generate_dataset(DatasetSpec(n_classes=2, input_dim=2, noise=0.0, centers=centers, n_unlabeled=50, n_test=50))
    for split in ds:
        np.testing.assert_array_equal(split.x, centers[split._labels])
        # the vertical axis through the origin separates the classes
        assert np.all((split.x[:, 0] > 0) == (split._labels == 0))


def test_dataset_deterministic():
    a = generate_dataset(DatasetSpec(seed=4))
    b = generate_dataset(DatasetSpec(seed=4))
    for sa, sb in zip(a, b):
        assert sa.x.tobytes() == sb.x.tobytes()
        assert sa._labels.tobytes() == sb._labels.tobytes()


def test_stratified_labels():
    ds = generate_dataset(DatasetSpec(labels_per_class=3, n_classes=5))
    np.testing.assert_array_equal(np.bincount(ds.labeled._labels), [3] * 5)


def test_class_proportions_uniform():
    ds = generate_dataset(DatasetSpec(n_classes=4, n_unlabeled=10_000, n_test=0, seed=1))
    counts = np.bincount(ds.unlabeled._labels, minlength=4)
    sigma = np.sqrt(10_000 * 0.25 * 0.75)
    assert np.all(np.abs(counts - 2500) <= 3 * sigma)


def test_duplicate_centers_rejected():
    with pytest.raises(ConfigError):
        generate_dataset(DatasetSpec(n_classes=2, input_dim=1, centers=np.array([[1.0], [1.0]])))


def test_bad_counts_rejected():
    with pytest.raises(ConfigError):
        generate_dataset(DatasetSpec(labels_per_class=0))


def test_augment_identity_and_dropout():
    x = make_rng(0).standard_normal(6)
    ident = AugmentParams(0.0, 0.0, 0.0, 0.0)
    np.testing.assert_array_equal(augment(x, "weak", make_rng(1), ident), x)
    np.testing.assert_array_equal(augment(x, "strong", make_rng(1), ident), x)
    np.testing.assert_array_equal(augment(x, "strong", make_rng(1), AugmentParams(p_drop=1.0)), 0.0)


def test_augment_noise_std():
    out = augment(np.zeros((10_000, 1)), "strong", make_rng(2), AugmentParams(sigma_strong=0.5, p_drop=0.0, gamma=0.0))
    assert abs(out.std() - 0.5) <= 0.03 * 0.5


def test_augment_deterministic_and_finite():
    x = make_rng(3).standard_normal((20, 4))
    a = augment(x, "strong", make_rng(5))
    assert a.tobytes() == augment(x, "strong", make_rng(5)).tobytes()
    assert np.all(np.isfinite(a))


def test_augment_unknown_strength():
    with pytest.raises(ConfigError):
        augment(np.zeros(2), "medium", make_rng(0))


def test_sample_batch_shapes():
    ds = generate_dataset(DatasetSpec())
    b, a = sample_batch(ds.labeled, ds.unlabeled, 4, 7, 2, make_rng(0))
    assert b.x_labeled.shape[0] == 4 and b.x_unlabeled.shape[0] == 28
    assert a.strong.shape[0] == 56 and a.weak.shape[0] == 28
    assert np.all(a.source < 28)
    np.testing.assert_array_equal(np.bincount(a.source), [2] * 28)


def test_sample_batch_single_view():
    ds = generate_dataset(DatasetSpec())
    _, a = sample_batch(ds.labeled, ds.unlabeled, 3, 5, 1, make_rng(0))
    assert a.strong.shape[0] == 15


def test_sample_batch_rejects_empty_pool():
    ds = generate_dataset(DatasetSpec(n_unlabeled=0))
    with pytest.raises(ConfigError):
        sample_batch(ds.labeled, ds.unlabeled, 2, 2, 2, make_rng(0))


def test_sample_batch_does_not_read_hidden_flags():
    ds = generate_dataset(DatasetSpec())
    sample_batch(ds.labeled, ds.unlabeled, 4, 7, 2, make_rng(0))
    assert ds.unlabeled.hidden_reads == 0


def test_inject_ood_counts():
    spec = DatasetSpec(seed=2)
    ds = generate_dataset(spec)
    assert inject_ood(ds.unlabeled, OodSpec(count=0), spec) is ds.unlabeled
    out = inject_ood(ds.unlabeled, OodSpec(count=300, seed=1), spec)
    assert len(out) == len(ds.unlabeled) + 300
    assert int(out._is_ood.sum()) == 300
    assert np.all(out._labels[out._is_ood] == -1)
    again = inject_ood(ds.unlabeled, OodSpec(count=300, seed=1), spec)
    assert again.x.tobytes() == out.x.tobytes()


def test_far_ood_centers_are_far():
    spec = DatasetSpec(seed=3, noise=0.5)
    c = ood_centers(OodSpec(count=1, preset="far"), spec)
    dist = np.linalg.norm(c[:, None] - spec.resolve_centers()[None], axis=-1)
    assert dist.min() >= 5 * spec.noise


def test_csv_roundtrip(tmp_path):
    spec = DatasetSpec(n_unlabeled=30, n_test=20)
    ds = generate_dataset(spec)
    ds.unlabeled = inject_ood(ds.unlabeled, OodSpec(count=5), spec)
    path = tmp_path / "d.csv"
    export_csv(ds, path)
    header = path.read_text().splitlines()[0]
    assert header == ",".join([f"x{i}" for i in range(8)] + ["label", "is_ood", "split"])
    back = import_csv(path, spec)
    for a, b in zip(ds, back):
        assert a.x.tobytes() == b.x.tobytes()
        np.testing.assert_array_equal(a._labels, b._labels)
        np.testing.assert_array_equal(a._is_ood, b._is_ood)
