import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from samil.errors import ConfigurationError, FormatError
from samil.synthdata import (
    IRRELEVANT_VIEWS,
    RELEVANT_VIEWS,
    GeneratorConfig,
    ViewType,
    class_counts,
    dataset_from_bytes,
    dataset_to_bytes,
    generate_dataset,
    generate_study,
    load_dataset,
    oracle_view_relevance,
    relevance_vector,
    render_instance,
    save_dataset,
)

TINY = GeneratorConfig(n_train=12, n_val=6, n_test=6, n_pretrain=4, k_min=3, k_max=8, seed=5)


@pytest.fixture(scope="module")
def tiny_bundle():
    return generate_dataset(TINY)


def test_render_is_deterministic():
    a = render_instance(ViewType.RELEVANT_A, 2, np.random.default_rng(3))
    b = render_instance(ViewType.RELEVANT_A, 2, np.random.default_rng(3))
    np.testing.assert_array_equal(a, b)
    assert a.shape == (16, 16) and a.min() >= 0 and a.max() <= 1


@pytest.mark.parametrize("view", IRRELEVANT_VIEWS)
def test_irrelevant_views_ignore_severity(view):
    a = render_instance(view, 0, np.random.default_rng(9), nuisance=0.3)
    b = render_instance(view, 2, np.random.default_rng(9), nuisance=0.3)
    np.testing.assert_array_equal(a, b)


def test_render_rejects_bad_severity():
    with pytest.raises(ValueError):
        render_instance(ViewType.RELEVANT_B, 3, np.random.default_rng(0))


def _fit_linear_probe(x, y):
    """Least-squares linear classifier with intercept, targets +-1."""
    X = np.c_[x, np.ones(len(x))]
    w = np.linalg.lstsq(X, np.where(y == 1, 1.0, -1.0), rcond=None)[0]
    return lambda z: (np.c_[z, np.ones(len(z))] @ w > 0).astype(int)


def test_pixel_linear_probe_separates_extreme_severities():
    rng = np.random.default_rng(0)
    x, y = [], []
    for i in range(2400):
        sev = 2 * (i % 2)
        view = RELEVANT_VIEWS[(i // 2) % 2]
        x.append(render_instance(view, sev, rng).ravel())
        y.append(sev // 2)
    x, y = np.array(x), np.array(y)
    probe = _fit_linear_probe(x[:2000], y[:2000])
    assert np.mean(probe(x[2000:]) == y[2000:]) > 0.90


def test_study_basics():
    cfg = GeneratorConfig(oracle_noise=0.0)
    study = generate_study(cfg, 2, np.random.default_rng(1))
    assert study.label == 2
    assert cfg.k_min <= study.size <= cfg.k_max
    rel = np.isin(study.view_types, [int(v) for v in RELEVANT_VIEWS])
    np.testing.assert_array_equal(relevance_vector(study), rel.astype(float))
    assert rel.sum() >= 1


def test_k_bounds_over_many_draws():
    cfg = GeneratorConfig(k_min=20, k_max=60)
    rng = np.random.default_rng(2)
    ks = [int(rng.integers(cfg.k_min, cfg.k_max + 1)) for _ in range(10_000)]
    assert min(ks) == 20 and max(ks) == 60
    # the generator draws K first from the study stream, so the bound check on real studies is cheap
    for i in range(50):
        s = generate_study(GeneratorConfig(image_size=8, k_min=2, k_max=5), 0, np.random.default_rng(i))
        assert 2 <= s.size <= 5


def test_label_change_only_touches_relevant_instances():
    cfg = GeneratorConfig()
    a = generate_study(cfg, 0, np.random.default_rng([4, 1, 7]))
    b = generate_study(cfg, 2, np.random.default_rng([4, 1, 7]))
    np.testing.assert_array_equal(a.view_types, b.view_types)
    np.testing.assert_array_equal(a.oracle_relevance, b.oracle_relevance)
    relevant = np.isin(a.view_types, [int(v) for v in RELEVANT_VIEWS])
    np.testing.assert_array_equal(a.instances[~relevant], b.instances[~relevant])
    assert not np.array_equal(a.instances[relevant], b.instances[relevant])


def test_oracle_relevance_at_rho_zero():
    s = generate_study(GeneratorConfig(oracle_noise=0.0), 1, np.random.default_rng(3))
    for k, v in enumerate(s.view_types):
        assert oracle_view_relevance(s, k) == (1.0 if ViewType(v).relevant else 0.0)
    with pytest.raises(IndexError):
        oracle_view_relevance(s, s.size)


def test_oracle_noise_expectation():
    cfg = GeneratorConfig(oracle_noise=0.1, image_size=8)
    values = []
    for i in range(400):
        s = generate_study(cfg, 0, np.random.default_rng(i))
        values.extend(s.oracle_relevance[~np.isin(s.view_types, [int(v) for v in RELEVANT_VIEWS])])
    assert abs(np.mean(values) - 0.05) < 0.01


@given(st.integers(1, 500), st.floats(0.05, 0.9), st.floats(0.05, 0.9))
def test_class_counts(n, a, b):
    p = np.array([a, b, 1.0])
    p /= p.sum()
    counts = class_counts(n, p)
    assert sum(counts) == n
    assert np.all(np.abs(np.array(counts) - p * n) < 1.0)


def test_dataset_splits(tiny_bundle):
    assert [len(tiny_bundle.split(s)) for s in ("train", "val", "test", "pretrain")] == [12, 6, 6, 4]
    assert all(s.label is None for s in tiny_bundle.pretrain)
    ids = [s.study_id for s in tiny_bundle.train + tiny_bundle.val + tiny_bundle.test + tiny_bundle.pretrain]
    assert len(set(ids)) == len(ids)


def test_class_frequencies_within_tolerance():
    cfg = GeneratorConfig(n_train=500, n_val=150, n_test=150, n_pretrain=0, image_size=8, k_min=1, k_max=2)
    bundle = generate_dataset(cfg)
    for split in ("train", "val", "test"):
        labels = np.array([s.label for s in bundle.split(split)])
        freq = np.bincount(labels, minlength=3) / labels.size
        assert np.all(np.abs(freq - np.array(cfg.class_proportions)) <= 0.02)


def test_pretrain_pool_covers_every_severity():
    cfg = GeneratorConfig(n_train=3, n_val=3, n_test=3, n_pretrain=30, image_size=8, k_min=2, k_max=3,
                          relevant_fraction=(1.0, 1.0), noise_std=0.0, oracle_noise=0.0)
    bundle = generate_dataset(cfg)
    # ring thickness shows up as mean brightness of fully relevant studies
    brightness = sorted(float(s.instances.mean()) for s in bundle.pretrain)
    assert brightness[-1] - brightness[0] > 0.05


def test_generation_is_deterministic(tiny_bundle):
    again = generate_dataset(TINY)
    assert again == tiny_bundle
    assert dataset_to_bytes(again) == dataset_to_bytes(tiny_bundle)


def test_infeasible_proportions():
    with pytest.raises(ConfigurationError):
        generate_dataset(GeneratorConfig(class_proportions=(0.5, 0.5, 0.5)))


def test_dataset_round_trip(tiny_bundle, tmp_path):
    path = tmp_path / "data.bin"
    save_dataset(tiny_bundle, path)
    loaded = load_dataset(path)
    assert loaded == tiny_bundle
    assert loaded.fingerprint == TINY.fingerprint()
    s0, l0 = tiny_bundle.train[0], loaded.train[0]
    np.testing.assert_array_equal(s0.view_types, l0.view_types)
    assert s0.nuisance == l0.nuisance


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_truncated_or_corrupt_dataset(cut):
    blob = dataset_to_bytes(generate_dataset(GeneratorConfig(n_train=3, n_val=3, n_test=3, n_pretrain=1,
                                                             image_size=8, k_min=1, k_max=3)))
    with pytest.raises(FormatError):
        dataset_from_bytes(blob[: cut % len(blob)])
    flipped = bytearray(blob)
    flipped[cut % len(blob)] ^= 0x01
    with pytest.raises(FormatError):
        dataset_from_bytes(bytes(flipped))


def test_config_round_trip():
    cfg = GeneratorConfig(signal_scale=0.7, seed=3)
    assert GeneratorConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.fingerprint() != GeneratorConfig(seed=4).fingerprint()
