import numpy as np
import pytest

from rendergan.errors import ConfigurationError, MetricUndefinedError, ShapeError
from rendergan.metrics import (MetricProtocol, encode_label_patch, kid,
                               layout_density, mmd2_unbiased, pair_patches,
                               polynomial_kernel, skvd_family)


# ---------------------------------------------------------------------------
# oracles


def mmd2_bruteforce(x, y):
    """Literal double-loop unbiased estimator used as the reference."""
    n, m = len(x), len(y)
    d = x.shape[1]
    k = lambda a, b: (np.dot(a, b) / d + 1.0) ** 3
    sxx = sum(k(x[i], x[j]) for i in range(n) for j in range(n) if i != j)
    syy = sum(k(y[i], y[j]) for i in range(m) for j in range(m) if i != j)
    sxy = sum(k(x[i], y[j]) for i in range(n) for j in range(m))
    return sxx / (n * (n - 1)) + syy / (m * (m - 1)) - 2.0 * sxy / (n * m)


def pairs_bruteforce(syn, rea, min_matches=128):
    out = []
    for i in range(syn.shape[0]):
        best_j, best_c = 0, -1
        for j in range(rea.shape[0]):
            c = int(np.sum(syn[i] == rea[j]))
            if c > best_c:
                best_j, best_c = j, c
        if best_c > min_matches:
            out.append((i, best_j))
    return out


# ---------------------------------------------------------------------------
# mmd2_unbiased


def test_mmd2_matches_bruteforce_on_random_instances(rng):
    for _ in range(20):
        n = int(rng.integers(2, 17))
        m = int(rng.integers(2, 17))
        d = int(rng.integers(1, 33))
        x = rng.normal(size=(n, d))
        y = rng.normal(size=(m, d))
        assert abs(mmd2_unbiased(x, y) - mmd2_bruteforce(x, y)) <= 1e-12


def test_mmd2_degenerate_identical_rows():
    v = np.arange(5.0)
    x = np.tile(v, (4, 1))
    y = np.tile(v, (6, 1))
    assert mmd2_unbiased(x, y) == 0.0


def test_mmd2_symmetry_and_permutation_invariance(rng):
    x = rng.normal(size=(7, 5))
    y = rng.normal(size=(9, 5))
    assert mmd2_unbiased(x, y) == mmd2_unbiased(y, x)
    perm = rng.permutation(7)
    assert mmd2_unbiased(x[perm], y) == mmd2_unbiased(x, y)


def test_mmd2_detects_mean_shift_against_permutation_null(rng):
    d, n = 8, 500
    x = rng.normal(size=(n, d))
    y = rng.normal(size=(n, d)) + 2.0
    observed = mmd2_unbiased(x, y)
    pooled = np.concatenate([x, y])
    null = []
    for _ in range(100):
        idx = rng.permutation(2 * n)
        null.append(mmd2_unbiased(pooled[idx[:n]], pooled[idx[n:]]))
    assert observed > 0
    assert observed > 5.0 * np.std(null)


def test_mmd2_shape_and_size_errors():
    with pytest.raises(ShapeError):
        mmd2_unbiased(np.zeros((3, 4)), np.zeros((3, 5)))
    with pytest.raises(ConfigurationError):
        mmd2_unbiased(np.zeros((1, 4)), np.zeros((3, 4)))


def test_polynomial_kernel_closed_form(rng):
    a = rng.normal(size=(3, 6))
    b = rng.normal(size=(4, 6))
    k = polynomial_kernel(a, b)
    for i in range(3):
        for j in range(4):
            assert k[i, j] == pytest.approx((np.dot(a[i], b[j]) / 6 + 1) ** 3,
                                            rel=1e-14)


# ---------------------------------------------------------------------------
# kid


def test_kid_null_same_distribution(rng):
    feats = rng.normal(size=(240, 16))
    report = kid(feats[:120], feats[120:], subset_size=50, n_subsets=10, seed=3)
    assert abs(report.value_x1000) <= 3.0 * report.std_x1000
    assert report.std_x1000 >= 0


def test_kid_deterministic_under_fixed_seed(rng):
    a = rng.normal(size=(130, 8))
    b = rng.normal(size=(130, 8))
    r1 = kid(a, b, subset_size=40, n_subsets=5, seed=11)
    r2 = kid(a, b, subset_size=40, n_subsets=5, seed=11)
    assert r1 == r2


def test_kid_insufficient_samples(rng):
    a = rng.normal(size=(30, 8))
    with pytest.raises(ConfigurationError):
        kid(a, a, subset_size=100, n_subsets=2)


# ---------------------------------------------------------------------------
# label-patch encoding


def test_encode_uniform_patch_is_constant():
    sigma = encode_label_patch(np.full((24, 24), 3, dtype=np.int64))
    assert sigma.shape == (256,)
    assert np.all(sigma == 3)


def test_encode_length_is_256_for_small_patch():
    sigma = encode_label_patch(np.zeros((8, 8), dtype=np.int64))
    assert sigma.shape == (256,)


def test_encode_mode_pooling_on_2x2_blocks(rng):
    blocks = rng.integers(0, 5, size=(16, 16))
    patch = np.kron(blocks, np.ones((2, 2), dtype=np.int64)).astype(np.int64)
    sigma = encode_label_patch(patch)
    assert np.array_equal(sigma, blocks.ravel())


def test_encode_rejects_non_square():
    with pytest.raises(ShapeError):
        encode_label_patch(np.zeros((8, 9), dtype=np.int64))


# ---------------------------------------------------------------------------
# pair_patches


def test_pairing_identical_encoding_retained(rng):
    enc = rng.integers(0, 5, size=(4, 256))
    pairs = pair_patches(enc, enc)
    assert (0, 0) in pairs and len(pairs) == 4


def test_pairing_disjoint_classes_dropped():
    syn = np.zeros((3, 256), dtype=np.int64)
    rea = np.ones((4, 256), dtype=np.int64)
    assert pair_patches(syn, rea) == []


def test_pairing_matches_bruteforce(rng):
    syn = rng.integers(0, 5, size=(50, 256))
    rea = rng.integers(0, 5, size=(80, 256))
    assert pair_patches(syn, rea) == pairs_bruteforce(syn, rea)


def test_pairing_tie_breaks_to_lowest_index():
    syn = np.zeros((1, 256), dtype=np.int64)
    rea = np.zeros((3, 256), dtype=np.int64)      # all tie at 256 matches
    assert pair_patches(syn, rea) == [(0, 0)]


def test_pairing_retention_strictly_above_half():
    syn = np.zeros((1, 256), dtype=np.int64)
    rea = np.concatenate([np.zeros(128), np.ones(128)])[None, :].astype(np.int64)
    assert pair_patches(syn, rea) == []           # exactly 128 is not retained
    rea129 = np.concatenate([np.zeros(129), np.ones(127)])[None, :].astype(np.int64)
    assert pair_patches(syn, rea129) == [(0, 0)]


def test_pairing_retention_monotone_in_threshold(rng):
    syn = rng.integers(0, 3, size=(30, 256))
    rea = rng.integers(0, 3, size=(40, 256))
    strict = set(pair_patches(syn, rea, min_matches=128))
    loose = set(pair_patches(syn, rea, min_matches=100))
    assert strict <= loose


# ---------------------------------------------------------------------------
# skvd


def test_skvd_identical_sets_null(tiny_source, backbone):
    images = np.stack([s.image for s in tiny_source])
    labels = np.stack([s.labels for s in tiny_source]).astype(np.int64)
    proto = MetricProtocol(subset_size=20, n_subsets=6, patches_per_image=10, seed=5)
    reports = skvd_family(images, labels, images, labels, backbone,
                          taps=(1, 2, 3, 4, 5), protocol=proto)
    assert sorted(reports) == [1, 2, 3, 4, 5]
    for t, rep in reports.items():
        assert rep.name == f"skvd_l{t}"
        assert abs(rep.value_x1000) <= 3.0 * rep.std_x1000, rep


def test_skvd_noise_concentrates_at_low_taps(layout_config, backbone, rng):
    import dataclasses
    import rendergan as rg
    noisy_cfg = dataclasses.replace(layout_config)
    noisy_cfg.styles = {
        "source": rg.scenegen.StyleParams(),
        "target": rg.scenegen.StyleParams(noise_amp=0.15),
    }
    clean = rg.generate_dataset(noisy_cfg, 8, 21, "source")
    noisy = rg.generate_dataset(noisy_cfg, 8, 22, "target")
    base = rg.generate_dataset(noisy_cfg, 8, 23, "source")
    proto = MetricProtocol(subset_size=24, n_subsets=6, patches_per_image=10, seed=5)

    def family(a, b):
        return skvd_family(np.stack([s.image for s in a]),
                           np.stack([s.labels for s in a]).astype(np.int64),
                           np.stack([s.image for s in b]),
                           np.stack([s.labels for s in b]).astype(np.int64),
                           backbone, taps=(1, 5), protocol=proto)

    shifted = family(clean, noisy)
    null = family(clean, base)
    # additive noise inflates the low tap far more than the deep tap
    rel_l1 = shifted[1].value_x1000 - null[1].value_x1000
    rel_l5 = shifted[5].value_x1000 - null[5].value_x1000
    assert rel_l1 > rel_l5


def test_skvd_undefined_when_nothing_retained(backbone, rng):
    h = w = 64
    images = rng.random((2, h, w, 3)).astype(np.float32)
    labels_a = np.zeros((2, h, w), dtype=np.int64)
    labels_b = np.ones((2, h, w), dtype=np.int64)
    with pytest.raises(MetricUndefinedError):
        skvd_family(images, labels_a, images, labels_b, backbone, taps=(1,),
                    protocol=MetricProtocol(subset_size=2, n_subsets=2,
                                            patches_per_image=4))


# ---------------------------------------------------------------------------
# layout density


def test_layout_density_single_map_is_indicator():
    labels = np.zeros((1, 16, 16), dtype=np.int64)
    labels[0, 8:, :] = 1
    rho = layout_density(labels, (4, 4), n_classes=2)
    assert rho.shape == (2, 4, 4)
    assert np.array_equal(rho[1], (np.arange(4)[:, None] >= 2).astype(float) *
                          np.ones((4, 4)))
    assert np.allclose(rho.sum(axis=0), 1.0)


def test_layout_density_two_map_average():
    a = np.zeros((8, 8), dtype=np.int64)
    b = np.ones((8, 8), dtype=np.int64)
    rho = layout_density(np.stack([a, b]), (2, 2), n_classes=2)
    assert np.allclose(rho[0], 0.5)
    assert np.allclose(rho[1], 0.5)


def test_layout_density_partition(tiny_source):
    labels = np.stack([s.labels for s in tiny_source]).astype(np.int64)
    rho = layout_density(labels, (16, 16), n_classes=5)
    assert np.allclose(rho.sum(axis=0), 1.0, atol=1e-12)
