import numpy as np
import pytest

from offgrid import kspace, lifting, phantoms
from offgrid.lifting import FilterSupport
from offgrid.phantoms import PhantomSpec


def test_phantom_deterministic():
    spec = PhantomSpec(n=32, regions=3, seed=11)
    a = phantoms.make_phantom(spec)
    b = phantoms.make_phantom(spec)
    assert np.array_equal(a, b)


def test_phantom_piecewise_values():
    spec = PhantomSpec(n=32, regions=3, seed=5)
    img = phantoms.make_phantom(spec)
    # indicator sums take a handful of distinct complex levels
    assert len(np.unique(img)) <= 2 ** 3
    assert img.dtype == np.complex128


def test_region_area_matches_fine_quadrature():
    # threshold region of a known polynomial, area against a 4x oversampled grid
    n = 64
    x = np.arange(n) / n
    X, Y = np.meshgrid(x, x, indexing="ij")
    mu = np.cos(2 * np.pi * X) + np.cos(2 * np.pi * Y)
    area_coarse = np.mean(mu > 0)
    xf = np.arange(4 * n) / (4 * n)
    Xf, Yf = np.meshgrid(xf, xf, indexing="ij")
    area_fine = np.mean((np.cos(2 * np.pi * Xf) + np.cos(2 * np.pi * Yf)) > 0)
    assert abs(area_coarse - area_fine) < 0.01


def test_oracle_annihilation_bound():
    sup = FilterSupport(5, 5, 16, 16)
    f, h0 = phantoms.build_annihilated_oracle(16, sup, seed=3)
    grad = kspace.gradient_transform(f)
    lift = lifting.StackedLift(grad, sup)
    assert np.linalg.norm(lift.apply(h0)) <= 1e-10 * np.linalg.norm(grad)
    assert abs(np.linalg.norm(f) - 1.0) < 1e-12


def test_oracle_smallest_singular_direction():
    sup = FilterSupport(5, 5, 16, 16)
    f, h0 = phantoms.build_annihilated_oracle(16, sup, seed=3)
    M = lifting.StackedLift(kspace.gradient_transform(f), sup).matrix()
    s = np.linalg.svd(M, compute_uv=False)
    assert s[-1] <= 1e-10 * s[0]


def test_oracle_rejects_large_grid():
    with pytest.raises(ValueError):
        phantoms.build_annihilated_oracle(32, FilterSupport(5, 5, 32, 32), seed=0)


def test_mask_counts_and_center():
    n, cl = 64, 8
    mask = phantoms.make_mask(n, 2.0, cl, seed=9)
    kept = np.flatnonzero(mask[0])
    assert len(kept) == 32
    center = np.arange(n // 2 - cl // 2, n // 2 + cl // 2)
    assert set(center).issubset(set(kept))
    # full columns only
    assert np.all(mask == mask[0][None, :])


def test_mask_full_when_r1():
    mask = phantoms.make_mask(16, 1.0, 4, seed=0)
    assert mask.all()


def test_mask_density_decreases_with_frequency():
    n = 32
    counts = np.zeros(n)
    for seed in range(800):
        counts += phantoms.make_mask(n, 2.0, 4, seed=seed)[0]
    freqs = np.abs(np.arange(n) - n // 2)
    outer = freqs > 4
    # bin the kept-rate by |k| outside the center band and check the trend
    lo = counts[outer & (freqs <= 10)].mean()
    hi = counts[outer & (freqs > 10)].mean()
    assert lo > hi


def test_mask_validation():
    with pytest.raises(ValueError):
        phantoms.make_mask(16, 0.5, 4, seed=0)
    with pytest.raises(ValueError):
        phantoms.make_mask(16, 2.0, 3, seed=0)
    with pytest.raises(ValueError):
        phantoms.make_mask(16, 8.0, 6, seed=0)


def test_noise_statistics():
    n = 64
    k = np.zeros((n, n), complex)
    mask = np.ones((n, n), dtype=np.uint8)
    sigma = 0.5
    vals = []
    for seed in range(30):
        noisy = phantoms.add_noise(k, sigma, seed, mask)
        vals.append(noisy.ravel())
    vals = np.concatenate(vals)
    assert abs(vals.std() - sigma) < 0.02 * sigma
    assert np.array_equal(phantoms.add_noise(k, sigma, 7, mask),
                          phantoms.add_noise(k, sigma, 7, mask))


def test_noise_respects_mask_and_zero_sigma():
    rng = np.random.default_rng(0)
    k = rng.standard_normal((16, 16)) + 0j
    mask = phantoms.make_mask(16, 2.0, 4, seed=1)
    assert np.array_equal(phantoms.add_noise(k, 0.0, 3, mask), k)
    noisy = phantoms.add_noise(k, 0.1, 3, mask)
    assert np.array_equal(noisy[mask == 0], k[mask == 0])


def test_dataset_roundtrip(tmp_path):
    records = phantoms.build_dataset(4, 32, 2.0, 0.01, seed=0,
                                     out_dir=tmp_path, center_lines=4)
    loaded = phantoms.load_manifest(tmp_path / "manifest.csv")
    assert len(loaded) == 4
    kref, mask, b = phantoms.measure(loaded[0], tmp_path)
    assert kref.shape == (32, 32)
    assert np.all(b[mask == 0] == 0)
    # train/test streams are disjoint
    test_records = phantoms.build_dataset(4, 32, 2.0, 0.01, seed=0,
                                          out_dir=tmp_path / "t", test=True,
                                          center_lines=4)
    assert {r.seed for r in records}.isdisjoint({r.seed for r in test_records})


def test_manifest_missing_file(tmp_path):
    phantoms.build_dataset(2, 32, 2.0, 0.0, seed=1, out_dir=tmp_path,
                           center_lines=4)
    (tmp_path / "sample0001.oksp").unlink()
    with pytest.raises(FileNotFoundError):
        phantoms.load_manifest(tmp_path / "manifest.csv")
