"""Synthetic data: piecewise-constant phantoms, exact-annihilation oracle
signals, variable-density Cartesian masks, and noise.

Edge sets are level sets of random low-degree trigonometric polynomials, so
the annihilation model for the gradient spectrum holds (approximately at
N=64, exactly for the SVD-built oracle signals on small grids).

All randomness comes from Philox counter-based generators keyed by
(seed, stream), giving reproducible, disjoint seed streams.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import convolve2d

from .kspace import apply_sampling, forward_dft, gradient_weights, save_kspace, save_mask
from .lifting import FilterSupport


class InfeasibleError(RuntimeError):
    """The requested oracle construction has an empty null space."""


def _rng(seed: int, stream: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=(int(seed) << 16) + stream))


@dataclass(frozen=True)
class TrigPolynomial:
    """Real-valued bandlimited function on the unit torus.

    Coefficients are stored as a (2*dx+1, 2*dy+1) array with centered
    frequency indexing and conjugate symmetry c[-k] = conj(c[k]).
    """

    dx: int
    dy: int
    coeffs: np.ndarray

    def evaluate(self, n: int) -> np.ndarray:
        """Sample on the n x n grid (points i/n); result is real."""
        fx = np.arange(-self.dx, self.dx + 1)
        fy = np.arange(-self.dy, self.dy + 1)
        x = np.arange(n) / n
        ex = np.exp(2j * np.pi * np.outer(x, fx))
        ey = np.exp(2j * np.pi * np.outer(fy, x))
        vals = ex @ self.coeffs @ ey
        return vals.real


def random_trig_polynomial(dx: int, dy: int, rng: np.random.Generator) -> TrigPolynomial:
    c = np.zeros((2 * dx + 1, 2 * dy + 1), dtype=np.complex128)
    for a in range(2 * dx + 1):
        for b in range(2 * dy + 1):
            kx, ky = a - dx, b - dy
            if (kx, ky) == (0, 0):
                c[a, b] = rng.standard_normal()
            elif c[a, b] == 0:
                v = rng.standard_normal() + 1j * rng.standard_normal()
                c[a, b] = v
                c[2 * dx - a, 2 * dy - b] = np.conj(v)
    return TrigPolynomial(dx=dx, dy=dy, coeffs=c)


@dataclass(frozen=True)
class PhantomSpec:
    n: int
    regions: int
    seed: int
    max_degree: int = 3

    def __post_init__(self):
        if self.n % 2 or self.n < 16:
            raise ValueError("phantom grid must be even and >= 16")
        if self.regions < 1:
            raise ValueError("need at least one region")


def make_phantom(spec: PhantomSpec) -> np.ndarray:
    """Piecewise-constant complex image: sum of amplitude * indicator(mu < tau).

    Thresholds are drawn as interior quantiles of the sampled polynomial, so
    regions are nonempty and proper; a degenerate draw is respecified from
    the next seed draw.
    """
    rng = _rng(spec.seed, stream=1)
    img = np.zeros((spec.n, spec.n), dtype=np.complex128)
    made = 0
    attempts = 0
    while made < spec.regions:
        attempts += 1
        if attempts > 50 * spec.regions:
            raise RuntimeError("phantom generation kept drawing degenerate regions")
        deg = int(rng.integers(1, spec.max_degree + 1))
        poly = random_trig_polynomial(deg, deg, rng)
        mu = poly.evaluate(spec.n)
        tau = float(np.quantile(mu, rng.uniform(0.2, 0.8)))
        region = mu < tau
        frac = region.mean()
        if frac == 0.0 or frac == 1.0:
            continue  # degenerate; respecify from the next draw
        amp = rng.uniform(0.4, 1.2) * np.exp(2j * np.pi * rng.uniform())
        img += amp * region
        made += 1
    return img


def build_annihilated_oracle(n: int, support: FilterSupport, seed: int,
                             tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Exact null-space signal for the stacked annihilation operator.

    Draws a real edge polynomial mu of degree one below the support radius
    (so every shift of its coefficient array fits the support, giving the
    signal a strongly rank-deficient lifting), builds the dense stacked
    operator [conv(mu_hat, wx .) ; conv(mu_hat, wy .)] over the small
    filter's full valid region, and returns a unit-norm null vector plus
    the certificate filter h0 (mu_hat centered in the requested support).
    Flat directions (grid deltas killed by both gradient weights) are
    projected out so the signal has genuine structure.
    """
    if n > 24:
        raise ValueError("oracle construction is dense; use n <= 24")
    if support.grid_rows != n or support.grid_cols != n:
        raise ValueError("support grid dims must equal n")
    rng = _rng(seed, stream=2)
    dx = max(1, support.f_rows // 2 - 1)
    dy = max(1, support.f_cols // 2 - 1)
    poly = random_trig_polynomial(dx, dy, rng)
    small = poly.coeffs
    cr, cc = support.f_rows // 2, support.f_cols // 2
    h0 = np.zeros((support.f_rows, support.f_cols), dtype=np.complex128)
    h0[cr - dx:cr + dx + 1, cc - dy:cc + dy + 1] = small
    wx, wy = gradient_weights(n, n)

    vr, vc = n - small.shape[0] + 1, n - small.shape[1] + 1
    cols = np.empty((2 * vr * vc, n * n), dtype=np.complex128)
    basis = np.zeros((n, n), dtype=np.complex128)
    for p in range(n * n):
        basis.flat[p] = 1.0
        cols[:, p] = np.concatenate([
            convolve2d(wx * basis, small, mode="valid").ravel(),
            convolve2d(wy * basis, small, mode="valid").ravel(),
        ])
        basis.flat[p] = 0.0

    U, s, Vh = np.linalg.svd(cols, full_matrices=True)
    null = Vh[np.sum(s > tol * s[0]):].conj().T  # columns span the null space
    if null.shape[1] == 0:
        raise InfeasibleError("stacked operator has no null space; enlarge the support")

    f = null @ rng.standard_normal(null.shape[1])
    # flat deltas (both weights vanish) are in the null space; drop them
    flat = (np.abs(wx) < 1e-15) & (np.abs(wy) < 1e-15)
    f[flat.ravel()] = 0.0
    nrm = np.linalg.norm(f)
    if nrm < 1e-8:
        raise InfeasibleError("null space contains only flat directions")
    return (f / nrm).reshape(n, n), h0


def make_mask(n: int, accel: float, center_lines: int, seed: int) -> np.ndarray:
    """Variable-density Cartesian column mask.

    Keeps exactly ceil(n/accel) phase-encode columns: the center_lines
    central ones always, the rest drawn without replacement with
    probability proportional to (1 + |k|/n)^-2 on the centered column
    frequency k.
    """
    if accel < 1:
        raise ValueError("acceleration must be >= 1")
    keep_total = int(np.ceil(n / accel))
    if center_lines % 2 or center_lines > keep_total or center_lines < 2:
        raise ValueError(f"center_lines must be even, >= 2 and <= {keep_total}")
    freqs = np.arange(n) - n // 2
    center = (freqs >= -(center_lines // 2)) & (freqs < center_lines // 2)
    kept = center.copy()
    remaining = keep_total - center_lines
    if remaining > 0:
        candidates = np.flatnonzero(~center)
        p = (1.0 + np.abs(freqs[candidates]) / n) ** -2
        p /= p.sum()
        rng = _rng(seed, stream=3)
        chosen = rng.choice(candidates, size=remaining, replace=False, p=p)
        kept[chosen] = True
    return np.tile(kept, (n, 1))


def add_noise(k: np.ndarray, sigma: float, seed: int, mask: np.ndarray | None = None) -> np.ndarray:
    """Add circular complex Gaussian noise (std sigma per complex sample),
    restricted to sampled locations when a mask is given."""
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if sigma == 0:
        return k.copy()
    rng = _rng(seed, stream=4)
    noise = (sigma / np.sqrt(2.0)) * (rng.standard_normal(k.shape)
                                      + 1j * rng.standard_normal(k.shape))
    if mask is not None:
        noise = np.where(mask, noise, 0.0)
    return k + noise


@dataclass
class DatasetRecord:
    index: int
    kspace_path: str
    mask_path: str
    sigma: float
    seed: int


def build_dataset(count: int, n: int, accel: float, sigma: float, seed: int,
                  out_dir, center_lines: int = 8, regions: int = 4,
                  test: bool = False) -> list[DatasetRecord]:
    """Write fully sampled phantom k-space + masks + manifest.csv to out_dir.

    Train and test datasets use disjoint seed streams (test offsets the
    per-sample seed into a separate range).
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stream_base = 1_000_000 if test else 0
    records = []
    for i in range(count):
        sample_seed = seed * 10_000_000 + stream_base + i
        img = make_phantom(PhantomSpec(n=n, regions=regions, seed=sample_seed))
        kref = forward_dft(img)
        mask = make_mask(n, accel, center_lines, sample_seed)
        kpath = out / f"sample{i:04d}.oksp"
        mpath = out / f"sample{i:04d}.omsk"
        save_kspace(kpath, kref)
        save_mask(mpath, mask)
        records.append(DatasetRecord(index=i, kspace_path=kpath.name,
                                     mask_path=mpath.name, sigma=sigma,
                                     seed=sample_seed))
    with open(out / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "kspace_path", "mask_path", "sigma", "seed"])
        for r in records:
            writer.writerow([r.index, r.kspace_path, r.mask_path, repr(r.sigma), r.seed])
    return records


def load_manifest(path) -> list[DatasetRecord]:
    path = Path(path)
    records = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            records.append(DatasetRecord(index=int(row["index"]),
                                         kspace_path=row["kspace_path"],
                                         mask_path=row["mask_path"],
                                         sigma=float(row["sigma"]),
                                         seed=int(row["seed"])))
    for r in records:
        for name in (r.kspace_path, r.mask_path):
            if not (path.parent / name).exists():
                raise FileNotFoundError(f"manifest references missing file {name}")
    return records


def measure(record: DatasetRecord, data_dir) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Load a record and form measurements: (reference k-space, mask, b)."""
    from .kspace import load_kspace, load_mask  # local import to keep module load light
    data_dir = Path(data_dir)
    kref = load_kspace(data_dir / record.kspace_path)
    mask = load_mask(data_dir / record.mask_path)
    b = add_noise(apply_sampling(kref, mask), record.sigma, record.seed, mask=mask)
    return kref, mask, b
