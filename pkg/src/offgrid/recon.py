"""Reconstruction methods, the SNR metric and image export."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .giraf import GirafConfig, giraf_solve
from .kspace import (apply_sampling, gradient_magnitude_sq, inverse_dft)
from .lifting import FilterSupport
from .network import unrolled_forward

SNR_CAP_DB = 300.0


def snr_db(recon: np.ndarray, reference: np.ndarray) -> float:
    """20*log10(||ref|| / ||ref - recon||), capped at +300 dB."""
    if recon.shape != reference.shape:
        raise ValueError("shape mismatch")
    ref_norm = np.linalg.norm(reference)
    if ref_norm == 0:
        raise ValueError("reference is identically zero")
    err_norm = np.linalg.norm(reference - recon)
    if err_norm == 0:
        return SNR_CAP_DB
    return float(min(20.0 * np.log10(ref_norm / err_norm), SNR_CAP_DB))


@dataclass
class ReconResult:
    method: str
    f_hat: np.ndarray
    image: np.ndarray
    runtime_ms: float
    config: dict


def recon_zero_filled(b: np.ndarray, mask: np.ndarray) -> ReconResult:
    t0 = time.perf_counter()
    f = apply_sampling(b, mask)
    img = inverse_dft(f)
    ms = (time.perf_counter() - t0) * 1e3
    return ReconResult("zero-filled", f, img, ms, {})


def recon_tikhonov(b: np.ndarray, mask: np.ndarray, alpha: float) -> ReconResult:
    """Closed-form minimizer of ||A f - b||^2 + alpha ||grad f||^2."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    t0 = time.perf_counter()
    s = mask.astype(float)
    q = gradient_magnitude_sq(*b.shape)
    denom = s + alpha * q
    f = np.where(denom > 0, s * b / np.where(denom > 0, denom, 1.0), 0.0)
    img = inverse_dft(f)
    ms = (time.perf_counter() - t0) * 1e3
    return ReconResult("tikhonov", f, img, ms, {"alpha": alpha})


def tune_tikhonov_alpha(pairs, alphas=None) -> float:
    """Grid-search alpha maximizing mean SNR over (b, mask, reference_kspace)."""
    if alphas is None:
        alphas = [10.0 ** e for e in range(-4, 2)]
    best_alpha, best_snr = alphas[0], -np.inf
    for alpha in alphas:
        total = 0.0
        for b, mask, kref in pairs:
            res = recon_tikhonov(b, mask, alpha)
            total += snr_db(res.image, inverse_dft(kref))
        if total > best_snr:
            best_snr, best_alpha = total, alpha
    return best_alpha


def recon_giraf(b: np.ndarray, mask: np.ndarray, lam: float = 1e2,
                filter_size: int = 5, outer_iters: int = 15,
                cg_tol: float = 1e-8, cg_max_iters: int = 400) -> ReconResult:
    t0 = time.perf_counter()
    support = FilterSupport(filter_size, filter_size, *b.shape)
    cfg = GirafConfig(lam=lam, support=support, outer_iters=outer_iters,
                      cg_tol=cg_tol, cg_max_iters=cg_max_iters)
    f, _ = giraf_solve(b, mask, cfg)
    img = inverse_dft(f)
    ms = (time.perf_counter() - t0) * 1e3
    return ReconResult("giraf", f, img, ms,
                       {"lam": lam, "filter_size": filter_size, "outer_iters": outer_iters})


def recon_network(b: np.ndarray, mask: np.ndarray, checkpoint) -> ReconResult:
    """Inference with a trained checkpoint (O-MoDL or image-domain)."""
    t0 = time.perf_counter()
    f, img, _ = unrolled_forward(b, mask, checkpoint.params, checkpoint.net_cfg,
                                 mode="eval", arch=checkpoint.arch)
    ms = (time.perf_counter() - t0) * 1e3
    name = "omodl" if checkpoint.arch == "omodl" else "image-domain"
    return ReconResult(name, f, img, ms, {"epoch": checkpoint.epoch})


def export_magnitude(image: np.ndarray, path, reference: np.ndarray | None = None) -> None:
    """Write an 8-bit binary PGM of |image| normalized by its max.

    With a reference, writes the error map |image - reference| instead,
    normalized by the reference magnitude maximum (shared scale).
    """
    if not np.all(np.isfinite(image)):
        raise ValueError("image contains non-finite values")
    if reference is None:
        mag = np.abs(image)
        peak = mag.max()
    else:
        mag = np.abs(image - reference)
        peak = np.abs(reference).max()
    if peak == 0:
        pixels = np.zeros(mag.shape, dtype=np.uint8)
    else:
        pixels = np.clip(np.round(255.0 * mag / peak), 0, 255).astype(np.uint8)
    rows, cols = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode())
        fh.write(pixels.tobytes())


def load_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    if fields[0] != b"P5":
        raise ValueError("not a binary PGM")
    cols, rows = int(fields[1]), int(fields[2])
    return np.frombuffer(data[pos:pos + rows * cols], dtype=np.uint8).reshape(rows, cols)
