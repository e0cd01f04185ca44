"""Core k-space grids and operators.

Conventions used throughout the package:

* grids are 2-D ``complex128`` arrays of even size, row-major
* frequency indexing is centered: index (0,0) of frequency space sits at
  array position ``(rows // 2, cols // 2)``; the centered frequency of
  array row ``i`` is ``i - rows // 2``
* the DFT is unitary, so the adjoint of ``forward_dft`` is ``inverse_dft``
* sampling masks are boolean grids built from whole phase-encode columns
* gradient k-space is stored as an array of shape ``(2, rows, cols)``
  holding the x- and y-derivative channels
"""

from __future__ import annotations

import struct

import numpy as np


class DimensionError(ValueError):
    """Grid dimensions are incompatible or unsupported."""


def _check_grid(g: np.ndarray, name: str = "grid") -> None:
    if g.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {g.shape}")
    rows, cols = g.shape
    if rows % 2 or cols % 2 or rows < 8 or cols < 8:
        raise DimensionError(f"{name} dims must be even and >= 8, got {g.shape}")


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")


def centered_freqs(n: int) -> np.ndarray:
    """Centered integer frequencies -n/2 .. n/2-1 in array order."""
    return np.arange(n) - n // 2


def forward_dft(img: np.ndarray) -> np.ndarray:
    """Unitary 2-D DFT with centered frequency output."""
    _check_grid(img, "image")
    return np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(img), norm="ortho"))


def inverse_dft(k: np.ndarray) -> np.ndarray:
    """Inverse of forward_dft (also its adjoint, by unitarity)."""
    _check_grid(k, "kspace")
    return np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(k), norm="ortho"))


def apply_sampling(k: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Zero-filled sampling: kept locations pass through, others go to zero.

    With the zero-filled representation A^H A = diag(mask), and the operator
    is its own adjoint.
    """
    _check_same_shape(k, mask)
    return np.where(mask, k, 0.0 + 0.0j)


def gradient_weights(rows: int, cols: int) -> tuple[np.ndarray, np.ndarray]:
    """Diagonal Fourier-domain derivative weights (wx, wy).

    wx[k] = i*2*pi*k_x/rows on centered indices (the continuous-derivative
    weighting, including the Nyquist row, so annihilation relations of
    continuous-domain piecewise-constant signals restrict exactly to the
    grid); likewise wy on columns. Entries are purely imaginary, zero on
    the k_x = 0 row / k_y = 0 column, and odd for every non-Nyquist k.
    """
    kx = centered_freqs(rows).astype(float)
    ky = centered_freqs(cols).astype(float)
    wx = (1j * 2.0 * np.pi / rows) * kx[:, None] * np.ones((1, cols))
    wy = (1j * 2.0 * np.pi / cols) * np.ones((rows, 1)) * ky[None, :]
    return wx, wy


def gradient_transform(f: np.ndarray, weights=None) -> np.ndarray:
    """Fourier-domain gradient: channel c of the output is w_c * f."""
    if weights is None:
        weights = gradient_weights(*f.shape)
    wx, wy = weights
    _check_same_shape(f, wx)
    return np.stack([wx * f, wy * f])


def gradient_adjoint(z: np.ndarray, weights=None) -> np.ndarray:
    """Adjoint of gradient_transform: conj(wx)*z_x + conj(wy)*z_y."""
    if weights is None:
        weights = gradient_weights(z.shape[1], z.shape[2])
    wx, wy = weights
    _check_same_shape(z[0], wx)
    return np.conj(wx) * z[0] + np.conj(wy) * z[1]


def gradient_magnitude_sq(rows: int, cols: int) -> np.ndarray:
    """|wx|^2 + |wy|^2 on the grid (the gradient normal-operator diagonal)."""
    wx, wy = gradient_weights(rows, cols)
    return (np.abs(wx) ** 2 + np.abs(wy) ** 2).real


# --------------------------------------------------------------------------
# binary file formats
#
# k-space grids: magic "OKSP", version u32=1, rows u32, cols u32,
# channels u32, then little-endian float64 (real, imag) pairs, row-major,
# channel-major. Masks: magic "OMSK", rows u32, cols u32, one byte (0/1)
# per entry, row-major. All integers little-endian.
# --------------------------------------------------------------------------

_KSP_MAGIC = b"OKSP"
_MSK_MAGIC = b"OMSK"


def save_kspace(path, k: np.ndarray) -> None:
    """Write one grid (shape (r, c)) or a channel stack (shape (ch, r, c))."""
    arr = np.asarray(k, dtype=np.complex128)
    if arr.ndim == 2:
        arr = arr[None]
    channels, rows, cols = arr.shape
    flat = np.empty(channels * rows * cols * 2, dtype="<f8")
    flat[0::2] = arr.real.ravel()
    flat[1::2] = arr.imag.ravel()
    with open(path, "wb") as fh:
        fh.write(_KSP_MAGIC)
        fh.write(struct.pack("<IIII", 1, rows, cols, channels))
        fh.write(flat.tobytes())


def load_kspace(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _KSP_MAGIC:
            raise ValueError(f"bad k-space magic {magic!r} in {path}")
        version, rows, cols, channels = struct.unpack("<IIII", fh.read(16))
        if version != 1:
            raise ValueError(f"unsupported k-space format version {version}")
        flat = np.frombuffer(fh.read(), dtype="<f8")
    if flat.size != channels * rows * cols * 2:
        raise ValueError(f"truncated k-space file {path}")
    arr = (flat[0::2] + 1j * flat[1::2]).reshape(channels, rows, cols)
    return arr[0] if channels == 1 else arr


def save_mask(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask, dtype=bool)
    rows, cols = mask.shape
    with open(path, "wb") as fh:
        fh.write(_MSK_MAGIC)
        fh.write(struct.pack("<II", rows, cols))
        fh.write(mask.astype(np.uint8).tobytes())


def load_mask(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MSK_MAGIC:
            raise ValueError(f"bad mask magic {magic!r} in {path}")
        rows, cols = struct.unpack("<II", fh.read(8))
        raw = np.frombuffer(fh.read(), dtype=np.uint8)
    if raw.size != rows * cols:
        raise ValueError(f"truncated mask file {path}")
    return raw.reshape(rows, cols).astype(bool)
