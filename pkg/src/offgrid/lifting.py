"""Toeplitz lifting operators for annihilation relations.

A small FIR filter h annihilates the gradient spectrum when h * grad_f = 0
over the valid region (filter fully inside the grid). This module provides
the lifted convolution and its adjoint, the stacked operator built from
both gradient channels, the Gram matrix over filter space, and the normal
operator of a filter bank.

Index conventions (these must match the dense test oracles bit-for-bit):

* ``lift_convolve`` is a true 2-D convolution; output index (0,0) is the
  first position where the filter window lies fully inside the grid,
  top-left anchored.
* filter space is vectorized row-major over the filter window (a, b), so
  Gram entry (p, q) couples coefficients h[p] and h[q] in that order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import convolve2d


class SupportError(ValueError):
    """Filter support does not fit the grid."""


@dataclass(frozen=True)
class FilterSupport:
    """Odd filter window dims against a fixed grid size."""

    f_rows: int
    f_cols: int
    grid_rows: int
    grid_cols: int

    def __post_init__(self):
        if self.f_rows % 2 == 0 or self.f_cols % 2 == 0:
            raise SupportError(f"filter dims must be odd, got {self.f_rows}x{self.f_cols}")
        if self.f_rows > self.grid_rows or self.f_cols > self.grid_cols:
            raise SupportError("filter larger than grid")

    @property
    def valid_shape(self) -> tuple[int, int]:
        return (self.grid_rows - self.f_rows + 1, self.grid_cols - self.f_cols + 1)

    @property
    def dim(self) -> int:
        return self.f_rows * self.f_cols


def lift_convolve(h: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Valid 2-D convolution h * g (no padding)."""
    if h.shape[0] > g.shape[0] or h.shape[1] > g.shape[1]:
        raise SupportError(f"filter {h.shape} larger than grid {g.shape}")
    return convolve2d(g, h, mode="valid")


def lift_adjoint(h: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Adjoint of ``g -> lift_convolve(h, g)``: full correlation with conj(h)."""
    return convolve2d(v, np.conj(h[::-1, ::-1]), mode="full")


def _patch_matrix(g: np.ndarray, f_rows: int, f_cols: int) -> np.ndarray:
    """Sliding windows of g as a (valid_pixels, f_rows*f_cols) matrix.

    Column u (row-major over window offsets) holds g[i+u_r, j+u_c] over
    valid anchors (i, j).
    """
    win = sliding_window_view(g, (f_rows, f_cols))
    vr, vc = win.shape[:2]
    return win.reshape(vr * vc, f_rows * f_cols)


def _filter_to_offsets(h: np.ndarray) -> np.ndarray:
    """Re-index filter coefficients to window-offset order.

    conv_valid(h, g)[i,j] = sum_u h[fr-1-u_r, fc-1-u_c] g[i+u_r, j+u_c],
    so the offset-basis vector is the spatially flipped filter.
    """
    return h[::-1, ::-1].ravel()


def _offsets_to_filter(s: np.ndarray, f_rows: int, f_cols: int) -> np.ndarray:
    return s.reshape(f_rows, f_cols)[::-1, ::-1]


def _scatter_offsets(V: np.ndarray, support: FilterSupport) -> np.ndarray:
    """Adjoint of patch extraction: add column u of V back at offset u."""
    vr, vc = support.valid_shape
    out = np.zeros((support.grid_rows, support.grid_cols), dtype=np.complex128)
    cols = V.reshape(vr, vc, support.f_rows, support.f_cols)
    for a in range(support.f_rows):
        for b in range(support.f_cols):
            out[a : a + vr, b : b + vc] += cols[:, :, a, b]
    return out


class StackedLift:
    """Linear map h -> [x_channel * h ; y_channel * h] (valid convolutions).

    This is the commuted form of the block-Toeplitz annihilation operator:
    applying it to a candidate filter stacks the valid convolutions of that
    filter with both gradient channels.
    """

    def __init__(self, grad: np.ndarray, support: FilterSupport):
        if grad.shape[1] != support.grid_rows or grad.shape[2] != support.grid_cols:
            raise SupportError(f"gradient shape {grad.shape} vs support grid "
                               f"{support.grid_rows}x{support.grid_cols}")
        self.support = support
        self.grad = grad

    def apply(self, h: np.ndarray) -> np.ndarray:
        """Returns shape (2, valid_rows, valid_cols)."""
        return np.stack([lift_convolve(h, self.grad[0]), lift_convolve(h, self.grad[1])])

    def adjoint(self, v: np.ndarray) -> np.ndarray:
        """Maps stacked valid grids back to a filter-shaped array."""
        fr, fc = self.support.f_rows, self.support.f_cols
        out = np.zeros(self.support.dim, dtype=np.complex128)
        for ch in range(2):
            P = _patch_matrix(self.grad[ch], fr, fc)
            out += P.conj().T @ v[ch].ravel()
        return _offsets_to_filter(out, fr, fc)

    def matrix(self) -> np.ndarray:
        """Dense (2*valid_pixels, dim) matrix, columns in filter row-major order."""
        fr, fc = self.support.f_rows, self.support.f_cols
        blocks = []
        for ch in range(2):
            P = _patch_matrix(self.grad[ch], fr, fc)
            # column for coefficient (a, b) is offset (fr-1-a, fc-1-b)
            blocks.append(P[:, ::-1])
        return np.vstack(blocks)


def gram_assemble(grad: np.ndarray, support: FilterSupport) -> np.ndarray:
    """Gram matrix G = M^H M of the stacked lift, without materializing M.

    Uses the sliding-window (im2col) factorization of the Toeplitz blocks so
    the product reduces to one BLAS call per channel. Hermitian PSD by
    construction; symmetrized to kill rounding skew.
    """
    if grad.shape[1] != support.grid_rows or grad.shape[2] != support.grid_cols:
        raise SupportError("gradient/support mismatch")
    fr, fc = support.f_rows, support.f_cols
    G = np.zeros((support.dim, support.dim), dtype=np.complex128)
    for ch in range(2):
        M = _patch_matrix(grad[ch], fr, fc)[:, ::-1]
        G += M.conj().T @ M
    return 0.5 * (G + G.conj().T)


@dataclass
class FilterBank:
    """Bank of complex FIR filters sharing one support."""

    support: FilterSupport
    filters: np.ndarray  # (count, f_rows, f_cols) complex
    _normal: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def count(self) -> int:
        return self.filters.shape[0]

    def normal_matrix(self) -> np.ndarray:
        """sum_i s_i s_i^H in the window-offset basis (= H H^H, reordered)."""
        if self._normal is None:
            S = np.stack([_filter_to_offsets(h) for h in self.filters], axis=1) \
                if self.count else np.zeros((self.support.dim, 0), dtype=np.complex128)
            self._normal = S @ S.conj().T
        return self._normal


def filterbank_normal_apply(bank: FilterBank, z: np.ndarray) -> np.ndarray:
    """T(H)^H T(H) z: per channel, sum_i lift_adjoint(h_i, lift_convolve(h_i, .)).

    Computed through the combined offset-basis weight Q = sum_i s_i s_i^H,
    so the cost is independent of the filter count.
    """
    support = bank.support
    if z.shape[1] != support.grid_rows or z.shape[2] != support.grid_cols:
        raise SupportError("gradient/support mismatch")
    Q = bank.normal_matrix()
    out = np.empty_like(z)
    for ch in range(z.shape[0]):
        P = _patch_matrix(z[ch], support.f_rows, support.f_cols)
        out[ch] = _scatter_offsets(P @ Q, support)
    return out
