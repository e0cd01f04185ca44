"""Unrolled k-space reconstruction network.

The model alternates a residual denoiser D(z) = z - N(z) on the two-channel
gradient spectrum with an analytic per-frequency data-consistency solve.
N is a stack of n valid complex convolutions followed by n "deconvolutions"
that are the exact adjoints of the mirrored convolution layers (conjugate
flipped kernels, transposed channels, full support), so conv/deconv pairs
share weights. BN and tanh act on real and imaginary parts separately and
follow every layer except the final (linear) deconvolution. The same
parameters are used at every unrolled iteration; the data-consistency
weight beta = exp(theta) is a single trainable scalar.

Reverse-mode gradients are implemented by hand in the Wirtinger convention:
a cotangent g for a complex array u stores dL/dRe(u) + i*dL/dIm(u).

An image-domain variant (``arch="image"``) runs the same denoiser on the
single-channel complex image with an unweighted data-consistency solve; it
serves as the matched unrolled baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .kspace import (apply_sampling, forward_dft, gradient_adjoint,
                     gradient_magnitude_sq, gradient_transform,
                     gradient_weights, inverse_dft)

_BN_EPS = 1e-5
_BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class NetworkConfig:
    depth: int            # conv layers; deconv count equals depth
    channels: int         # hidden complex feature maps
    kernel: int           # odd square kernel size
    unroll_iters: int     # shared-weight iterations K
    in_channels: int = 2  # gradient x/y (1 for the image-domain variant)
    linear: bool = False  # drop BN/tanh entirely (analysis configs)

    def __post_init__(self):
        if self.kernel % 2 == 0 or self.kernel < 1:
            raise ValueError("kernel must be odd")
        if min(self.depth, self.channels, self.in_channels) < 1 or self.unroll_iters < 0:
            raise ValueError("bad network config")

    @property
    def bn_layers(self) -> int:
        return 0 if self.linear else 2 * self.depth - 1


@dataclass
class BNParams:
    scale: np.ndarray      # (C, 2) real: scale for (real, imag) parts
    shift: np.ndarray      # (C, 2)
    run_mean: np.ndarray   # (C, 2) buffers, not trained
    run_var: np.ndarray    # (C, 2)


@dataclass
class NetworkParams:
    kernels: list          # depth arrays (C_out, C_in, k, k) complex
    bn: list               # bn_layers BNParams
    dc_weight_logit: float
    envelope: np.ndarray | None = None  # fixed per-channel whitening buffer

    @property
    def beta(self) -> float:
        return float(np.exp(self.dc_weight_logit))

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            kernels=[k.copy() for k in self.kernels],
            bn=[BNParams(b.scale.copy(), b.shift.copy(),
                         b.run_mean.copy(), b.run_var.copy()) for b in self.bn],
            dc_weight_logit=self.dc_weight_logit,
            envelope=None if self.envelope is None else self.envelope.copy(),
        )


def init_params(cfg: NetworkConfig, rng: np.random.Generator) -> NetworkParams:
    kernels = []
    for j in range(cfg.depth):
        c_in = cfg.in_channels if j == 0 else cfg.channels
        std = (c_in * cfg.kernel ** 2) ** -0.5
        shape = (cfg.channels, c_in, cfg.kernel, cfg.kernel)
        kernels.append(std * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)))
    bn = [BNParams(scale=np.ones((cfg.channels, 2)), shift=np.zeros((cfg.channels, 2)),
                   run_mean=np.zeros((cfg.channels, 2)), run_var=np.ones((cfg.channels, 2)))
          for _ in range(cfg.bn_layers)]
    return NetworkParams(kernels=kernels, bn=bn, dc_weight_logit=0.0)


def zero_grads(params: NetworkParams) -> "NetworkGrads":
    return NetworkGrads(
        kernels=[np.zeros_like(k) for k in params.kernels],
        bn_scale=[np.zeros_like(b.scale) for b in params.bn],
        bn_shift=[np.zeros_like(b.shift) for b in params.bn],
        dc_weight_logit=0.0,
    )


@dataclass
class NetworkGrads:
    kernels: list
    bn_scale: list
    bn_shift: list
    dc_weight_logit: float


# ------------------------------------------------------------------ packing

def params_to_vector(params: NetworkParams) -> np.ndarray:
    parts = [k.view(np.float64).ravel() for k in params.kernels]
    parts += [b.scale.ravel() for b in params.bn]
    parts += [b.shift.ravel() for b in params.bn]
    parts.append(np.array([params.dc_weight_logit]))
    return np.concatenate(parts)


def vector_to_params(vec: np.ndarray, params: NetworkParams) -> NetworkParams:
    """Rebuild a NetworkParams with trainables from vec, buffers from params."""
    out = params.copy()
    pos = 0
    for i, k in enumerate(out.kernels):
        n = k.size * 2
        out.kernels[i] = vec[pos:pos + n].copy().view(np.complex128).reshape(k.shape)
        pos += n
    for b in out.bn:
        b.scale[:] = vec[pos:pos + b.scale.size].reshape(b.scale.shape)
        pos += b.scale.size
    for b in out.bn:
        b.shift[:] = vec[pos:pos + b.shift.size].reshape(b.shift.shape)
        pos += b.shift.size
    out.dc_weight_logit = float(vec[pos])
    return out


def grads_to_vector(grads: NetworkGrads) -> np.ndarray:
    parts = [g.view(np.float64).ravel() for g in grads.kernels]
    parts += [g.ravel() for g in grads.bn_scale]
    parts += [g.ravel() for g in grads.bn_shift]
    parts.append(np.array([grads.dc_weight_logit]))
    return np.concatenate(parts)


# --------------------------------------------------------------- primitives

def _patches(x: np.ndarray, k: int) -> np.ndarray:
    """(C, H, W) -> (valid_pixels, C*k*k) sliding windows."""
    win = sliding_window_view(x, (k, k), axis=(1, 2))  # (C, vr, vc, k, k)
    c, vr, vc = win.shape[:3]
    return win.transpose(1, 2, 0, 3, 4).reshape(vr * vc, c * k * k)


def _kernel_matrix(K: np.ndarray) -> np.ndarray:
    """(Co, Ci, k, k) -> (Co, Ci*k*k) in window-offset order (spatial flip)."""
    co = K.shape[0]
    return K[:, :, ::-1, ::-1].reshape(co, -1)


def _unflip_kernel_grad(G: np.ndarray, shape) -> np.ndarray:
    co, ci, k, _ = shape
    return G.reshape(co, ci, k, k)[:, :, ::-1, ::-1].copy()


def complex_conv_valid(x: np.ndarray, K: np.ndarray) -> np.ndarray:
    """Multi-channel valid complex convolution.

    out[o] = sum_i K[o, i] * x[i] (true convolution, no padding); spatial
    dims shrink by kernel-1 per axis.
    """
    co, ci, k, _ = K.shape
    if x.shape[0] != ci:
        raise ValueError(f"channel mismatch: input {x.shape[0]}, kernels expect {ci}")
    if x.shape[1] < k or x.shape[2] < k:
        raise ValueError("input smaller than kernel")
    vr, vc = x.shape[1] - k + 1, x.shape[2] - k + 1
    P = _patches(x, k)
    y = P @ _kernel_matrix(K).T
    return np.ascontiguousarray(y.T.reshape(co, vr, vc))


def complex_deconv_full(y: np.ndarray, K: np.ndarray) -> np.ndarray:
    """Adjoint of complex_conv_valid with the same kernels.

    Full convolution with conjugate-flipped kernels and transposed channel
    dims; spatial dims grow by kernel-1 per axis.
    """
    co, ci, k, _ = K.shape
    if y.shape[0] != co:
        raise ValueError(f"channel mismatch: input {y.shape[0]}, kernels produce {co}")
    h, w = y.shape[1], y.shape[2]
    V = y.reshape(co, h * w).T @ np.conj(_kernel_matrix(K))  # (pixels, Ci*k*k)
    out = np.zeros((ci, h + k - 1, w + k - 1), dtype=np.complex128)
    cols = V.reshape(h, w, ci, k, k)
    for a in range(k):
        for b in range(k):
            out[:, a:a + h, b:b + w] += cols[:, :, :, a, b].transpose(2, 0, 1)
    return out


def _conv_kernel_grad(x: np.ndarray, g_y: np.ndarray, K_shape) -> np.ndarray:
    """Parameter cotangent of y = conv(x; K) given output cotangent g_y."""
    co, ci, k, _ = K_shape
    P = _patches(x, k)
    G = g_y.reshape(co, -1) @ np.conj(P)
    return _unflip_kernel_grad(G, K_shape)


def _deconv_kernel_grad(y: np.ndarray, g_out: np.ndarray, K_shape) -> np.ndarray:
    """Parameter cotangent of out = deconv(y; K) given output cotangent g_out."""
    co, ci, k, _ = K_shape
    P = _patches(g_out, k)
    G = y.reshape(co, -1) @ np.conj(P)
    return _unflip_kernel_grad(G, K_shape)


def bn_tanh(x: np.ndarray, bn: BNParams, mode: str, update_running: bool = False):
    """Per-channel BN on real/imag parts, affine, then part-wise tanh.

    Returns (output, cache) where cache supports the backward pass.
    """
    parts = np.stack([x.real, x.imag], axis=-1)  # (C, h, w, 2)
    if mode == "train":
        mean = parts.mean(axis=(1, 2))                       # (C, 2)
        var = parts.var(axis=(1, 2))
        if update_running:
            bn.run_mean[:] = (1 - _BN_MOMENTUM) * bn.run_mean + _BN_MOMENTUM * mean
            bn.run_var[:] = (1 - _BN_MOMENTUM) * bn.run_var + _BN_MOMENTUM * var
    elif mode == "eval":
        mean, var = bn.run_mean, bn.run_var
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    std = np.sqrt(var + _BN_EPS)
    norm = (parts - mean[:, None, None, :]) / std[:, None, None, :]
    affine = bn.scale[:, None, None, :] * norm + bn.shift[:, None, None, :]
    t = np.tanh(affine)
    out = t[..., 0] + 1j * t[..., 1]
    cache = (norm, std, t, mode)
    return out, cache


def bn_tanh_backward(g_out: np.ndarray, cache, bn: BNParams):
    """Returns (g_x complex cotangent, g_scale, g_shift)."""
    norm, std, t, mode = cache
    g = np.stack([g_out.real, g_out.imag], axis=-1) * (1.0 - t * t)
    g_scale = np.einsum("chwp,chwp->cp", g, norm)
    g_shift = g.sum(axis=(1, 2))
    gn = g * bn.scale[:, None, None, :]
    if mode == "train":
        m = gn.mean(axis=(1, 2))
        mc = np.einsum("chwp,chwp->cp", gn, norm) / (norm.shape[1] * norm.shape[2])
        gx = (gn - m[:, None, None, :] - norm * mc[:, None, None, :]) / std[:, None, None, :]
    else:
        gx = gn / std[:, None, None, :]
    return gx[..., 0] + 1j * gx[..., 1], g_scale, g_shift


# ----------------------------------------------------------------- denoiser

def denoiser_forward(z: np.ndarray, params: NetworkParams, cfg: NetworkConfig,
                     mode: str = "eval", update_running: bool = False):
    """D(z) = z - N(z); returns (output, cache)."""
    n = cfg.depth
    x = z
    conv_inputs = []
    bn_caches = []
    for j in range(n):
        conv_inputs.append(x)
        x = complex_conv_valid(x, params.kernels[j])
        if not cfg.linear:
            x, c = bn_tanh(x, params.bn[j], mode, update_running)
            bn_caches.append(c)
    deconv_inputs = []
    for j in range(n):
        mirror = n - 1 - j
        deconv_inputs.append(x)
        x = complex_deconv_full(x, params.kernels[mirror])
        if not cfg.linear and j < n - 1:
            x, c = bn_tanh(x, params.bn[n + j], mode, update_running)
            bn_caches.append(c)
    cache = (z, conv_inputs, deconv_inputs, bn_caches)
    return z - x, cache


def denoiser_backward(g_out: np.ndarray, cache, params: NetworkParams,
                      cfg: NetworkConfig, grads: NetworkGrads) -> np.ndarray:
    """Accumulates parameter cotangents into grads; returns cotangent of z."""
    z, conv_inputs, deconv_inputs, bn_caches = cache
    n = cfg.depth
    g = -g_out  # through N's output in z - N(z)
    for j in reversed(range(n)):
        mirror = n - 1 - j
        if not cfg.linear and j < n - 1:
            g, gs, gsh = bn_tanh_backward(g, bn_caches[n + j], params.bn[n + j])
            grads.bn_scale[n + j] += gs
            grads.bn_shift[n + j] += gsh
        K = params.kernels[mirror]
        grads.kernels[mirror] += _deconv_kernel_grad(deconv_inputs[j], g, K.shape)
        g = complex_conv_valid(g, K)
    for j in reversed(range(n)):
        if not cfg.linear:
            g, gs, gsh = bn_tanh_backward(g, bn_caches[j], params.bn[j])
            grads.bn_scale[j] += gs
            grads.bn_shift[j] += gsh
        K = params.kernels[j]
        grads.kernels[j] += _conv_kernel_grad(conv_inputs[j], g, K.shape)
        g = complex_deconv_full(g, K)
    return g_out + g  # identity branch plus denoiser branch


# --------------------------------------------------------- data consistency

def dc_block(z: np.ndarray, b: np.ndarray, mask: np.ndarray, weights,
             beta: float) -> np.ndarray:
    """Per-frequency solve of ||A f - b||^2 + beta ||grad f - z||^2.

    f[k] = (s b + beta (conj(wx) z_x + conj(wy) z_y)) / (s + beta q) with
    q = |wx|^2 + |wy|^2; entries with zero denominator (unsampled flat
    frequencies) are set to 0.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    s = mask.astype(float)
    q = gradient_magnitude_sq(*b.shape)
    denom = s + beta * q
    numer = s * b + beta * gradient_adjoint(z, weights)
    with np.errstate(invalid="ignore", divide="ignore"):
        f = np.where(denom > 0, numer / np.where(denom > 0, denom, 1.0), 0.0)
    return f


def dc_backward(g_f: np.ndarray, z: np.ndarray, f: np.ndarray, b: np.ndarray,
                mask: np.ndarray, weights, beta: float):
    """Returns (cotangent of z, dL/dbeta)."""
    wx, wy = weights
    s = mask.astype(float)
    q = gradient_magnitude_sq(*b.shape)
    denom = s + beta * q
    live = denom > 0
    inv = np.where(live, 1.0 / np.where(live, denom, 1.0), 0.0)
    gz = np.stack([beta * wx * inv * g_f, beta * wy * inv * g_f])
    u = gradient_adjoint(z, weights)
    df_dbeta = np.where(live, (u - f * q) * inv, 0.0)
    return gz, float(np.sum(g_f.real * df_dbeta.real + g_f.imag * df_dbeta.imag))


def dc_block_image(zhat: np.ndarray, b: np.ndarray, mask: np.ndarray,
                   beta: float) -> np.ndarray:
    """Unweighted data consistency for the image-domain variant."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    s = mask.astype(float)
    return (s * b + beta * zhat) / (s + beta)


def dc_image_backward(g_f: np.ndarray, zhat: np.ndarray, f: np.ndarray,
                      b: np.ndarray, mask: np.ndarray, beta: float):
    s = mask.astype(float)
    inv = 1.0 / (s + beta)
    g_z = beta * inv * g_f
    df_dbeta = (zhat - f) * inv
    return g_z, float(np.sum(g_f.real * df_dbeta.real + g_f.imag * df_dbeta.imag))


# ------------------------------------------------------------ unrolled model

def unrolled_forward(b: np.ndarray, mask: np.ndarray, params: NetworkParams,
                     cfg: NetworkConfig, mode: str = "eval",
                     update_running: bool = False, arch: str = "omodl"):
    """Run the K-iteration unrolled model.

    Returns (f_hat, image, trace). The seed iterate is the zero-filled
    spectrum (the data-consistency solve applied to the zero-filled
    gradient), and the same parameters are reused at every iteration.
    """
    if arch not in ("omodl", "image"):
        raise ValueError(f"unknown arch {arch!r}")
    beta = params.beta
    zf = apply_sampling(b, mask)
    if arch == "omodl":
        weights = gradient_weights(*b.shape)
        z0 = gradient_transform(zf, weights)
        f = dc_block(z0, b, mask, weights, beta)
        env = params.envelope
        iters = []
        for _ in range(cfg.unroll_iters):
            g = gradient_transform(f, weights)
            # whiten the heavy-tailed spectrum so conv features are O(1)
            zw = g if env is None else g / env
            dw, dcache = denoiser_forward(zw, params, cfg, mode, update_running)
            z = dw if env is None else env * dw
            f_new = dc_block(z, b, mask, weights, beta)
            iters.append((g, dcache, z, f_new))
            f = f_new
        trace = {"arch": arch, "z0": z0, "f0": None, "iters": iters,
                 "weights": weights, "b": b, "mask": mask, "beta": beta,
                 "mode": mode}
        return f, inverse_dft(f), trace
    # image-domain variant
    f = dc_block_image(zf, b, mask, beta)
    iters = []
    for _ in range(cfg.unroll_iters):
        x = inverse_dft(f)
        d, dcache = denoiser_forward(x[None], params, cfg, mode, update_running)
        zhat = forward_dft(d[0])
        f_new = dc_block_image(zhat, b, mask, beta)
        iters.append((x, dcache, zhat, f_new))
        f = f_new
    trace = {"arch": arch, "z0": zf, "f0": None, "iters": iters,
             "weights": None, "b": b, "mask": mask, "beta": beta, "mode": mode}
    return f, inverse_dft(f), trace


def unrolled_backward(g_image: np.ndarray, trace, params: NetworkParams,
                      cfg: NetworkConfig) -> NetworkGrads:
    """Exact reverse-mode gradients of a scalar loss given its cotangent at
    the output image."""
    b, mask, beta = trace["b"], trace["mask"], trace["beta"]
    grads = zero_grads(params)
    g_f = forward_dft(g_image)  # adjoint of the unitary inverse DFT
    g_beta = 0.0
    if trace["arch"] == "omodl":
        weights = trace["weights"]
        env = params.envelope
        for (g_in, dcache, z, f_new) in reversed(trace["iters"]):
            gz, db = dc_backward(g_f, z, f_new, b, mask, weights, beta)
            g_beta += db
            g_dw = gz if env is None else gz * env
            gg = denoiser_backward(g_dw, dcache, params, cfg, grads)
            if env is not None:
                gg = gg / env
            g_f = gradient_adjoint(gg, weights)
        # seed: f0 = dc_block(z0) with z0 built from the (fixed) data
        z0 = trace["z0"]
        f0 = dc_block(z0, b, mask, weights, beta)
        _, db = dc_backward(g_f, z0, f0, b, mask, weights, beta)
        g_beta += db
    else:
        for (x, dcache, zhat, f_new) in reversed(trace["iters"]):
            g_z, db = dc_image_backward(g_f, zhat, f_new, b, mask, beta)
            g_beta += db
            g_d = inverse_dft(g_z)  # adjoint of forward_dft
            g_x = denoiser_backward(g_d[None], dcache, params, cfg, grads)
            g_f = forward_dft(g_x[0])
        zf = trace["z0"]
        f0 = dc_block_image(zf, b, mask, beta)
        _, db = dc_image_backward(g_f, zf, f0, b, mask, beta)
        g_beta += db
    grads.dc_weight_logit = g_beta * beta  # chain through beta = exp(theta)
    return grads
