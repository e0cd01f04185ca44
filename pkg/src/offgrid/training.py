"""MSE training of the unrolled models.

Deterministic given the seed: initialization, shuffling, batching and the
validation split all come from one Philox generator. Gradients are
accumulated over batch elements in fixed index order and fed to Adam.

Checkpoints are a text manifest ("key=value" per line, then a
"---BLOB---" separator) followed by a little-endian float64 blob holding
every tensor in manifest-declared order; save/load round-trips are
bit-exact the trainable vector, BN running statistics and Adam moments.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kspace import apply_sampling, gradient_transform, inverse_dft
from .network import (NetworkConfig, NetworkParams, denoiser_backward,
                      denoiser_forward, init_params, grads_to_vector,
                      params_to_vector, unrolled_forward, unrolled_backward,
                      vector_to_params, zero_grads)


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int
    lr: float = 1e-3
    lr_decay: float = 1.0       # per-epoch multiplier on the learning rate
    pretrain_epochs: int = 0    # denoiser-only regression epochs before unrolling
    pretrain_lr: float | None = None  # learning rate for the warm-start phase
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    grad_clip: float | None = None
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs, batch_size and lr must be positive")
        if not (0 < self.lr_decay <= 1):
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.pretrain_epochs < 0:
            raise ValueError("pretrain_epochs must be nonnegative")
        if self.pretrain_lr is not None and self.pretrain_lr <= 0:
            raise ValueError("pretrain_lr must be positive when set")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ValueError("adam betas must lie in (0,1)")
        if self.adam_eps <= 0:
            raise ValueError("adam_eps must be positive")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive when set")


def mse_loss(recon: np.ndarray, reference: np.ndarray):
    """Mean squared complex modulus of the difference, plus its cotangent
    at recon (dL/dRe + i dL/dIm)."""
    if recon.shape != reference.shape:
        raise ValueError(f"shape mismatch {recon.shape} vs {reference.shape}")
    diff = recon - reference
    loss = float(np.mean(np.abs(diff) ** 2))
    grad = 2.0 * diff / diff.size
    return loss, grad


def adam_step(params_vec: np.ndarray, grads_vec: np.ndarray, m: np.ndarray,
              v: np.ndarray, t: int, cfg: TrainConfig, lr: float | None = None):
    """Standard Adam with bias correction; returns updated (params, m, v)."""
    if t < 1:
        raise ValueError("t starts at 1")
    if lr is None:
        lr = cfg.lr
    m = cfg.adam_beta1 * m + (1 - cfg.adam_beta1) * grads_vec
    v = cfg.adam_beta2 * v + (1 - cfg.adam_beta2) * grads_vec ** 2
    m_hat = m / (1 - cfg.adam_beta1 ** t)
    v_hat = v / (1 - cfg.adam_beta2 ** t)
    params_vec = params_vec - lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    return params_vec, m, v


@dataclass
class Checkpoint:
    net_cfg: NetworkConfig
    arch: str
    params: NetworkParams
    adam_m: np.ndarray
    adam_v: np.ndarray
    adam_t: int
    epoch: int
    seed: int
    rng_state: dict | None = None


def _philox_state_to_str(state: dict) -> str:
    s = state["state"]
    nums = list(s["counter"]) + list(s["key"]) + list(state["buffer"]) + [
        state["buffer_pos"], state["has_uint32"], state["uinteger"]]
    return ",".join(str(int(x)) for x in nums)


def _philox_state_from_str(text: str) -> dict:
    nums = [int(x) for x in text.split(",")]
    return {
        "bit_generator": "Philox",
        "state": {"counter": np.array(nums[0:4], dtype=np.uint64),
                  "key": np.array(nums[4:6], dtype=np.uint64)},
        "buffer": np.array(nums[6:10], dtype=np.uint64),
        "buffer_pos": nums[10],
        "has_uint32": nums[11],
        "uinteger": nums[12],
    }


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    cfg = ckpt.net_cfg
    pvec = params_to_vector(ckpt.params)
    tensors = [("param_vector", pvec)]
    for i, b in enumerate(ckpt.params.bn):
        tensors.append((f"bn{i}_run_mean", b.run_mean.ravel()))
        tensors.append((f"bn{i}_run_var", b.run_var.ravel()))
    tensors.append(("adam_m", ckpt.adam_m))
    tensors.append(("adam_v", ckpt.adam_v))
    if ckpt.params.envelope is not None:
        tensors.append(("envelope", ckpt.params.envelope.ravel()))
    lines = [
        "format_version=1",
        f"arch={ckpt.arch}",
        f"depth={cfg.depth}",
        f"channels={cfg.channels}",
        f"kernel={cfg.kernel}",
        f"unroll_iters={cfg.unroll_iters}",
        f"in_channels={cfg.in_channels}",
        f"linear={int(cfg.linear)}",
        f"epoch={ckpt.epoch}",
        f"seed={ckpt.seed}",
        f"adam_t={ckpt.adam_t}",
    ]
    if ckpt.rng_state is not None:
        lines.append(f"rng={_philox_state_to_str(ckpt.rng_state)}")
    if ckpt.params.envelope is not None:
        shape = ",".join(str(s) for s in ckpt.params.envelope.shape)
        lines.append(f"envelope_shape={shape}")
    for name, arr in tensors:
        lines.append(f"tensor={name}:{arr.size}")
    blob = np.concatenate([np.asarray(arr, dtype="<f8").ravel() for _, arr in tensors])
    with open(path, "wb") as fh:
        fh.write("\n".join(lines).encode())
        fh.write(b"\n---BLOB---\n")
        fh.write(blob.tobytes())


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    sep = b"\n---BLOB---\n"
    head, blob = raw.split(sep, 1)
    kv = {}
    tensor_decl = []
    for line in head.decode().splitlines():
        key, value = line.split("=", 1)
        if key == "tensor":
            name, size = value.rsplit(":", 1)
            tensor_decl.append((name, int(size)))
        else:
            kv[key] = value
    if kv.get("format_version") != "1":
        raise ValueError(f"unsupported checkpoint version {kv.get('format_version')}")
    cfg = NetworkConfig(depth=int(kv["depth"]), channels=int(kv["channels"]),
                        kernel=int(kv["kernel"]), unroll_iters=int(kv["unroll_iters"]),
                        in_channels=int(kv["in_channels"]), linear=bool(int(kv["linear"])))
    flat = np.frombuffer(blob, dtype="<f8")
    tensors = {}
    pos = 0
    for name, size in tensor_decl:
        tensors[name] = flat[pos:pos + size].copy()
        pos += size
    params = init_params(cfg, np.random.default_rng(0))
    params = vector_to_params(tensors["param_vector"], params)
    for i, b in enumerate(params.bn):
        b.run_mean[:] = tensors[f"bn{i}_run_mean"].reshape(b.run_mean.shape)
        b.run_var[:] = tensors[f"bn{i}_run_var"].reshape(b.run_var.shape)
    if "envelope" in tensors:
        shape = tuple(int(s) for s in kv["envelope_shape"].split(","))
        params.envelope = tensors["envelope"].reshape(shape)
    rng_state = _philox_state_from_str(kv["rng"]) if "rng" in kv else None
    return Checkpoint(net_cfg=cfg, arch=kv["arch"], params=params,
                      adam_m=tensors["adam_m"], adam_v=tensors["adam_v"],
                      adam_t=int(kv["adam_t"]), epoch=int(kv["epoch"]),
                      seed=int(kv["seed"]), rng_state=rng_state)


def matched_channels(reference: NetworkConfig, in_channels: int = 1) -> int:
    """Hidden-channel count for a variant with a different input width whose
    trainable-parameter total lands within 1% of the reference network's."""
    target = _param_count(reference)
    best, best_gap = reference.channels, None
    for c in range(1, 4 * reference.channels + 8):
        cand = NetworkConfig(depth=reference.depth, channels=c,
                             kernel=reference.kernel,
                             unroll_iters=reference.unroll_iters,
                             in_channels=in_channels, linear=reference.linear)
        gap = abs(_param_count(cand) - target)
        if best_gap is None or gap < best_gap:
            best, best_gap = c, gap
    return best


def _param_count(cfg: NetworkConfig) -> int:
    count = 1  # dc weight
    for j in range(cfg.depth):
        c_in = cfg.in_channels if j == 0 else cfg.channels
        count += 2 * cfg.channels * c_in * cfg.kernel ** 2
    count += cfg.bn_layers * cfg.channels * 4  # scale+shift, two parts
    return count


def train(samples: list, net_cfg: NetworkConfig, train_cfg: TrainConfig,
          arch: str = "omodl", log_path=None, resume: "Checkpoint | None" = None):
    """Train on (reference_kspace, mask, b) triples; returns (best checkpoint,
    per-epoch loss log rows [(epoch, train_mse, val_mse), ...])."""
    if not samples:
        raise ValueError("dataset is empty")
    shapes = {s[0].shape for s in samples}
    if len(shapes) != 1:
        raise ValueError("all samples must share grid dims")

    rng = np.random.Generator(np.random.Philox(key=train_cfg.seed))
    params = init_params(net_cfg, rng)
    if arch == "omodl":
        # fixed whitening envelope: mean reference gradient magnitude
        env = np.zeros_like(np.abs(gradient_transform(samples[0][0])))
        for kref, _, _ in samples:
            env += np.abs(gradient_transform(kref))
        params.envelope = env / len(samples) + 1e-3
    if resume is not None:
        if resume.net_cfg != net_cfg or resume.arch != arch:
            raise ValueError("resume checkpoint does not match the requested setup")
        params = resume.params.copy()
        m, v, t = resume.adam_m.copy(), resume.adam_v.copy(), resume.adam_t
        rng.bit_generator.state = resume.rng_state
        pvec = params_to_vector(params)
    else:
        pvec = params_to_vector(params)
        m = np.zeros_like(pvec)
        v = np.zeros_like(pvec)
        t = 0

    order = rng.permutation(len(samples))
    n_val = int(round(train_cfg.val_fraction * len(samples)))
    val_idx = list(order[:n_val])
    train_idx = list(order[n_val:])
    if not train_idx:
        train_idx, val_idx = val_idx, []
    references = [inverse_dft(s[0]) for s in samples]

    def eval_mse(indices):
        if not indices:
            return float("nan")
        total = 0.0
        for i in indices:
            kref, mask, b = samples[i]
            _, img, _ = unrolled_forward(b, mask, params, net_cfg, mode="eval", arch=arch)
            total += mse_loss(img, references[i])[0]
        return total / len(indices)

    # optional warm start: fit the denoiser alone to map the zero-filled
    # gradient (or image) to the reference before unrolled fine-tuning,
    # which keeps the unrolled training out of signal-corrupting basins
    if train_cfg.pretrain_epochs and resume is None:
        pre = []
        for i in train_idx:
            kref, mask, b = samples[i]
            zf = apply_sampling(b, mask)
            if arch == "omodl":
                env = params.envelope
                pre.append((gradient_transform(zf) / env,
                            gradient_transform(kref) / env))
            else:
                pre.append((inverse_dft(zf)[None], references[i][None]))
        base_lr = (train_cfg.pretrain_lr if train_cfg.pretrain_lr is not None
                   else train_cfg.lr)
        for epoch in range(train_cfg.pretrain_epochs):
            lr = base_lr * train_cfg.lr_decay ** epoch
            perm = rng.permutation(len(pre))
            for start in range(0, len(pre), train_cfg.batch_size):
                batch = perm[start:start + train_cfg.batch_size]
                gvec = np.zeros_like(pvec)
                for i in batch:
                    z_in, z_ref = pre[i]
                    out, cache = denoiser_forward(z_in, params, net_cfg,
                                                  mode="train", update_running=True)
                    loss, g_out = mse_loss(out, z_ref)
                    if not np.isfinite(loss):
                        raise FloatingPointError(
                            f"non-finite pretraining loss at epoch {epoch}")
                    grads = zero_grads(params)
                    denoiser_backward(g_out, cache, params, net_cfg, grads)
                    gvec += grads_to_vector(grads)
                gvec /= len(batch)
                t += 1
                pvec, m, v = adam_step(pvec, gvec, m, v, t, train_cfg, lr=lr)
                params = vector_to_params(pvec, params)
        # fresh optimizer state for the unrolled phase
        m = np.zeros_like(pvec)
        v = np.zeros_like(pvec)
        t = 0

    log = []
    best = None
    best_val = np.inf
    for epoch in range(1, train_cfg.epochs + 1):
        lr = train_cfg.lr * train_cfg.lr_decay ** (epoch - 1)
        perm = rng.permutation(len(train_idx))
        epoch_loss = 0.0
        seen = 0
        for start in range(0, len(train_idx), train_cfg.batch_size):
            batch = [train_idx[j] for j in perm[start:start + train_cfg.batch_size]]
            gvec = np.zeros_like(pvec)
            for i in batch:
                kref, mask, b = samples[i]
                _, img, trace = unrolled_forward(b, mask, params, net_cfg,
                                                 mode="train", update_running=True,
                                                 arch=arch)
                loss, g_img = mse_loss(img, references[i])
                if not np.isfinite(loss):
                    raise FloatingPointError(
                        f"non-finite loss {loss} at epoch {epoch}, sample {i}")
                epoch_loss += loss
                seen += 1
                gvec += grads_to_vector(unrolled_backward(g_img, trace, params, net_cfg))
            gvec /= len(batch)
            if train_cfg.grad_clip is not None:
                nrm = np.linalg.norm(gvec)
                if nrm > train_cfg.grad_clip:
                    gvec *= train_cfg.grad_clip / nrm
            t += 1
            pvec, m, v = adam_step(pvec, gvec, m, v, t, train_cfg, lr=lr)
            params = vector_to_params(pvec, params)
        train_mse = epoch_loss / max(seen, 1)
        val_mse = eval_mse(val_idx)
        log.append((epoch, train_mse, val_mse))
        score = val_mse if val_idx else train_mse
        if score <= best_val:
            best_val = score
            best = Checkpoint(net_cfg=net_cfg, arch=arch, params=params.copy(),
                              adam_m=m.copy(), adam_v=v.copy(), adam_t=t,
                              epoch=epoch, seed=train_cfg.seed,
                              rng_state=rng.bit_generator.state)
    if log_path is not None:
        write_loss_log(log_path, log)
    return best, log


def write_loss_log(path, log) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,train_mse,val_mse\n")
        for epoch, train_mse, val_mse in log:
            fh.write(f"{epoch},{train_mse!r},{val_mse!r}\n")


def train_image_domain_baseline(samples: list, net_cfg: NetworkConfig,
                                train_cfg: TrainConfig, log_path=None):
    """Same trainer, image-domain denoiser, parameter count matched by
    adjusting hidden channels."""
    channels = matched_channels(net_cfg, in_channels=1)
    cfg = NetworkConfig(depth=net_cfg.depth, channels=channels,
                        kernel=net_cfg.kernel, unroll_iters=net_cfg.unroll_iters,
                        in_channels=1, linear=net_cfg.linear)
    return train(samples, cfg, train_cfg, arch="image", log_path=log_path)
