"""Adam optimization, learning-rate schedule, crop/augmentation pipeline,
the training loop and binary checkpointing.

The whole loop is a pure function of (dataset bytes, configs, seed): every
random choice is drawn from a counter-based stream derived from the seed and
the step index, so same-seed runs are bit-identical and a run resumed from a
checkpoint matches the uninterrupted one exactly.
"""

import struct
import zlib
from dataclasses import dataclass, replace

import numpy as np

from .degrade import Rng, apply_degradation
from .errors import (
    ConfigError,
    CorruptFileError,
    FormatError,
    NumericError,
    ShapeError,
    UnsupportedVersionError,
)
from .network import (
    ModelConfig,
    build_weights,
    cola_forward,
    l2_loss,
    model_config_from_text,
    model_config_to_text,
)
from .tensor import backward

_MAGIC = b"COLANET1"
_VERSION = 1

# purpose tags for per-step random streams
_STREAM_BATCH = 2
_STREAM_NOISE = 3
_STREAM_SIGMA = 4


def _stream(purpose, step):
    return (purpose << 48) | step


@dataclass
class TrainConfig:
    """Optimizer, schedule and batch-assembly settings.

    An "epoch" is a fixed number of optimizer steps (``steps_per_epoch``);
    the halving schedule counts these epochs.
    """

    base_lr: float = 1e-3
    halving_period_epochs: int = 200
    batch_size: int = 32
    crop: int = 64
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    total_epochs: int = 1
    steps_per_epoch: int = 100
    seed: int = 0
    augmentation: bool = True
    grad_clip: float = 0.0
    checkpoint_every: int = 0
    blind: bool = False
    blind_sigma_lo: float = 10.0
    blind_sigma_hi: float = 50.0

    def validate(self):
        if self.base_lr <= 0 or self.halving_period_epochs < 1:
            raise ConfigError("base_lr and halving period must be positive")
        if min(self.batch_size, self.crop, self.total_epochs,
               self.steps_per_epoch) < 1:
            raise ConfigError("batch/crop/epoch settings must be positive")
        if not 0 <= self.adam_beta1 < 1 or not 0 <= self.adam_beta2 < 1:
            raise ConfigError("adam betas must lie in [0, 1)")
        if self.adam_eps <= 0:
            raise ConfigError("adam eps must be positive")
        return self


def lr_at(epoch, config):
    """Learning rate at an epoch: base halved once per halving period."""
    if epoch < 0:
        raise ConfigError("epoch must be non-negative")
    return config.base_lr * 0.5 ** (epoch // config.halving_period_epochs)


def adam_step(params, grads=None, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8,
              t=1):
    """Bias-corrected Adam update, in place on the parameter values.

    ``grads`` defaults to the tape gradients already stored on the
    parameters; moments are created at zero on first use.
    """
    if t < 1:
        raise ConfigError("step index t starts at 1")
    if grads is None:
        grads = [p.value.grad for p in params]
    if len(grads) != len(params):
        raise ShapeError("one gradient per parameter required")
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g in zip(params, grads):
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float32)
        if g.shape != p.value.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} != parameter shape "
                f"{p.value.data.shape} for {p.name}")
        if p.first_moment is None:
            p.first_moment = np.zeros_like(p.value.data)
            p.second_moment = np.zeros_like(p.value.data)
        p.first_moment *= beta1
        p.first_moment += (1.0 - beta1) * g
        p.second_moment *= beta2
        p.second_moment += (1.0 - beta2) * (g * g)
        m_hat = p.first_moment / c1
        v_hat = p.second_moment / c2
        p.value.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(np.float32)
    return params


def augment(patch, mode):
    """Apply one of the 8 dihedral transforms to the last two axes.

    mode & 4 mirrors horizontally first, then mode & 3 counts 90-degree
    counterclockwise rotations.  Mode 0 is the identity.
    """
    if not 0 <= mode <= 7:
        raise ConfigError("augmentation mode must lie in 0..7")
    arr = np.asarray(patch)
    k = mode & 3
    if k % 2 == 1 and arr.shape[-2] != arr.shape[-1]:
        raise ShapeError("rotation modes need a square patch")
    out = np.flip(arr, axis=-1) if mode & 4 else arr
    if k:
        out = np.rot90(out, k, axes=(-2, -1))
    return np.ascontiguousarray(out)


def augment_inverse(patch, mode):
    """Undo ``augment(patch, mode)`` exactly."""
    if not 0 <= mode <= 7:
        raise ConfigError("augmentation mode must lie in 0..7")
    arr = np.asarray(patch)
    k = mode & 3
    if k % 2 == 1 and arr.shape[-2] != arr.shape[-1]:
        raise ShapeError("rotation modes need a square patch")
    out = np.rot90(arr, -k, axes=(-2, -1)) if k else arr
    if mode & 4:
        out = np.flip(out, axis=-1)
    return np.ascontiguousarray(out)


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------
#
#   magic "COLANET1" | u16 version | u32 len + config text (UTF-8)
#   u32 tensor count | per tensor: u16 name len, name, u8 rank,
#       rank x u32 dims, little-endian float32 payload
#   u64 step | u64 seed | u8 optimizer flag
#   if flag: u32 moment count | per entry: u16 name len, name, u8 rank,
#       rank x u32 dims, float32 first-moment payload, float32 second-moment
#       payload
#   u32 CRC-32 of all preceding bytes

@dataclass
class Checkpoint:
    """Model configuration plus full parameter/optimizer/loop state."""

    config: ModelConfig
    weights: object
    step: int = 0
    seed: int = 0


def _pack_tensor(name, arr):
    nb = name.encode("utf-8")
    head = struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + dims + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def save_checkpoint(ckpt, path):
    """Write a checkpoint; the trailing CRC covers every preceding byte."""
    cfg_text = model_config_to_text(ckpt.config).encode("utf-8")
    chunks = [_MAGIC, struct.pack("<H", _VERSION),
              struct.pack("<I", len(cfg_text)), cfg_text]
    entries = list(ckpt.weights.params.items())
    buffers = list(ckpt.weights.buffers.items())
    chunks.append(struct.pack("<I", len(entries) + len(buffers)))
    for name, p in entries:
        chunks.append(_pack_tensor(name, p.value.data))
    for name, arr in buffers:
        chunks.append(_pack_tensor(name, arr))
    chunks.append(struct.pack("<QQ", ckpt.step, ckpt.seed))
    with_moments = [(n, p) for n, p in entries if p.first_moment is not None]
    if with_moments:
        chunks.append(struct.pack("<B", 1))
        chunks.append(struct.pack("<I", len(with_moments)))
        for name, p in with_moments:
            nb = name.encode("utf-8")
            chunks.append(struct.pack("<H", len(nb)) + nb
                          + struct.pack("<B", p.first_moment.ndim)
                          + struct.pack(f"<{p.first_moment.ndim}I",
                                        *p.first_moment.shape)
                          + p.first_moment.astype("<f4").tobytes()
                          + p.second_moment.astype("<f4").tobytes())
    else:
        chunks.append(struct.pack("<B", 0))
    payload = b"".join(chunks)
    payload += struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(payload)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CorruptFileError("checkpoint truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_tensor(reader):
    (nlen,) = reader.unpack("<H")
    name = reader.take(nlen).decode("utf-8")
    (rank,) = reader.unpack("<B")
    dims = reader.unpack(f"<{rank}I")
    count = int(np.prod(dims))
    arr = np.frombuffer(reader.take(4 * count), dtype="<f4").reshape(dims)
    return name, arr.astype(np.float32)


def load_checkpoint(path):
    """Read and validate a checkpoint file."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(_MAGIC) + 2 + 4 + 4:
        raise CorruptFileError("checkpoint too short")
    if data[:len(_MAGIC)] != _MAGIC:
        raise FormatError("bad checkpoint magic")
    (stored_crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != stored_crc:
        raise CorruptFileError("checkpoint CRC mismatch")
    reader = _Reader(data[:-4])
    reader.take(len(_MAGIC))
    (version,) = reader.unpack("<H")
    if version != _VERSION:
        raise UnsupportedVersionError(
            f"checkpoint version {version} unsupported")
    (cfg_len,) = reader.unpack("<I")
    config = model_config_from_text(reader.take(cfg_len).decode("utf-8"))
    weights = build_weights(config, seed=0)
    (count,) = reader.unpack("<I")
    expected = len(weights.params) + len(weights.buffers)
    if count != expected:
        raise FormatError(
            f"checkpoint holds {count} tensors, config implies {expected}")
    for _ in range(count):
        name, arr = _read_tensor(reader)
        if name in weights.params:
            target = weights.params[name].value
            if target.data.shape != arr.shape:
                raise FormatError(f"tensor {name!r} has shape {arr.shape}, "
                                  f"expected {target.data.shape}")
            target.data = arr
        elif name in weights.buffers:
            if weights.buffers[name].shape != arr.shape:
                raise FormatError(f"buffer {name!r} shape mismatch")
            weights.buffers[name][...] = arr
        else:
            raise FormatError(f"unexpected tensor {name!r} in checkpoint")
    step, seed = reader.unpack("<QQ")
    (flag,) = reader.unpack("<B")
    if flag not in (0, 1):
        raise FormatError("bad optimizer-section flag")
    if flag:
        (mcount,) = reader.unpack("<I")
        for _ in range(mcount):
            (nlen,) = reader.unpack("<H")
            name = reader.take(nlen).decode("utf-8")
            (rank,) = reader.unpack("<B")
            dims = reader.unpack(f"<{rank}I")
            count = int(np.prod(dims))
            m = np.frombuffer(reader.take(4 * count), dtype="<f4")
            v = np.frombuffer(reader.take(4 * count), dtype="<f4")
            if name not in weights.params:
                raise FormatError(f"moments for unknown tensor {name!r}")
            p = weights.params[name]
            if p.value.data.shape != tuple(dims):
                raise FormatError(f"moment shape mismatch for {name!r}")
            p.first_moment = m.reshape(dims).astype(np.float32)
            p.second_moment = v.reshape(dims).astype(np.float32)
    if reader.pos != len(reader.data):
        raise FormatError("trailing bytes after checkpoint payload")
    return Checkpoint(config, weights, step=int(step), seed=int(seed))


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _sample_crop(img, crop, rng):
    h, w = img.shape[-2], img.shape[-1]
    if h < crop or w < crop:
        raise ConfigError("training image smaller than the crop size")
    y0 = int(rng.integers(0, h - crop + 1)[0])
    x0 = int(rng.integers(0, w - crop + 1)[0])
    return img[..., y0:y0 + crop, x0:x0 + crop]


def _assemble_batch(dataset, degradation, tcfg, in_channels, step):
    rng_pick = Rng(tcfg.seed, _stream(_STREAM_BATCH, step))
    rng_noise = Rng(degradation.seed, _stream(_STREAM_NOISE, step))
    spec = degradation
    if tcfg.blind and degradation.kind == "awgn":
        rng_sigma = Rng(tcfg.seed, _stream(_STREAM_SIGMA, step))
        sigma = (tcfg.blind_sigma_lo
                 + float(rng_sigma.uniforms(1)[0])
                 * (tcfg.blind_sigma_hi - tcfg.blind_sigma_lo))
        spec = replace(degradation, sigma=sigma)
    clean = np.empty((tcfg.batch_size, in_channels, tcfg.crop, tcfg.crop),
                     dtype=np.float32)
    noisy = np.empty_like(clean)
    for b in range(tcfg.batch_size):
        idx = int(rng_pick.integers(0, len(dataset))[0])
        patch = _sample_crop(np.asarray(dataset[idx], dtype=np.float32),
                             tcfg.crop, rng_pick)
        mode = int(rng_pick.integers(0, 8)[0]) if tcfg.augmentation else 0
        patch = augment(patch, mode)
        if patch.ndim == 2:
            patch = patch[None]
        degraded = apply_degradation(patch, spec, rng_noise)
        clean[b] = patch / 255.0
        noisy[b] = degraded / 255.0
    return noisy, clean


def train(dataset, degradation, model_config, train_config, out_dir=None,
          resume=None, log_every=0):
    """Run the optimization loop and return (checkpoint, loss curve).

    Per step: sample random crops, apply a random dihedral transform,
    corrupt them with the per-step noise stream, take one forward/backward
    pass and one Adam update at the scheduled learning rate.  The loss curve
    is a list of (step, lr, loss) rows.
    """
    train_config.validate()
    degradation.validate()
    if not dataset:
        raise ConfigError("training dataset is empty")

    if resume is not None:
        config = resume.config
        weights = resume.weights
        seed = resume.seed
        start = resume.step
    else:
        config = model_config.validate()
        weights = build_weights(config, seed=train_config.seed)
        seed = train_config.seed
        start = 0
    tcfg = replace(train_config, seed=seed)

    params = weights.param_list()
    total_steps = tcfg.total_epochs * tcfg.steps_per_epoch
    curve = []
    for step in range(start + 1, total_steps + 1):
        lr = lr_at((step - 1) // tcfg.steps_per_epoch, tcfg)
        noisy, clean = _assemble_batch(dataset, degradation, tcfg,
                                       config.in_channels, step)
        weights.zero_grads()
        out, _ = cola_forward(noisy, weights, config, mode="train")
        loss = l2_loss(out, clean)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss at step {step}")
        backward(loss)
        if tcfg.grad_clip > 0:
            total = np.sqrt(sum(float(np.sum(p.value.grad ** 2))
                                for p in params if p.value.grad is not None))
            if total > tcfg.grad_clip:
                scale = tcfg.grad_clip / total
                for p in params:
                    if p.value.grad is not None:
                        p.value.grad = p.value.grad * scale
        adam_step(params, lr=lr, beta1=tcfg.adam_beta1, beta2=tcfg.adam_beta2,
                  eps=tcfg.adam_eps, t=step)
        curve.append((step, lr, value))
        if log_every and step % log_every == 0:
            print(f"step {step}/{total_steps}  lr {lr:.6f}  loss {value:.6f}")
        if (out_dir is not None and tcfg.checkpoint_every
                and step % tcfg.checkpoint_every == 0):
            save_checkpoint(Checkpoint(config, weights, step=step, seed=seed),
                            f"{out_dir}/ckpt_{step:06d}.bin")
    ckpt = Checkpoint(config, weights, step=total_steps, seed=seed)
    if out_dir is not None:
        save_checkpoint(ckpt, f"{out_dir}/ckpt_final.bin")
    return ckpt, curve
