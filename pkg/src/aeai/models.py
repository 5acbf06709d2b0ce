"""The three networks: encoder f, decoder g, discriminator D, plus the
non-learned latent interpolation layer and a bit-exact checkpoint format.

The encoder stacks conv blocks whose channel count starts at 16 and doubles
per block (capped at 128), pooling down to a 2x2 spatial map, then a single
dense layer to the latent code. The decoder mirrors it with nearest-neighbor
2x upsampling before each conv and a sigmoid output head, so decoded pixels
always lie in (0, 1). The discriminator is a smaller 3-block conv stack
ending in one sigmoid unit.
"""

from __future__ import annotations

import json
import math
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor

__all__ = [
    "ModelConfig",
    "Autoencoder",
    "Discriminator",
    "build_autoencoder",
    "build_discriminator",
    "interp_latent",
    "discriminate",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
    "PROB_CLAMP",
]

# Discriminator outputs are reported strictly inside (0, 1).
PROB_CLAMP = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    channels: int = 1
    latent_dim: int = 16
    base_channels: int = 16
    max_channels: int = 128
    disc_channels: tuple = (16, 32, 64)

    def __post_init__(self):
        s = self.image_size
        if s < 8 or (s & (s - 1)) != 0:
            raise ValueError(f"image_size must be a power of two >= 8, got {s}")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be positive")


def encoder_channels(cfg: ModelConfig):
    """Channel progression: base doubling per block, capped, down to 2x2 maps."""
    n_blocks = int(math.log2(cfg.image_size)) - 1
    return [min(cfg.base_channels * (2**i), cfg.max_channels) for i in range(n_blocks)]


class Autoencoder:
    def __init__(self, cfg: ModelConfig, rng, dtype=np.float32):
        self.cfg = cfg
        chans = encoder_channels(cfg)
        self.flat_dim = chans[-1] * 4  # final spatial map is 2x2

        enc = []
        prev = cfg.channels
        for ch in chans:
            enc.append(nn.ConvBlock(prev, ch, rng, pool=True, dtype=dtype))
            prev = ch
        enc.append(nn.Flatten())
        enc.append(nn.Dense(self.flat_dim, cfg.latent_dim, rng, dtype=dtype))
        self.encoder = nn.Stack(enc)

        dec = [
            nn.Dense(cfg.latent_dim, self.flat_dim, rng, dtype=dtype),
            nn.BatchNorm(self.flat_dim, activation="relu", dtype=dtype),
            nn.Unflatten(chans[-1], 2, 2),
        ]
        rev = list(reversed(chans))
        for ch_in, ch_out in zip(rev, rev[1:]):
            dec.append(nn.Upsample2x())
            dec.append(nn.Conv(ch_in, ch_out, rng, dtype=dtype))
            dec.append(nn.BatchNorm(ch_out, activation="relu", dtype=dtype))
        dec.append(nn.Upsample2x())
        dec.append(nn.Conv(chans[0], cfg.channels, rng, activation="sigmoid", dtype=dtype))
        self.decoder = nn.Stack(dec)

    def encode(self, x: Tensor, mode="eval") -> Tensor:
        expected = (self.cfg.channels, self.cfg.image_size, self.cfg.image_size)
        if x.data.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise ad.ShapeError("encode", x.shape, ("N", *expected))
        return self.encoder.forward(x, mode)

    def decode(self, z: Tensor, mode="eval") -> Tensor:
        if z.data.ndim != 2 or z.shape[1] != self.cfg.latent_dim:
            raise ad.ShapeError("decode", z.shape, ("N", self.cfg.latent_dim))
        return self.decoder.forward(z, mode)

    def encode_images(self, images: np.ndarray) -> np.ndarray:
        """Eval-mode ndarray API; accepts (N, H, W) or (N, C, H, W)."""
        x = np.asarray(images, dtype=np.float32)
        if x.ndim == 3:
            x = x[:, None, :, :]
        return self.encode(Tensor(x), "eval").data

    def decode_latents(self, z: np.ndarray) -> np.ndarray:
        """Eval-mode decode returning (N, H, W) for single-channel models."""
        out = self.decode(Tensor(np.asarray(z, dtype=np.float32)), "eval").data
        if self.cfg.channels == 1:
            return out[:, 0]
        return out

    def params(self):
        out = {f"encoder.{k}": v for k, v in self.encoder.params().items()}
        out.update({f"decoder.{k}": v for k, v in self.decoder.params().items()})
        return out

    def state_arrays(self):
        out = {f"encoder.{k}": v for k, v in self.encoder.state().items()}
        out.update({f"decoder.{k}": v for k, v in self.decoder.state().items()})
        return out


class Discriminator:
    def __init__(self, cfg: ModelConfig, rng, dtype=np.float32):
        self.cfg = cfg
        layers = []
        prev = cfg.channels
        size = cfg.image_size
        for ch in cfg.disc_channels:
            layers.append(nn.ConvBlock(prev, ch, rng, pool=True, dtype=dtype))
            prev = ch
            size //= 2
        layers.append(nn.Flatten())
        layers.append(nn.Dense(prev * size * size, 1, rng, activation="sigmoid", dtype=dtype))
        self.stack = nn.Stack(layers)

    def forward(self, x: Tensor, mode="eval", frozen=False) -> Tensor:
        expected = (self.cfg.channels, self.cfg.image_size, self.cfg.image_size)
        if x.data.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise ad.ShapeError("discriminate", x.shape, ("N", *expected))
        return self.stack.forward(x, mode, frozen)

    def params(self):
        return {f"disc.{k}": v for k, v in self.stack.params().items()}

    def state_arrays(self):
        return {f"disc.{k}": v for k, v in self.stack.state().items()}


def build_autoencoder(cfg: ModelConfig, seed: int, dtype=np.float32) -> Autoencoder:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(1,)))
    return Autoencoder(cfg, rng, dtype=dtype)


def build_discriminator(cfg: ModelConfig, seed: int, dtype=np.float32) -> Discriminator:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(2,)))
    return Discriminator(cfg, rng, dtype=dtype)


def discriminate(d: Discriminator, images: np.ndarray) -> np.ndarray:
    """Eval-mode probabilities, clamped strictly inside (0, 1)."""
    x = np.asarray(images, dtype=np.float32)
    if x.ndim == 3:
        x = x[:, None, :, :]
    p = d.forward(Tensor(x), "eval").data[:, 0]
    return np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)


def interp_latent(z_i, z_j, alpha: float):
    """Exact convex combination (1 - alpha) * z_i + alpha * z_j.

    Works on Tensors (recorded on the active graph) and plain arrays.
    """
    alpha = float(alpha)
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    if isinstance(z_i, Tensor) or isinstance(z_j, Tensor):
        if z_i.shape != z_j.shape:
            raise ad.ShapeError("interp-latent", z_i.shape, z_j.shape)
        return ad.add(ad.scalar_mul(z_i, 1.0 - alpha), ad.scalar_mul(z_j, alpha))
    z_i = np.asarray(z_i)
    z_j = np.asarray(z_j)
    if z_i.shape != z_j.shape:
        raise ad.ShapeError("interp-latent", z_i.shape, z_j.shape)
    return (1.0 - alpha) * z_i + alpha * z_j


class CheckpointError(RuntimeError):
    pass


def _all_tensors(ae: Autoencoder, disc: Discriminator):
    arrays = {k: v.data for k, v in ae.params().items()}
    arrays.update(ae.state_arrays())
    if disc is not None:
        arrays.update({k: v.data for k, v in disc.params().items()})
        arrays.update(disc.state_arrays())
    return arrays


def save_checkpoint(path, ae: Autoencoder, disc: Discriminator = None, step: int = 0, seed: int = 0):
    """Write a checkpoint directory: manifest.json + one raw <f4 file per tensor.

    The write is atomic: a temp directory is populated and renamed into place.
    """
    path = os.fspath(path)
    arrays = _all_tensors(ae, disc)
    manifest = {
        "config": asdict(ae.cfg),
        "dtype": "f32",
        "step": int(step),
        "seed": int(seed),
        "has_discriminator": disc is not None,
        "tensors": {name: list(a.shape) for name, a in sorted(arrays.items())},
    }
    parent = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(parent, exist_ok=True)
    tmp = tempfile.mkdtemp(prefix=".ckpt-", dir=parent)
    try:
        with open(os.path.join(tmp, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        for name, arr in arrays.items():
            with open(os.path.join(tmp, name + ".bin"), "wb") as fh:
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        if os.path.exists(path):
            shutil.rmtree(path)
        os.replace(tmp, path)
    except Exception:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def load_checkpoint(path):
    """Load a checkpoint, validating every tensor's shape against the manifest.

    Returns (autoencoder, discriminator_or_None, manifest).
    """
    path = os.fspath(path)
    try:
        with open(os.path.join(path, "manifest.json")) as fh:
            manifest = json.load(fh)
    except FileNotFoundError as exc:
        raise CheckpointError(f"no manifest.json under {path}") from exc

    cfg_dict = dict(manifest["config"])
    cfg_dict["disc_channels"] = tuple(cfg_dict["disc_channels"])
    cfg = ModelConfig(**cfg_dict)
    seed = int(manifest.get("seed", 0))
    ae = build_autoencoder(cfg, seed)
    disc = build_discriminator(cfg, seed) if manifest.get("has_discriminator", True) else None

    targets = _all_tensors(ae, disc)
    for name, shape in manifest["tensors"].items():
        target = targets.get(name)
        if target is None:
            raise CheckpointError(f"unexpected tensor {name!r} in manifest")
        raw = np.fromfile(os.path.join(path, name + ".bin"), dtype="<f4")
        if raw.size != int(np.prod(shape)) or list(target.shape) != list(shape):
            raise CheckpointError(
                f"shape mismatch for {name!r}: manifest {shape}, file {raw.size} values, model {list(target.shape)}"
            )
        target[...] = raw.reshape(shape)
    missing = set(targets) - set(manifest["tensors"])
    if missing:
        raise CheckpointError(f"manifest missing tensors: {sorted(missing)}")
    return ae, disc, manifest
