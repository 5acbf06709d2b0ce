"""Training procedure: pair sampling, alpha sampling, loss assembly,
alternating discriminator updates, checkpointing.

Each step draws a batch of ordered endpoint pairs from the train split,
encodes both endpoints, decodes reconstructions for the endpoint loss, and
(when any interpolation term is active) decodes latent interpolants for the
adversarial / cycle / smoothness terms, then applies one Adam update to the
autoencoder. The discriminator trains separately (default: a burst of
``d_steps`` fresh mini-batch updates after every epoch) on real images
versus interpolants decoded with the autoencoder frozen in eval mode, so
neither optimizer ever touches the other's parameters or running statistics.

All randomness flows from ``TrainConfig.seed`` through named substreams
(init, pair sampling, alpha draws, discriminator batches), which makes the
checkpoint bytes a pure function of (seed, config, dataset).
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import losses as L
from . import models as M
from .autodiff import Graph, Tensor
from .dataset import LabeledDataset
from .losses import LossBreakdown, LossWeights
from .nn import Adam

__all__ = [
    "TrainConfig",
    "TrainLog",
    "Trainer",
    "TrainingError",
    "train",
    "discriminator_step",
    "make_interpolants",
    "TRAINLOG_COLUMNS",
]

TRAINLOG_COLUMNS = ("step", "epoch", "l_r", "l_a", "l_c", "l_s", "total", "d_loss")

_ALPHA_MODES = ("stochastic", "full-grid")
_SCHEDULES = ("per-epoch", "per-step")

# Uniform alpha draws avoid the exact endpoints so the forward-difference
# smoothness term never divides by zero.
_ALPHA_MARGIN = 1e-6


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    latent_dim: int = 16
    image_size: int = 32
    M: int = 8
    alpha_mode: str = "stochastic"
    pairs_per_step: int = 16
    learning_rate: float = 1e-3
    epochs: int = 400
    discriminator_update_schedule: str = "per-epoch"
    d_steps: int = 16
    seed: int = 0
    enable_adversarial: bool = True
    enable_cycle: bool = True
    enable_smoothness: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.M < 1 or self.pairs_per_step < 1:
            raise ValueError("epochs, M and pairs_per_step must all be >= 1")
        if self.alpha_mode not in _ALPHA_MODES:
            raise ValueError(f"alpha_mode must be one of {_ALPHA_MODES}, got {self.alpha_mode!r}")
        if self.discriminator_update_schedule not in _SCHEDULES:
            raise ValueError(f"discriminator_update_schedule must be one of {_SCHEDULES}")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["weights"] = dataclasses.asdict(self.weights)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        if "weights" in data and not isinstance(data["weights"], LossWeights):
            data["weights"] = LossWeights(**data["weights"])
        return cls(**data)

    def save_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load_json(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def active_terms(self):
        """(adversarial, cycle, smoothness) activity; a disabled flag and a
        zero weight are interchangeable, producing bit-identical training."""
        return (
            self.enable_adversarial and self.weights.lambda1 > 0,
            self.enable_cycle and self.weights.lambda2 > 0,
            self.enable_smoothness and self.weights.lambda3 > 0,
        )


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    d_losses: list = field(default_factory=list)
    epoch_seconds: list = field(default_factory=list)

    def append_step(self, step, epoch, breakdown: LossBreakdown, d_loss):
        self.rows.append(
            {
                "step": step,
                "epoch": epoch,
                "l_r": breakdown.l_r,
                "l_a": breakdown.l_a,
                "l_c": breakdown.l_c,
                "l_s": breakdown.l_s,
                "total": breakdown.total,
                "d_loss": d_loss,
            }
        )

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write(",".join(TRAINLOG_COLUMNS) + "\n")
            for row in self.rows:
                cells = []
                for col in TRAINLOG_COLUMNS:
                    v = row[col]
                    if v is None:
                        cells.append("")
                    elif col in ("step", "epoch"):
                        cells.append(str(int(v)))
                    else:
                        cells.append(format(float(v), ".8g"))
                fh.write(",".join(cells) + "\n")


def _as_nchw(images: np.ndarray) -> np.ndarray:
    x = np.asarray(images, dtype=np.float32)
    if x.ndim == 3:
        x = x[:, None, :, :]
    return x


def make_interpolants(model: M.Autoencoder, x_i, x_j, alphas) -> np.ndarray:
    """Eval-mode decoded interpolants for per-pair alphas; no state is touched."""
    x_i, x_j = _as_nchw(x_i), _as_nchw(x_j)
    z = model.encode_images(np.concatenate([x_i, x_j], axis=0))
    p = len(x_i)
    a = np.asarray(alphas, dtype=np.float32)[:, None]
    z_mid = (1.0 - a) * z[:p] + a * z[p:]
    return _as_nchw(model.decode_latents(z_mid))


def discriminator_step(disc: M.Discriminator, opt: Adam, real, fake) -> float:
    """One Adam update of D on a real/fake batch; returns the loss value."""
    real, fake = _as_nchw(real), _as_nchw(fake)
    for p in disc.params().values():
        p.grad = None
    with Graph() as g:
        loss = L.loss_discriminator(disc, real, fake, mode="train")
        g.backward(loss)
    opt.step()
    return float(loss.data)


class Trainer:
    """Owns the models, optimizers and RNG substreams for one training run."""

    def __init__(self, config: TrainConfig, model_cfg: M.ModelConfig | None = None):
        self.config = config
        self.model_cfg = model_cfg or M.ModelConfig(image_size=config.image_size, latent_dim=config.latent_dim)
        self.model = M.build_autoencoder(self.model_cfg, config.seed)
        self.disc = M.build_discriminator(self.model_cfg, config.seed)
        self.opt_ae = Adam(self.model.params(), lr=config.learning_rate)
        self.opt_d = Adam(self.disc.params(), lr=config.learning_rate)
        ent = config.seed
        self.rng_pairs = np.random.default_rng(np.random.SeedSequence(entropy=ent, spawn_key=(3,)))
        self.rng_alpha = np.random.default_rng(np.random.SeedSequence(entropy=ent, spawn_key=(4,)))
        self.rng_disc = np.random.default_rng(np.random.SeedSequence(entropy=ent, spawn_key=(5,)))
        self.step_count = 0

    # -- generator side -----------------------------------------------------

    def _interpolant_blocks(self, z_all: Tensor, p: int):
        """Latent grid blocks (alpha-major) plus per-segment 1/delta-alpha."""
        z_i = ad.narrow(z_all, 0, p)
        z_j = ad.narrow(z_all, p, 2 * p)
        if self.config.alpha_mode == "stochastic":
            u = self.rng_alpha.uniform(_ALPHA_MARGIN, 1.0 - _ALPHA_MARGIN, size=p).astype(np.float32)
            z_mid = ad.add(ad.const_mul(z_i, (1.0 - u)[:, None]), ad.const_mul(z_j, u[:, None]))
            blocks = [z_i, z_mid, z_j]
            inv_deltas = [1.0 / u, 1.0 / (1.0 - u)]
        else:
            m = self.config.M
            blocks = [z_i]
            for n in range(1, m):
                blocks.append(M.interp_latent(z_i, z_j, n / m))
            blocks.append(z_j)
            inv_deltas = [np.full(p, float(m), dtype=np.float32) for _ in range(m)]
        return blocks, inv_deltas

    def train_step(self, x_i, x_j) -> LossBreakdown:
        """One Adam update of the autoencoder on a batch of endpoint pairs.

        The discriminator is scored frozen in eval mode, so neither its
        parameters nor its running statistics change here.
        """
        cfg = self.config
        adv, cyc, smo = cfg.active_terms()
        x_i, x_j = _as_nchw(x_i), _as_nchw(x_j)
        p = x_i.shape[0]

        for t in self.model.params().values():
            t.grad = None

        with Graph() as g:
            x_all = Tensor(np.concatenate([x_i, x_j], axis=0))
            z_all = self.model.encode(x_all, "train")
            xhat_all = self.model.decode(z_all, "train")
            l_r = L.loss_reconstruction(
                Tensor(x_i), Tensor(x_j), ad.narrow(xhat_all, 0, p), ad.narrow(xhat_all, p, 2 * p)
            )

            l_a = l_c = l_s = None
            if adv or cyc or smo:
                blocks, inv_deltas = self._interpolant_blocks(z_all, p)
                z_pts = ad.concat(blocks)
                xhat_pts = self.model.decode(z_pts, "train")
                if adv:
                    l_a = L.loss_adversarial_gen(self.disc, xhat_pts, num_pairs=p)
                if cyc:
                    z_cycled = self.model.encode(xhat_pts, "train")
                    l_c = L.loss_cycle(z_pts.data.copy(), z_cycled, num_pairs=p)
                if smo:
                    l_s = L.loss_smoothness_irregular(xhat_pts, inv_deltas, num_pairs=p)

            total, breakdown = L.loss_total(l_r, l_a, l_c, l_s, cfg.weights)
            for name, value in (("l_r", breakdown.l_r), ("l_a", breakdown.l_a),
                                ("l_c", breakdown.l_c), ("l_s", breakdown.l_s)):
                if not math.isfinite(value):
                    raise TrainingError(f"non-finite loss term {name} at step {self.step_count}")
            g.backward(total)

        self.opt_ae.step()
        self.step_count += 1
        return breakdown

    # -- discriminator side --------------------------------------------------

    def update_discriminator(self, train_images: np.ndarray) -> float:
        """A burst of d_steps updates of D on fresh mini-batches.

        Interpolants are generated with the autoencoder frozen in eval mode;
        autoencoder parameters and running stats are bit-identical before
        and after the call.
        """
        cfg = self.config
        n = len(train_images)
        p = min(cfg.pairs_per_step, n)
        losses = []
        for _ in range(cfg.d_steps):
            ridx = self.rng_disc.integers(0, n, size=p)
            ii = self.rng_disc.integers(0, n, size=p)
            jj = self.rng_disc.integers(0, n - 1, size=p)
            jj = np.where(jj >= ii, jj + 1, jj)
            alphas = self.rng_disc.uniform(0.0, 1.0, size=p).astype(np.float32)
            fakes = make_interpolants(self.model, train_images[ii], train_images[jj], alphas)
            losses.append(discriminator_step(self.disc, self.opt_d, train_images[ridx], fakes))
            if not math.isfinite(losses[-1]):
                raise TrainingError("non-finite discriminator loss")
        return float(np.mean(losses))

    # -- epoch orchestration ---------------------------------------------------

    def _epoch_pair_positions(self, n_train: int, steps: int):
        """Endpoint-i positions cover a reshuffled pass; j uniform over others."""
        need = steps * self.config.pairs_per_step
        reps = -(-need // n_train)
        i_pos = np.concatenate([self.rng_pairs.permutation(n_train) for _ in range(reps)])[:need]
        j_pos = self.rng_pairs.integers(0, n_train - 1, size=need)
        j_pos = np.where(j_pos >= i_pos, j_pos + 1, j_pos)
        return i_pos, j_pos


def train(dataset: LabeledDataset, config: TrainConfig, out_dir) -> tuple[str, TrainLog]:
    """Full training run; writes checkpoint/ and trainlog.csv under out_dir."""
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    train_idx = dataset.train_indices()
    if len(train_idx) < 2:
        raise TrainingError(f"need at least 2 training items, got {len(train_idx)}")
    train_images = dataset.images[train_idx]

    trainer = Trainer(config)
    cfg = config
    adv_active = cfg.active_terms()[0]
    n_train = len(train_idx)
    steps_per_epoch = -(-n_train // cfg.pairs_per_step)
    log = TrainLog()
    last_d_loss = None

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        i_pos, j_pos = trainer._epoch_pair_positions(n_train, steps_per_epoch)
        p = cfg.pairs_per_step
        for s in range(steps_per_epoch):
            sl = slice(s * p, (s + 1) * p)
            breakdown = trainer.train_step(train_images[i_pos[sl]], train_images[j_pos[sl]])
            log.append_step(trainer.step_count, epoch, breakdown, last_d_loss)
            if adv_active and cfg.discriminator_update_schedule == "per-step":
                last_d_loss = trainer.update_discriminator(train_images)
                log.d_losses.append((epoch, last_d_loss))
        if adv_active and cfg.discriminator_update_schedule == "per-epoch":
            last_d_loss = trainer.update_discriminator(train_images)
            log.d_losses.append((epoch, last_d_loss))
        log.epoch_seconds.append(time.perf_counter() - t0)

    ckpt_path = os.path.join(out_dir, "checkpoint")
    M.save_checkpoint(ckpt_path, trainer.model, trainer.disc, step=trainer.step_count, seed=cfg.seed)
    log.write_csv(os.path.join(out_dir, "trainlog.csv"))
    cfg.save_json(os.path.join(out_dir, "config.json"))
    return ckpt_path, log
