"""Adversarial training loop: n_dis critic updates per generator update,
Adam with (beta1, beta2) = (0, 0.9) by default, linear step-size decay, and
checkpoint/metric/sample artifacts.

The discriminator is free of batch statistics, so real and fake batches run
through it as one concatenated forward pass; the per-side logit gradients
from the loss seed a single backward pass.
"""

import os
import time
from dataclasses import dataclass

import numpy as np

from . import checkpoint as ckpt
from .data import BatchIterator, from_model_range, save_image_grid, to_model_range
from .losses import GAN_LOSSES
from .models import Discriminator, Generator
from .optim import Adam, linear_decay_lr

LOG_HEADER = "iter,d_loss,g_loss,lr_g,lr_d,wall_time"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    loss: str = "hinge"
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    adam_beta1: float = 0.0
    adam_beta2: float = 0.9
    n_dis: int = 1
    batch_d: int = 64
    batch_g: int = 128
    total_iters: int = 1000
    decay_last_iters: int = 0
    seed: int = 0
    log_every: int = 100
    checkpoint_every: int = 0   # 0 keeps only the final snapshot
    sample_every: int = 0

    def validate(self):
        problems = []
        if self.loss not in GAN_LOSSES:
            problems.append("loss must be one of %s" % sorted(GAN_LOSSES))
        if self.n_dis < 1:
            problems.append("n_dis must be >= 1")
        if self.batch_d < 1 or self.batch_g < 1:
            problems.append("batch sizes must be >= 1")
        if self.total_iters < 1:
            problems.append("total_iters must be >= 1")
        if not 0 <= self.decay_last_iters <= self.total_iters:
            problems.append("decay_last_iters must lie in [0, total_iters]")
        if problems:
            raise ValueError("; ".join(problems))


def _require_finite(value, what, iteration):
    if not np.isfinite(value):
        raise TrainingDiverged("non-finite %s (%r) at iteration %d"
                               % (what, value, iteration))


class Trainer:
    """Owns models, optimizers, and the three RNG streams (init, data, z).

    Seeding is hierarchical: cfg.seed spawns independent child sequences so
    the weight init, data order, and latent draws never share a stream. The
    fixed sample grid latents come from a fourth child and are drawn once,
    so sampling cadence cannot perturb the training trajectory.
    """

    def __init__(self, dataset, gen_spec, disc_spec, cfg):
        cfg.validate()
        if gen_spec.num_classes and dataset.num_classes != gen_spec.num_classes:
            raise ValueError("model expects %d classes, dataset has %d"
                             % (gen_spec.num_classes, dataset.num_classes))
        self.cfg = cfg
        self.dataset = dataset
        seeds = np.random.SeedSequence(cfg.seed).spawn(5)
        self.gen = Generator(gen_spec, np.random.default_rng(seeds[0]))
        self.disc = Discriminator(disc_spec, np.random.default_rng(seeds[1]))
        self.data = BatchIterator(dataset, cfg.batch_d,
                                  rng=np.random.default_rng(seeds[2]))
        self.z_rng = np.random.default_rng(seeds[3])
        fixed_rng = np.random.default_rng(seeds[4])
        self.fixed_z = self._draw_z(64, fixed_rng)
        self.fixed_cond = (fixed_rng.integers(0, gen_spec.num_classes, 64)
                           if self.gen.conditional else None)
        self.opt_g = Adam(self.gen.named_parameters(), cfg.lr_g,
                          cfg.adam_beta1, cfg.adam_beta2)
        self.opt_d = Adam(self.disc.named_parameters(), cfg.lr_d,
                          cfg.adam_beta1, cfg.adam_beta2)
        self.d_loss_fn, self.g_loss_fn = GAN_LOSSES[cfg.loss]
        self.iteration = 0
        self.log_rows = []
        self._t0 = time.perf_counter()

    def _draw_z(self, n, rng=None):
        rng = self.z_rng if rng is None else rng
        z = rng.standard_normal((n, self.gen.spec.z_dim))
        return z.astype(self.gen.spec.dtype)

    def _draw_cond(self, n):
        if not self.gen.conditional:
            return None
        return self.z_rng.integers(0, self.gen.spec.num_classes, n)

    def step(self):
        """One generator cycle: n_dis discriminator updates on distinct
        mini-batches, then a single generator update on a fresh z batch."""
        cfg = self.cfg
        it = self.iteration
        lr_g = linear_decay_lr(cfg.lr_g, it, cfg.total_iters, cfg.decay_last_iters)
        lr_d = linear_decay_lr(cfg.lr_d, it, cfg.total_iters, cfg.decay_last_iters)

        d_loss = 0.0
        for _ in range(cfg.n_dis):
            real_u8, real_cond = next(self.data)
            real = to_model_range(real_u8)
            z = self._draw_z(cfg.batch_d)
            fake_cond = real_cond if self.gen.conditional else None
            fake = self.gen.forward(z, cond=fake_cond, train=True)
            both = np.concatenate([real, fake])
            cond = (np.concatenate([real_cond, fake_cond])
                    if self.gen.conditional else None)
            self.disc.zero_grad()
            logits = self.disc.forward(both, cond=cond, train=True)
            loss, dreal, dfake = self.d_loss_fn(logits[:cfg.batch_d],
                                                logits[cfg.batch_d:])
            self.disc.backward(np.concatenate([dreal, dfake]))
            self.opt_d.step(lr=lr_d)
            d_loss = loss
        _require_finite(d_loss, "discriminator loss", it)

        z = self._draw_z(cfg.batch_g)
        cond = self._draw_cond(cfg.batch_g)
        self.gen.zero_grad()
        fake = self.gen.forward(z, cond=cond, train=True)
        logits = self.disc.forward(fake, cond=cond, train=True)
        g_loss, dlogit = self.g_loss_fn(logits)
        _require_finite(g_loss, "generator loss", it)
        dimg = self.disc.backward(dlogit)
        self.gen.backward(dimg)
        self.opt_g.step(lr=lr_g)

        self.iteration += 1
        return {"iter": self.iteration, "d_loss": d_loss, "g_loss": g_loss,
                "lr_g": lr_g, "lr_d": lr_d,
                "wall_time": time.perf_counter() - self._t0}

    def sample_grid(self, path):
        img = self.gen.forward(self.fixed_z, cond=self.fixed_cond, train=False)
        save_image_grid(from_model_range(img), path, cols=8)

    def save(self, path):
        it_state = self.data.state()
        ckpt.save_checkpoint(path, self.gen, self.disc, self.opt_g, self.opt_d,
                             {"data": self.data.rng, "z": self.z_rng},
                             self.iteration,
                             extra={"data_order": it_state["order"],
                                    "data_pos": it_state["pos"]})

    def load(self, path):
        flat = ckpt.load_checkpoint(path)
        self.iteration, rngs, extra = ckpt.restore_checkpoint(
            flat, self.gen, self.disc, self.opt_g, self.opt_d)
        self.data.rng = rngs["data"]
        self.data.load_state({"order": extra["data_order"],
                              "pos": extra["data_pos"]})
        self.z_rng = rngs["z"]

    def run(self, out_dir=None, resume=None):
        """Train to cfg.total_iters, appending metric rows every log_every
        steps and writing checkpoints/sample grids at their cadences."""
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
        if resume:
            self.load(resume)
        cfg = self.cfg
        while self.iteration < cfg.total_iters:
            row = self.step()
            it = self.iteration
            if it % cfg.log_every == 0 or it == cfg.total_iters:
                self.log_rows.append(row)
            if out_dir:
                # the final snapshot is always kept so a run can be evaluated
                if (cfg.checkpoint_every and it % cfg.checkpoint_every == 0) \
                        or it == cfg.total_iters:
                    self.save(os.path.join(out_dir, "ckpt_%06d.npz" % it))
                if cfg.sample_every and it % cfg.sample_every == 0:
                    self.sample_grid(os.path.join(out_dir, "samples_%06d.png" % it))
        if out_dir:
            write_metric_log(os.path.join(out_dir, "metrics.csv"), self.log_rows)
        return self.log_rows


def format_log_rows(rows):
    lines = [LOG_HEADER]
    for r in rows:
        lines.append("%d,%.10g,%.10g,%.10g,%.10g,%.3f"
                     % (r["iter"], r["d_loss"], r["g_loss"],
                        r["lr_g"], r["lr_d"], r["wall_time"]))
    return "\n".join(lines) + "\n"


def write_metric_log(path, rows):
    with open(path, "w") as fh:
        fh.write(format_log_rows(rows))


def logs_match(text_a, text_b):
    """Field-wise equality of two metric logs ignoring the wall_time column,
    which measures the machine rather than the run."""
    la, lb = text_a.strip().splitlines(), text_b.strip().splitlines()
    if len(la) != len(lb):
        return False
    for a, b in zip(la, lb):
        if a.split(",")[:5] != b.split(",")[:5]:
            return False
    return True
