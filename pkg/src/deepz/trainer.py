"""LS-GAN training loop with L1 fidelity regularization.

Per iteration: six Adam updates of the generator loss followed by three
of the discriminator loss, each on a freshly drawn batch; the other
network stays frozen during each update. The validation set (split from
the training set by region) is scored every ``val_every`` iterations with
the generator alone, and the checkpoint with the smallest validation MAE
is kept as the final model.

Losses (squared-error GAN objectives, per-batch means):
    L_G = 1/2 mean[(D(G(x)) - 1)^2] + alpha * 1/2 mean[MAE(G(x), z)]
    L_D = 1/2 mean[D(G(x))^2] + 1/2 mean[(D(z) - 1)^2]
The fidelity term compares the generator output against the target; a
regularizer that ignored the generator entirely could not train it.
"""

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .datapipe import Dataset, _dihedral
from .errors import TrainingDivergedError
from . import rng as rng_mod
from .network import (
    DiscriminatorConfig,
    GeneratorConfig,
    discriminator_forward,
    generator_forward,
    init_discriminator,
    init_generator,
    save_model,
)
from .optim import AdamState, adam_step, grad

DIVERGENCE_LIMIT = 1e6


@dataclass
class TrainConfig:
    alpha: float = 0.02
    lr_g: float = 1e-4
    lr_d: float = 3e-5
    batch: int = 4  # paper-scale runs use 20
    g_updates: int = 6
    d_updates: int = 3
    val_every: int = 50
    iterations: int = 1000
    seed: int = 0
    channel_scale: float = 0.25
    augment: bool = True
    val_frac: float = 0.15
    val_batch: int = 8

    def __post_init__(self):
        if min(self.alpha, 0.0) < 0 or self.lr_g <= 0 or self.lr_d <= 0:
            raise ValueError("alpha must be >= 0 and learning rates positive")
        if min(self.batch, self.g_updates, self.d_updates, self.val_every, self.iterations) <= 0:
            raise ValueError("batch, update counts, val_every and iterations must be positive")


@dataclass
class TrainReport:
    loss_g: list = field(default_factory=list)  # one mean per iteration
    loss_d: list = field(default_factory=list)
    val_series: list = field(default_factory=list)  # (iteration, mae)
    best_iteration: int = -1
    best_val_mae: float = float("inf")
    wall_time_s: float = 0.0
    aborted: str | None = None

    def write_csv(self, path):
        val_at = dict(self.val_series)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "loss_g", "loss_d", "val_mae"])
            for i, (lg, ld) in enumerate(zip(self.loss_g, self.loss_d), start=1):
                writer.writerow([i, f"{lg:.6e}", f"{ld:.6e}", f"{val_at[i]:.6e}" if i in val_at else ""])


def generator_loss(d_scores_fake, fake, target, alpha: float):
    """L_G from already-computed tensors (adversarial + alpha * fidelity)."""
    adv = ad.mul_scalar(ad.mean_square(ad.add_scalar(d_scores_fake, -1.0)), 0.5)
    fid = ad.mul_scalar(ad.mean_abs(ad.sub(fake, target)), 0.5 * alpha)
    return ad.add(adv, fid)


def discriminator_loss(d_scores_fake, d_scores_real):
    """L_D from already-computed scores."""
    fake_term = ad.mul_scalar(ad.mean_square(d_scores_fake), 0.5)
    real_term = ad.mul_scalar(ad.mean_square(ad.add_scalar(d_scores_real, -1.0)), 0.5)
    return ad.add(fake_term, real_term)


def _batch_tensors(dataset: Dataset, indices, gen, augment: bool):
    """Assemble (B, 2, H, W) inputs (image + DPM channel) and (B, 1, H, W) targets."""
    h, w = dataset.inputs.shape[1:]
    n = len(indices)
    x = np.empty((n, 2, h, w), dtype=np.float32)
    z = np.empty((n, 1, h, w), dtype=np.float32)
    for row, i in enumerate(indices):
        pair = dataset.pair(int(i))
        op = int(gen.integers(0, 8)) if augment else 0
        x[row, 0] = _dihedral(pair.input_plane, op)
        x[row, 1] = _dihedral(pair.dpm, op)
        z[row, 0] = _dihedral(pair.target_plane, op)
    return ad.Tensor(x), ad.Tensor(z)


def validation_mae(params_g, gen_cfg, dataset: Dataset, indices, batch: int = 8) -> float:
    """Mean absolute error of the generator over a set of pairs."""
    params_g.set_trainable(False)
    try:
        total = 0.0
        count = 0
        for start in range(0, len(indices), batch):
            sel = indices[start : start + batch]
            x, z = _batch_tensors(dataset, sel, gen=None, augment=False)
            out = generator_forward(params_g, x, gen_cfg)
            total += float(np.abs(out.data - z.data).mean()) * len(sel)
            count += len(sel)
        return total / max(count, 1)
    finally:
        params_g.set_trainable(True)


def train(dataset: Dataset, out_dir, config: TrainConfig,
          gen_cfg: GeneratorConfig | None = None,
          disc_cfg: DiscriminatorConfig | None = None):
    """Run the full loop; returns (TrainReport, path to best checkpoint).

    Writes best.dzck/.json, last.dzck/.json, report.csv and a config echo
    into out_dir. On divergence the last good checkpoint is kept and
    TrainingDivergedError is raised after writing artifacts.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    gen_cfg = gen_cfg or GeneratorConfig(channel_scale=config.channel_scale)
    disc_cfg = disc_cfg or DiscriminatorConfig(channel_scale=config.channel_scale)
    (out_dir / "train_config.json").write_text(json.dumps(asdict(config), indent=2) + "\n")

    params_g = init_generator(gen_cfg, config.seed)
    params_d = init_discriminator(disc_cfg, config.seed + 1)
    adam_g = AdamState.for_params(params_g, lr=config.lr_g)
    adam_d = AdamState.for_params(params_d, lr=config.lr_d)

    train_idx, val_idx = dataset.split_by_region(val_frac=config.val_frac, seed=config.seed)
    if len(train_idx) == 0:
        raise ValueError("empty training split")
    if len(val_idx) == 0:
        val_idx = train_idx  # single-region desk runs validate on train data

    report = TrainReport()
    best_params = params_g.copy()
    best_path = out_dir / "best.dzck"
    started = time.time()

    def fail(reason):
        report.aborted = reason
        report.wall_time_s = time.time() - started
        save_model(best_path, best_params, gen_cfg)
        save_model(out_dir / "last.dzck", params_g, gen_cfg)
        report.write_csv(out_dir / "report.csv")
        raise TrainingDivergedError(reason)

    for it in range(1, config.iterations + 1):
        gen = rng_mod.stream(config.seed, "iter", it)
        g_losses = []
        d_losses = []

        params_d.set_trainable(False)
        for _ in range(config.g_updates):
            idx = gen.choice(train_idx, size=min(config.batch, len(train_idx)), replace=False)
            x, z = _batch_tensors(dataset, idx, gen, config.augment)
            fake = generator_forward(params_g, x, gen_cfg)
            scores = discriminator_forward(params_d, fake, disc_cfg)
            loss = generator_loss(scores, fake, z, config.alpha)
            value = loss.item()
            if not np.isfinite(value) or value > DIVERGENCE_LIMIT:
                fail(f"generator loss diverged at iteration {it}: {value}")
            adam_step(params_g, grad(loss, params_g), adam_g)
            g_losses.append(value)
        params_d.set_trainable(True)

        params_g.set_trainable(False)
        for _ in range(config.d_updates):
            idx = gen.choice(train_idx, size=min(config.batch, len(train_idx)), replace=False)
            x, z = _batch_tensors(dataset, idx, gen, config.augment)
            fake = generator_forward(params_g, x, gen_cfg).detach()
            scores_fake = discriminator_forward(params_d, fake, disc_cfg)
            scores_real = discriminator_forward(params_d, z, disc_cfg)
            loss = discriminator_loss(scores_fake, scores_real)
            value = loss.item()
            if not np.isfinite(value) or value > DIVERGENCE_LIMIT:
                fail(f"discriminator loss diverged at iteration {it}: {value}")
            adam_step(params_d, grad(loss, params_d), adam_d)
            d_losses.append(value)
        params_g.set_trainable(True)

        report.loss_g.append(float(np.mean(g_losses)))
        report.loss_d.append(float(np.mean(d_losses)))

        if it % config.val_every == 0 or it == config.iterations:
            mae = validation_mae(params_g, gen_cfg, dataset, val_idx, batch=config.val_batch)
            report.val_series.append((it, mae))
            if mae < report.best_val_mae:
                report.best_val_mae = mae
                report.best_iteration = it
                best_params = params_g.copy()
                best_params.version = it
                save_model(best_path, best_params, gen_cfg)

    report.wall_time_s = time.time() - started
    save_model(out_dir / "last.dzck", params_g, gen_cfg)
    report.write_csv(out_dir / "report.csv")
    return report, best_path
