import dataclasses

import numpy as np
import pytest

from deepz import autodiff as ad
from deepz.datapipe import Dataset, NormalizationRecord
from deepz.errors import TrainingDivergedError
from deepz.network import (
    DiscriminatorConfig,
    GeneratorConfig,
    discriminator_forward,
    generator_forward,
    init_discriminator,
    init_generator,
)
from deepz.optim import AdamState, adam_step, grad
from deepz.trainer import TrainConfig, discriminator_loss, generator_loss, train, validation_mae

from conftest import identity_dataset


def toy_dataset(n_regions=4, pairs_per_region=6, tile=64, seed=0):
    gen = np.random.default_rng(seed)
    n = n_regions * pairs_per_region
    inputs = gen.random((n, tile, tile)).astype(np.float32) * 0.3
    targets = inputs * 0.8 + 0.05
    return Dataset(
        inputs=inputs,
        targets=targets,
        distance_um=np.zeros(n, dtype=np.float32),
        region_id=np.repeat(np.arange(n_regions, dtype=np.int32), pairs_per_region),
        normalization=NormalizationRecord(0.0, 1.0),
    )


class TestLossFormulas:
    def test_perfect_generator_zero_loss(self):
        z = ad.Tensor(np.random.default_rng(0).random((3, 1, 8, 8)))
        scores = ad.Tensor(np.ones((3, 1)))
        loss = generator_loss(scores, z, z, alpha=0.02)
        assert loss.item() == 0.0

    def test_alpha_zero_is_pure_adversarial(self):
        gen = np.random.default_rng(1)
        scores = ad.Tensor(gen.random((4, 1)))
        fake = ad.Tensor(gen.random((4, 1, 8, 8)))
        target = ad.Tensor(gen.random((4, 1, 8, 8)))
        loss = generator_loss(scores, fake, target, alpha=0.0)
        expected = 0.5 * np.mean((scores.data - 1.0) ** 2)
        assert loss.item() == pytest.approx(expected, rel=1e-12)

    def test_constant_half_discriminator(self):
        scores = ad.Tensor(np.full((5, 1), 0.5))
        loss = discriminator_loss(scores, scores)
        assert loss.item() == pytest.approx(0.25)

    def test_ideal_discriminator_zero_loss(self):
        fake = ad.Tensor(np.zeros((4, 1)))
        real = ad.Tensor(np.ones((4, 1)))
        assert discriminator_loss(fake, real).item() == 0.0

    def test_losses_match_plain_numpy_reevaluation(self):
        gen_cfg = GeneratorConfig(channel_scale=0.05)
        disc_cfg = DiscriminatorConfig(channel_scale=0.05)
        params_g = init_generator(gen_cfg, seed=0)
        params_d = init_discriminator(disc_cfg, seed=1)
        rng = np.random.default_rng(2)
        x = ad.Tensor(rng.random((2, 2, 64, 64)).astype(np.float32))
        z = ad.Tensor(rng.random((2, 1, 64, 64)).astype(np.float32))
        alpha = 0.7

        fake = generator_forward(params_g, x, gen_cfg)
        s_fake = discriminator_forward(params_d, fake, disc_cfg)
        s_real = discriminator_forward(params_d, z, disc_cfg)
        lg = generator_loss(s_fake, fake, z, alpha).item()
        ld = discriminator_loss(s_fake, s_real).item()

        # independent straightforward re-evaluation from the raw arrays
        sf = s_fake.data.astype(np.float64)
        sr = s_real.data.astype(np.float64)
        g = fake.data.astype(np.float64)
        zz = z.data.astype(np.float64)
        n = sf.shape[0]
        lg_direct = (1 / (2 * n)) * np.sum((sf - 1) ** 2) + alpha * (1 / (2 * n)) * np.sum(
            [np.abs(g[i] - zz[i]).mean() for i in range(n)]
        )
        ld_direct = (1 / (2 * n)) * np.sum(sf**2) + (1 / (2 * n)) * np.sum((sr - 1) ** 2)
        assert lg == pytest.approx(lg_direct, abs=1e-6)
        assert ld == pytest.approx(ld_direct, abs=1e-6)

    def test_losses_nonnegative(self):
        gen = np.random.default_rng(3)
        for _ in range(5):
            s1 = ad.Tensor(gen.random((3, 1)))
            s2 = ad.Tensor(gen.random((3, 1)))
            a = ad.Tensor(gen.normal(size=(3, 1, 4, 4)))
            b = ad.Tensor(gen.normal(size=(3, 1, 4, 4)))
            assert generator_loss(s1, a, b, alpha=0.5).item() >= 0
            assert discriminator_loss(s1, s2).item() >= 0


class TestUpdateIsolation:
    def test_g_step_leaves_d_bitwise_unchanged(self):
        gen_cfg = GeneratorConfig(channel_scale=0.05)
        disc_cfg = DiscriminatorConfig(channel_scale=0.05)
        params_g = init_generator(gen_cfg, seed=4)
        params_d = init_discriminator(disc_cfg, seed=5)
        adam_g = AdamState.for_params(params_g, lr=1e-4)
        adam_d = AdamState.for_params(params_d, lr=3e-5)
        rng = np.random.default_rng(6)
        x = ad.Tensor(rng.random((2, 2, 64, 64)).astype(np.float32))
        z = ad.Tensor(rng.random((2, 1, 64, 64)).astype(np.float32))

        d_before = {k: t.data.copy() for k, t in params_d.items()}
        params_d.set_trainable(False)
        fake = generator_forward(params_g, x, gen_cfg)
        loss = generator_loss(discriminator_forward(params_d, fake, disc_cfg), fake, z, 0.02)
        adam_step(params_g, grad(loss, params_g), adam_g)
        params_d.set_trainable(True)
        for k in d_before:
            assert np.array_equal(params_d[k].data, d_before[k])

        g_before = {k: t.data.copy() for k, t in params_g.items()}
        params_g.set_trainable(False)
        fake = generator_forward(params_g, x, gen_cfg).detach()
        loss = discriminator_loss(
            discriminator_forward(params_d, fake, disc_cfg),
            discriminator_forward(params_d, z, disc_cfg),
        )
        adam_step(params_d, grad(loss, params_d), adam_d)
        params_g.set_trainable(True)
        for k in g_before:
            assert np.array_equal(params_g[k].data, g_before[k])


class TestTrainLoop:
    def quick_config(self, **kwargs):
        base = dict(alpha=10.0, lr_g=3e-4, lr_d=3e-5, batch=2, iterations=10, val_every=5,
                    channel_scale=0.05, seed=3)
        base.update(kwargs)
        return TrainConfig(**base)

    def test_report_and_artifacts(self, tmp_path):
        report, best = train(toy_dataset(), tmp_path / "run", self.quick_config())
        assert best.exists()
        assert (tmp_path / "run" / "report.csv").exists()
        assert (tmp_path / "run" / "train_config.json").exists()
        assert (tmp_path / "run" / "last.dzck").exists()
        assert len(report.loss_g) == 10
        assert report.best_iteration in [i for i, _ in report.val_series]

    def test_best_checkpoint_is_min_val(self, tmp_path):
        report, _ = train(toy_dataset(), tmp_path / "run", self.quick_config(iterations=15))
        maes = [m for _, m in report.val_series]
        assert report.best_val_mae == pytest.approx(min(maes))
        assert all(report.best_val_mae <= m for m in maes)

    def test_seed_determinism(self, tmp_path):
        ds = toy_dataset()
        r1, best1 = train(ds, tmp_path / "a", self.quick_config())
        r2, best2 = train(ds, tmp_path / "b", self.quick_config())
        assert r1.val_series == r2.val_series
        assert r1.loss_g == r2.loss_g
        assert best1.read_bytes() == best2.read_bytes()

    def test_divergence_aborts_keeping_checkpoint(self, tmp_path):
        cfg = self.quick_config(alpha=1e12, lr_g=1e-1)
        with pytest.raises(TrainingDivergedError):
            train(toy_dataset(), tmp_path / "run", cfg)
        assert (tmp_path / "run" / "best.dzck").exists()
        assert (tmp_path / "run" / "report.csv").exists()

    def test_alpha_dominated_training_halves_val_mae(self, tmp_path):
        ds = toy_dataset(n_regions=5, pairs_per_region=2)  # 10 pairs
        cfg = self.quick_config(alpha=10.0, iterations=60, val_every=10, batch=2)
        gen_cfg = GeneratorConfig(channel_scale=cfg.channel_scale)
        baseline = validation_mae(init_generator(gen_cfg, cfg.seed), gen_cfg, ds,
                                  ds.split_by_region(val_frac=cfg.val_frac, seed=cfg.seed)[1])
        report, _ = train(ds, tmp_path / "run", cfg)
        assert report.best_val_mae <= 0.5 * baseline


class TestIdentityTask:
    def test_identity_training_reaches_identity(self, identity_run):
        from deepz import dpm as dpm_mod
        from deepz.infer import RefocusModel, refocus

        best, ds, (train_idx, val_idx) = identity_run
        model = RefocusModel.load(best)
        medians = []
        for i in val_idx[:12]:
            out = refocus(model, ds.inputs[i], dpm_mod.uniform(ds.tile, ds.tile, 0.0))
            medians.append(np.median(np.abs(out.image - ds.inputs[i])))
        assert float(np.median(medians)) < 0.02
