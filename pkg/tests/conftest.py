import dataclasses

import numpy as np
import pytest

from deepz import datapipe, optics
from deepz.trainer import TrainConfig, train


def identity_dataset(seed=11):
    """Zero-distance pairs only: every input is its own target."""
    grid = optics.GridSpec(128, 128, 0.325)
    sample = optics.random_sample(10, extent_um=grid.extent_um, z_range_um=(-1.0, 1.0),
                                  seed=seed, min_separation_um=4.0)
    stack = optics.render_stack(sample, optics.PsfModel(), (-3.0, 3.0), 0.5, grid)
    ds = datapipe.build_dataset(stack, tile=64, targets_per_input=13, range_planes=6, seed=seed)
    keep = ds.distance_um == 0.0
    return dataclasses.replace(
        ds,
        inputs=ds.inputs[keep],
        targets=ds.targets[keep],
        distance_um=ds.distance_um[keep],
        region_id=ds.region_id[keep],
    )


@pytest.fixture(scope="session")
def identity_run(tmp_path_factory):
    """A small model trained on the identity task, shared across test files.

    Returns (checkpoint path, dataset, (train_idx, val_idx)).
    """
    ds = identity_dataset()
    out = tmp_path_factory.mktemp("identity_run")
    cfg = TrainConfig(alpha=50.0, lr_g=3e-4, lr_d=3e-5, batch=3, iterations=120,
                      val_every=20, channel_scale=0.1, seed=1)
    report, best = train(ds, out, cfg)
    assert report.best_val_mae < 0.02, "identity fixture failed to converge"
    return best, ds, ds.split_by_region(val_frac=0.15, seed=1)
