import math

import numpy as np
import pytest

from pathkernel.datagen import (
    load_dataset,
    make_circle_disk,
    make_diffusion_toy,
    make_ellipse_variant,
    make_regression_1d,
    save_dataset,
    sinusoidal_embedding,
)


def test_circle_constraints():
    ds = make_circle_disk(300, seed=4)
    r2 = (ds.inputs ** 2).sum(1)
    pos = ds.targets[:, 0] == 1
    assert pos.sum() == 300
    assert np.all(np.abs(r2[pos] - 1) <= 1e-12)
    assert np.all(r2[~pos] <= 0.8)


def test_ellipse_constraints():
    ds = make_ellipse_variant(200, seed=1)
    q = 100 * ds.inputs[:, 0] ** 2 + ds.inputs[:, 1] ** 2
    pos = ds.targets[:, 0] == 1
    assert np.all(np.abs(q[pos] - 1) <= 1e-12)
    assert np.all(q[~pos] <= 0.9)


@pytest.mark.parametrize("maker", [make_circle_disk, make_ellipse_variant])
def test_determinism(maker):
    a, b = maker(50, seed=7), maker(50, seed=7)
    assert np.array_equal(a.inputs, b.inputs) and np.array_equal(a.targets, b.targets)
    assert not np.array_equal(a.inputs, maker(50, seed=8).inputs)


def test_regression_kinds():
    lin = make_regression_1d("linear_2x_plus_1", 100)
    assert lin.inputs.max() == 1.98
    np.testing.assert_array_equal(lin.targets[:, 0], 2 * lin.inputs[:, 0] + 1)
    sq = make_regression_1d("square_wave", 101)
    i = np.argmin(np.abs(sq.inputs[:, 0] - 0.05))
    assert sq.inputs[i, 0] == pytest.approx(0.05) and sq.targets[i, 0] == 1.0
    sine = make_regression_1d("sine", 21)
    assert sine.inputs[10, 0] == 0 and sine.targets[10, 0] == 0
    assert sine.inputs[0, 0] == -math.pi


def test_diffusion_toy():
    ds = make_diffusion_toy(16, 10, 8, seed=2)
    emb = ds.inputs[:, 1:]
    assert np.all(np.abs(emb) <= 1)
    x0 = np.array(ds.meta["x0"])
    level0 = ds.labels == 0
    np.testing.assert_array_equal(ds.inputs[level0, 0], x0)
    again = make_diffusion_toy(16, 10, 8, seed=2)
    assert np.array_equal(ds.targets, again.targets)
    with pytest.raises(ValueError):
        sinusoidal_embedding(1.0, 3)


def test_roundtrip(tmp_path):
    for ds in (make_circle_disk(20, seed=1), make_diffusion_toy(4, 3, 4, seed=0), make_regression_1d("sine", 9)):
        save_dataset(ds, tmp_path / ds.name)
        back = load_dataset(tmp_path / ds.name)
        assert np.array_equal(back.inputs, ds.inputs) and np.array_equal(back.targets, ds.targets)
        assert back.name == ds.name and back.seed == ds.seed
