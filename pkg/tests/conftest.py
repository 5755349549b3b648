"""Shared helpers: seeded random networks and small datasets."""

import numpy as np
import pytest

from graftcert import AffineLayer, GraftPlan, Network, apply_graft, make_mlp


def random_net(
    seed: int,
    widths=None,
    weight_scale: float = 0.8,
    bias_scale: float = 0.3,
    graft_fraction: float = 0.0,
) -> Network:
    """A random dense net with non-zero biases and optionally some neurons
    pre-grafted with random lines."""
    rng = np.random.default_rng(seed)
    if widths is None:
        widths = [int(rng.integers(2, 5))]
        for _ in range(int(rng.integers(1, 4))):
            widths.append(int(rng.integers(2, 8)))
        widths.append(int(rng.integers(2, 4)))
    net = make_mlp(widths, seed=seed, weight_scale=weight_scale)
    for layer in net.layers:
        layer.bias += rng.normal(0.0, bias_scale, layer.bias.shape)
    if graft_fraction > 0.0:
        n = net.num_hidden
        count = max(1, int(graft_fraction * n))
        ids = rng.permutation(n)[:count]
        plan = GraftPlan(
            tuple(int(i) for i in ids),
            ((count / n, 0.0),),
            float(rng.uniform(-0.5, 1.0)),
            float(rng.uniform(-0.5, 0.5)),
        )
        net = apply_graft(net, plan)
    return net


def manual_layer(weight, bias) -> AffineLayer:
    return AffineLayer(np.asarray(weight, dtype=float), np.asarray(bias, dtype=float))


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240817)
