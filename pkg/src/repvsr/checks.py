"""Seeded finite-difference checks for every differentiable op.

Each check projects the op output onto a fixed random tensor to get a scalar
loss, then compares the analytic backward against central differences in
float64.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .autograd import GradTape, GradcheckReport, gradcheck
from .network import NetConfig, forward_frame, init_params
from .trainer import l2_loss

TOLERANCE = 1e-4
RELU_KINK = 1e-6
STEP = 1e-5


def _projected(forward, backward, inputs, seed, masks=None):
    rng = np.random.default_rng(seed + 1)
    probe = rng.standard_normal(forward(inputs).shape)
    return gradcheck(lambda a: float(np.sum(forward(a) * probe)),
                     lambda a: backward(a, probe), inputs, TOLERANCE, masks=masks)


def check_conv2d(seed: int = 0, k: int = 3, pad: int = 1) -> GradcheckReport:
    rng = np.random.default_rng(seed)
    inputs = {"x": rng.standard_normal((2, 3, 5, 6)),
              "weight": rng.standard_normal((4, 3, k, k)),
              "bias": rng.standard_normal(4)}

    def params(a):
        return T.ConvParams(a["weight"], a["bias"], pad)

    def backward(a, g):
        gx, gw, gb = T.conv2d_backward(a["x"], params(a), g)
        return {"x": gx, "weight": gw, "bias": gb}

    return _projected(lambda a: T.conv2d(a["x"], params(a)), backward, inputs, seed)


def check_relu(seed: int = 0) -> GradcheckReport:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 4, 4))
    # Central differences straddle the kink within one step of zero.
    mask = np.abs(x) > max(RELU_KINK, STEP)
    return _projected(lambda a: T.relu(a["x"]),
                      lambda a, g: {"x": T.relu_backward(a["x"], g)},
                      {"x": x}, seed, masks={"x": mask})


def check_concat(seed: int = 0) -> GradcheckReport:
    rng = np.random.default_rng(seed)
    inputs = {"a": rng.standard_normal((2, 2, 3, 3)), "b": rng.standard_normal((2, 3, 3, 3))}

    def backward(a, g):
        ga, gb = T.split_channels(g, a["a"].shape[1])
        return {"a": ga, "b": gb}

    return _projected(lambda a: T.concat_channels(a["a"], a["b"]), backward, inputs, seed)


def check_depth_to_space(seed: int = 0, r: int = 2) -> GradcheckReport:
    rng = np.random.default_rng(seed)
    return _projected(lambda a: T.depth_to_space(a["x"], r),
                      lambda a, g: {"x": T.depth_to_space_backward(g, r)},
                      {"x": rng.standard_normal((2, 3 * r * r, 3, 2))}, seed)


def check_nearest_upsample(seed: int = 0, r: int = 3) -> GradcheckReport:
    rng = np.random.default_rng(seed)
    return _projected(lambda a: T.nearest_upsample(a["x"], r),
                      lambda a, g: {"x": T.nearest_upsample_backward(g, r)},
                      {"x": rng.standard_normal((2, 2, 3, 2))}, seed)


def check_l2_loss(seed: int = 0) -> GradcheckReport:
    rng = np.random.default_rng(seed)
    target = rng.standard_normal((2, 3, 4, 4))
    report = gradcheck(lambda a: l2_loss(a["pred"], target)[0],
                       lambda a: {"pred": l2_loss(a["pred"], target)[1]},
                       {"pred": rng.standard_normal((2, 3, 4, 4))}, tolerance=1e-6)
    return report


def check_network(seed: int = 0, nc: int = 2, nb: int = 1, size: int = 4) -> GradcheckReport:
    """End-to-end L2 loss gradient of a tiny network w.r.t. every tensor."""
    rng = np.random.default_rng(seed)
    with T.precision("f64"):
        cfg = NetConfig(nc=nc, nb=nb, frames=1)
        base = init_params(cfg, seed=seed, tail_gain=1.0)
    arrays = {k: v + (rng.uniform(-0.1, 0.1, v.shape) if k.endswith(".bias") else 0.0)
              for k, v in base.to_arrays().items()}
    x = rng.random((1, 3, size, size))
    y = rng.random((1, 3, 4 * size, 4 * size))
    names = list(arrays)

    def loss(a):
        net = base.with_arrays({k: a[k] for k in names})
        return l2_loss(forward_frame(a["x"], net), y)[0]

    def analytic(a):
        net = base.with_arrays({k: a[k] for k in names})
        tape = GradTape()
        xv = tape.watch(a["x"])
        out = forward_frame(xv, net, ops=tape)
        _, g = l2_loss(out.data, y)
        grads = tape.backward(out, g)
        result = grads.as_arrays()
        result["x"] = grads.wrt(xv)
        return result

    return gradcheck(loss, analytic, {**arrays, "x": x}, TOLERANCE)


CHECKS = {
    "conv2d": check_conv2d,
    "relu": check_relu,
    "concat": check_concat,
    "depth_to_space": check_depth_to_space,
    "nearest_upsample": check_nearest_upsample,
    "l2_loss": check_l2_loss,
    "network": check_network,
}
