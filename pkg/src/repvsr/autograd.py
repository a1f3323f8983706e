"""Tape-based reverse-mode differentiation over the tensor ops.

Network code is written once against an ``ops`` object: :data:`EAGER` runs
plain forward passes on arrays, while a :class:`GradTape` wraps values in
:class:`Var` handles and records every op so :meth:`GradTape.backward` can
replay them in exact reverse order.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional

import numpy as np

from . import tensor as T
from .errors import ShapeError


class _Eager:
    """Untracked forward ops; same call surface as :class:`GradTape`."""

    def watch(self, x):
        return x

    def value(self, x):
        return x

    def conv2d(self, x, params, name=None):
        return T.conv2d(x, params)

    def relu(self, x):
        return T.relu(x)

    def concat(self, a, b):
        return T.concat_channels(a, b)

    def depth_to_space(self, x, r):
        return T.depth_to_space(x, r)

    def upsample(self, x, r):
        return T.nearest_upsample(x, r)

    def add(self, a, b):
        return a + b


EAGER = _Eager()


@dataclass(frozen=True)
class Var:
    """A value recorded on a tape; ``slot`` indexes the tape's value table."""

    data: np.ndarray
    slot: int

    @property
    def shape(self):
        return self.data.shape


@dataclass
class Gradients:
    params: Dict[str, list] = field(default_factory=dict)  # name -> [grad_w, grad_b|None]
    inputs: Dict[int, np.ndarray] = field(default_factory=dict)

    def wrt(self, var: Var) -> Optional[np.ndarray]:
        return self.inputs.get(var.slot)

    def as_arrays(self) -> Dict[str, np.ndarray]:
        """Flatten to the ``<layer>.weight`` / ``<layer>.bias`` naming scheme."""
        out = {}
        for name, (gw, gb) in self.params.items():
            out[f"{name}.weight"] = gw
            if gb is not None:
                out[f"{name}.bias"] = gb
        return out


class GradTape:
    def __init__(self):
        self._entries = []
        self._slots = 0

    def __len__(self):
        return len(self._entries)

    def _new(self, data) -> Var:
        var = Var(data, self._slots)
        self._slots += 1
        return var

    def watch(self, x) -> Var:
        return x if isinstance(x, Var) else self._new(np.asarray(x))

    def value(self, x):
        return x.data if isinstance(x, Var) else x

    def _record(self, kind, out_data, inputs, **saved) -> Var:
        out = self._new(out_data)
        self._entries.append((kind, out.slot, tuple(v.slot for v in inputs), saved))
        return out

    def conv2d(self, x: Var, params, name):
        out = T.conv2d(x.data, params)
        return self._record("conv2d", out, (x,), x=x.data, params=params, name=name)

    def relu(self, x: Var):
        return self._record("relu", T.relu(x.data), (x,), x=x.data)

    def concat(self, a: Var, b: Var):
        out = T.concat_channels(a.data, b.data)
        return self._record("concat", out, (a, b), boundary=a.data.shape[1])

    def depth_to_space(self, x: Var, r):
        return self._record("d2s", T.depth_to_space(x.data, r), (x,), r=r)

    def upsample(self, x: Var, r):
        return self._record("upsample", T.nearest_upsample(x.data, r), (x,), r=r)

    def add(self, a: Var, b: Var):
        return self._record("add", a.data + b.data, (a, b))

    def backward(self, out: Var, grad_out: np.ndarray) -> Gradients:
        """Sweep the tape in reverse from ``out`` seeded with ``grad_out``."""
        if tuple(grad_out.shape) != tuple(out.data.shape):
            raise ShapeError(f"seed grad {grad_out.shape} does not match output {out.data.shape}")
        grads = Gradients()
        slot_grads = {out.slot: grad_out}

        def accumulate(slot, g):
            if slot in slot_grads:
                slot_grads[slot] = slot_grads[slot] + g
            else:
                slot_grads[slot] = g

        for kind, out_slot, in_slots, saved in reversed(self._entries):
            g = slot_grads.get(out_slot)
            if g is None:
                continue
            if kind == "conv2d":
                gx, gw, gb = T.conv2d_backward(saved["x"], saved["params"], g)
                accumulate(in_slots[0], gx)
                name = saved["name"]
                if name in grads.params:
                    acc = grads.params[name]
                    acc[0] = acc[0] + gw
                    if gb is not None:
                        acc[1] = acc[1] + gb
                else:
                    grads.params[name] = [gw, gb]
            elif kind == "relu":
                accumulate(in_slots[0], T.relu_backward(saved["x"], g))
            elif kind == "concat":
                ga, gb = T.split_channels(g, saved["boundary"])
                accumulate(in_slots[0], ga)
                accumulate(in_slots[1], gb)
            elif kind == "d2s":
                accumulate(in_slots[0], T.depth_to_space_backward(g, saved["r"]))
            elif kind == "upsample":
                accumulate(in_slots[0], T.nearest_upsample_backward(g, saved["r"]))
            elif kind == "add":
                accumulate(in_slots[0], g)
                accumulate(in_slots[1], g)
            else:  # pragma: no cover
                raise RuntimeError(f"unknown tape op {kind}")
        grads.inputs = slot_grads
        return grads


@dataclass
class GradcheckReport:
    errors: Dict[str, float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.errors.values())

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def failures(self):
        return {k: e for k, e in self.errors.items() if e > self.tolerance}


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """Elementwise |a - n| / (max(|a|, |n|) + floor)."""
    return np.abs(analytic - numeric) / (np.maximum(np.abs(analytic), np.abs(numeric)) + floor)


def numeric_gradient(f: Callable[[], float], x: np.ndarray, step: float = 1e-5,
                     mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. ``x``, perturbing ``x`` in place."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    mflat = None if mask is None else mask.reshape(-1)
    for i in range(flat.size):
        if mflat is not None and not mflat[i]:
            continue
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return grad


def gradcheck(loss: Callable[[Mapping[str, np.ndarray]], float],
              analytic: Callable[[Mapping[str, np.ndarray]], Mapping[str, np.ndarray]],
              inputs: Mapping[str, np.ndarray], tolerance: float = 1e-4,
              step: float = 1e-5, masks: Optional[Mapping[str, np.ndarray]] = None) -> GradcheckReport:
    """Compare analytic gradients to central differences, per named input.

    ``loss`` maps the named float64 arrays to a scalar; ``analytic`` returns
    the gradient of that scalar for each name. ``masks`` excludes elements
    (e.g. ReLU kinks) from the comparison.
    """
    arrays = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    if any(a.dtype != np.float64 for a in arrays.values()):  # pragma: no cover
        raise TypeError("gradcheck requires float64 inputs")
    masks = masks or {}
    with T.precision("f64"):
        expected = {k: np.asarray(v) for k, v in analytic(arrays).items()}
        errors = {}
        for name, arr in arrays.items():
            if name not in expected:
                continue
            mask = masks.get(name)
            numeric = numeric_gradient(lambda: float(loss(arrays)), arr, step, mask)
            err = relative_error(expected[name], numeric)
            if mask is not None:
                err = np.where(mask, err, 0.0)
            errors[name] = float(err.max()) if err.size else 0.0
    return GradcheckReport(errors, tolerance)
