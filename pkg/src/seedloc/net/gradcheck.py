"""Central finite-difference checks of the analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import layers
from .loss import weighted_mse_loss
from .model import ArchConfig, NetworkParams, backward_pass, forward_pass, init_params


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max abs difference normalised by the larger of the two tensors' max magnitude."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def numeric_gradient(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``x`` (mutated and restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return g


@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def max_relative_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def worst(self) -> str:
        return max(self.errors, key=self.errors.get) if self.errors else ""

    def lines(self) -> list[str]:
        return [f"{name:32s} {err:.3e}" for name, err in self.errors.items()]


def _probe_target(shape, rng) -> np.ndarray:
    # strictly positive weights so every voxel contributes to the loss
    return rng.uniform(0.2, 1.0, size=shape)


def gradient_check(arch: ArchConfig = ArchConfig(levels=1, base_channels=2),
                   input_shape=(8, 8, 8), batch: int = 2, rng_seed: int = 0,
                   weight_floor: float = 0.0, target: np.ndarray | None = None,
                   h: float = 1e-6, backend: str = "numpy") -> GradCheckReport:
    """End-to-end check: training-mode network + weighted MSE, every parameter tensor.

    Runs in float64. ``target`` defaults to a random strictly positive map.
    The small default step keeps ReLU and max-pool switches between the two
    probes rare; a switch shows up as one isolated large error.
    """
    rng = np.random.default_rng(rng_seed)
    net = init_params(arch, rng, dtype=np.float64)
    net.params = {k: v + 0.1 * rng.standard_normal(v.shape) for k, v in net.params.items()}
    x = rng.standard_normal((batch, 1) + tuple(input_shape))
    if target is None:
        target = _probe_target(x.shape, rng)

    def loss_only():
        out, _ = forward_pass(net, x, training=True, backend=backend, keep_cache=False)
        return weighted_mse_loss(out, target, weight_floor)[0]

    out, tape = forward_pass(net, x, training=True, backend=backend)
    _, grad_out = weighted_mse_loss(out, target, weight_floor)
    grads = backward_pass(net, tape, grad_out)
    report = GradCheckReport()
    for name, p in net.params.items():
        num = numeric_gradient(loss_only, p, h)
        report.errors[name] = relative_error(grads[name], num)
    return report


def conv_layer_check(in_ch: int = 1, out_ch: int = 2, size: int = 6, transpose: bool = False,
                     rng_seed: int = 0, h: float = 1e-5, backend: str = "numpy") -> GradCheckReport:
    """Check one (transposed) convolution layer: input, kernel and bias gradients."""
    rng = np.random.default_rng(rng_seed)
    x = rng.standard_normal((1, in_ch, size, size, size))
    if transpose:
        w = rng.standard_normal((in_ch, out_ch, 2, 2, 2))
        b = rng.standard_normal(out_ch)

        def fwd():
            return layers.convtranspose3d_forward(x, w, b, backend)
        bwd = layers.convtranspose3d_backward
    else:
        w = rng.standard_normal((out_ch, in_ch, 3, 3, 3))
        b = rng.standard_normal(out_ch)

        def fwd():
            return layers.conv3d_forward(x, w, b, 1, 1, backend)
        bwd = layers.conv3d_backward
    y, _ = fwd()
    probe = rng.standard_normal(y.shape)

    def f():
        return float(np.sum(fwd()[0] * probe))

    _, cache = fwd()
    gx, gw, gb = bwd(probe, cache)
    report = GradCheckReport()
    report.errors["input"] = relative_error(gx, numeric_gradient(f, x, h))
    report.errors["weight"] = relative_error(gw, numeric_gradient(f, w, h))
    report.errors["bias"] = relative_error(gb, numeric_gradient(f, b, h))
    return report
