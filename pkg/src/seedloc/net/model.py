"""Symmetric 3D encoder-decoder that regresses a seed probability map.

Layout for ``levels = L`` and ``base_channels = c``::

    encoder level l  : [conv3-BN-ReLU] x2 at c*2**l channels, then 2x2x2 max-pool
    bottleneck       : [conv3-BN-ReLU] x2 at c*2**L channels
    decoder level l  : transpose conv (k=2, s=2) to c*2**l channels,
                       concatenate the encoder skip, [conv3-BN-ReLU] x2
    head             : conv3 to one channel + bias, softplus

Convolutions followed by batch norm carry no bias (it would be cancelled by
the normalization); the transpose convolutions and the head keep theirs.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..volume_io import Checkpoint, Volume
from . import layers


@dataclass(frozen=True)
class ArchConfig:
    levels: int = 3
    base_channels: int = 16
    softplus_beta: float = 1.0
    input_channels: int = 1
    output_channels: int = 1
    conv_kernel: int = 3
    input_shape: tuple[int, int, int] | None = None

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        if not self.softplus_beta > 0:
            raise ValueError("softplus_beta must be positive")
        if self.input_channels != 1 or self.output_channels != 1 or self.conv_kernel != 3:
            raise ValueError("the network is single-channel in and out with 3x3x3 convolutions")
        if self.input_shape is not None:
            object.__setattr__(self, "input_shape", tuple(int(n) for n in self.input_shape))
            self.check_input_shape(self.input_shape)

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level

    def check_input_shape(self, spatial) -> None:
        div = 2 ** self.levels
        if len(spatial) != 3 or any(n < div or n % div for n in spatial):
            raise ValueError(f"spatial dims {tuple(spatial)} must be divisible by 2**levels = {div}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = None if self.input_shape is None else list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if known.get("input_shape") is not None:
            known["input_shape"] = tuple(known["input_shape"])
        return cls(**known)


@dataclass
class NetworkParams:
    """Learnable tensors, batch-norm running statistics and the architecture.

    ``buffers`` holds ``<bn>.running_mean`` / ``<bn>.running_var``; they are
    absent until the first training-mode forward pass. ``meta`` records
    things the inference path needs, e.g. the target map ``scale``.
    """

    arch: ArchConfig
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def astype(self, dtype) -> "NetworkParams":
        return NetworkParams(self.arch, {k: v.astype(dtype) for k, v in self.params.items()},
                             {k: v.astype(dtype) for k, v in self.buffers.items()}, dict(self.meta))

    def copy(self) -> "NetworkParams":
        return self.astype(next(iter(self.params.values())).dtype)

    def to_checkpoint(self, optimizer_state=None, training_meta=None) -> Checkpoint:
        tensors = dict(self.params)
        tensors.update(self.buffers)
        return Checkpoint(
            arch_config={**self.arch.to_dict(), "meta": self.meta},
            tensors=tensors,
            optimizer_state=optimizer_state,
            training_meta=training_meta or {},
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "NetworkParams":
        cfg = dict(ckpt.arch_config)
        meta = cfg.pop("meta", {})
        arch = ArchConfig.from_dict(cfg)
        params, buffers = {}, {}
        for name, arr in ckpt.tensors.items():
            (buffers if name.endswith((".running_mean", ".running_var")) else params)[name] = arr
        expected = param_shapes(arch)
        if set(expected) != set(params):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ValueError(f"checkpoint tensors do not match architecture "
                             f"(missing {missing}, unexpected {extra})")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ValueError(f"tensor {name}: expected shape {shape}, found {params[name].shape}")
        return cls(arch, params, buffers, meta)


def _cbr_names(arch: ArchConfig):
    """(prefix, in_channels, out_channels) of every conv-BN-ReLU unit in forward order."""
    units = []
    c_in = arch.input_channels
    for l in range(arch.levels):
        c = arch.channels(l)
        units += [(f"enc{l}.conv1", c_in, c), (f"enc{l}.conv2", c, c)]
        c_in = c
    c = arch.channels(arch.levels)
    units += [("bottleneck.conv1", c_in, c), ("bottleneck.conv2", c, c)]
    for l in reversed(range(arch.levels)):
        c = arch.channels(l)
        units += [(f"dec{l}.conv1", 2 * c, c), (f"dec{l}.conv2", c, c)]
    return units


def param_shapes(arch: ArchConfig) -> dict[str, tuple]:
    k = arch.conv_kernel
    shapes = {}
    for name, ci, co in _cbr_names(arch):
        shapes[f"{name}.weight"] = (co, ci, k, k, k)
        shapes[f"{name}.bn.gamma"] = (co,)
        shapes[f"{name}.bn.beta"] = (co,)
    for l in range(arch.levels):
        shapes[f"up{l}.weight"] = (arch.channels(l + 1), arch.channels(l), 2, 2, 2)
        shapes[f"up{l}.bias"] = (arch.channels(l),)
    shapes["head.weight"] = (arch.output_channels, arch.channels(0), k, k, k)
    shapes["head.bias"] = (arch.output_channels,)
    return shapes


def init_params(arch: ArchConfig, rng: np.random.Generator | int = 0, dtype=np.float32) -> NetworkParams:
    """He-normal kernels, zero biases, unit gamma, zero beta."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    params = {}
    for name, shape in param_shapes(arch).items():
        if name.endswith(".weight"):
            if name.startswith("up"):
                fan_in = shape[0]  # each output voxel sees one tap per input channel
            else:
                fan_in = int(np.prod(shape[1:]))
            params[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
        elif name.endswith(".gamma"):
            params[name] = np.ones(shape, dtype=dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    return NetworkParams(arch, params)


def _ensure_buffers(net: NetworkParams, dtype):
    for name, _, co in _cbr_names(net.arch):
        net.buffers.setdefault(f"{name}.bn.running_mean", np.zeros(co, dtype=dtype))
        net.buffers.setdefault(f"{name}.bn.running_var", np.ones(co, dtype=dtype))


def forward_pass(net: NetworkParams, x: np.ndarray, training: bool = False, backend=None,
                 keep_cache: bool = True):
    """Run the network on ``x`` (B, 1, X, Y, Z); returns ``(output, cache)``.

    Training mode normalizes with batch statistics and updates the running
    statistics in ``net.buffers``.
    """
    arch = net.arch
    if x.ndim != 5 or x.shape[1] != arch.input_channels:
        raise ValueError(f"expected input (B, {arch.input_channels}, X, Y, Z), got {x.shape}")
    arch.check_input_shape(x.shape[2:])
    backend = layers.resolve_backend(backend)
    p, buf = net.params, net.buffers
    if training:
        _ensure_buffers(net, p["head.weight"].dtype)
    tape = []

    def cbr(name, h):
        h, c_conv = layers.conv3d_forward(h, p[f"{name}.weight"], None, 1, 1, backend)
        h, c_bn = layers.batchnorm3d_forward(
            h, p[f"{name}.bn.gamma"], p[f"{name}.bn.beta"],
            buf.get(f"{name}.bn.running_mean"), buf.get(f"{name}.bn.running_var"), training)
        h, mask = layers.relu_forward(h)
        if keep_cache:
            tape.append(("cbr", name, (c_conv, c_bn, mask)))
        return h

    h = x
    skips = []
    for l in range(arch.levels):
        h = cbr(f"enc{l}.conv1", h)
        h = cbr(f"enc{l}.conv2", h)
        skips.append(h)
        h, c_pool = layers.maxpool3d_forward(h)
        if keep_cache:
            tape.append(("pool", l, c_pool))
    h = cbr("bottleneck.conv1", h)
    h = cbr("bottleneck.conv2", h)
    for l in reversed(range(arch.levels)):
        h, c_up = layers.convtranspose3d_forward(h, p[f"up{l}.weight"], p[f"up{l}.bias"], backend)
        if keep_cache:
            tape.append(("up", l, c_up))
        h = np.concatenate([skips[l], h], axis=1)
        h = cbr(f"dec{l}.conv1", h)
        h = cbr(f"dec{l}.conv2", h)
    h, c_head = layers.conv3d_forward(h, p["head.weight"], p["head.bias"], 1, 1, backend)
    out, c_sp = layers.softplus_forward(h, arch.softplus_beta)
    if keep_cache:
        tape.append(("head", None, (c_head, c_sp)))
    return out, tape


def backward_pass(net: NetworkParams, tape, grad_out: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every tensor in ``net.params``."""
    grads: dict[str, np.ndarray] = {}
    skip_grads: dict[int, np.ndarray] = {}
    g = grad_out
    for kind, key, cache in reversed(tape):
        if kind == "head":
            c_head, c_sp = cache
            g = layers.softplus_backward(g, c_sp)
            g, grads["head.weight"], grads["head.bias"] = layers.conv3d_backward(g, c_head)
        elif kind == "cbr":
            c_conv, c_bn, mask = cache
            g = layers.relu_backward(g, mask)
            g, grads[f"{key}.bn.gamma"], grads[f"{key}.bn.beta"] = layers.batchnorm3d_backward(g, c_bn)
            g, grads[f"{key}.weight"], _ = layers.conv3d_backward(g, c_conv)
            if key.endswith("conv1") and key.startswith("dec"):
                l = int(key[3:key.index(".")])
                c_skip = net.arch.channels(l)
                skip_grads[l] = g[:, :c_skip]
                g = g[:, c_skip:]
        elif kind == "up":
            g, grads[f"up{key}.weight"], grads[f"up{key}.bias"] = layers.convtranspose3d_backward(g, cache)
        elif kind == "pool":
            g = layers.maxpool3d_backward(g, cache)
            g = g + skip_grads.pop(key)
    return {name: grads[name] for name in net.params}


def drn_forward(net: NetworkParams, volume, backend=None):
    """Predicted probability map for one input.

    ``volume`` is either a :class:`Volume` holding the normalized network
    input (returns a probability-map :class:`Volume` on the same grid) or an
    array shaped (X, Y, Z), (1, X, Y, Z) or (B, 1, X, Y, Z) (returns an array
    of the same shape). Batch norm uses running statistics.
    """
    if isinstance(volume, Volume):
        x = volume.data[None, None].astype(net.params["head.weight"].dtype)
        out, _ = forward_pass(net, x, training=False, backend=backend, keep_cache=False)
        return volume.with_data(out[0, 0], kind="probability_map",
                                scale=float(net.meta.get("target_scale", 1.0)))
    arr = np.asarray(volume, dtype=net.params["head.weight"].dtype)
    shape = arr.shape
    x = arr.reshape((1,) * (5 - arr.ndim) + shape)
    out, _ = forward_pass(net, x, training=False, backend=backend, keep_cache=False)
    return out.reshape(shape)
