"""Layer and model descriptions plus the integer forward pass.

A quantized block computes::

    z_q = gemm(x_q, w_q, mode)        # accumulator semantics from ``mode``
    c   = cyclic(z_q)                 # optional
    y   = c * (delta_z * gamma) + beta
    y   = relu(y)                     # optional
    x'  = quantize_uniform(y, output_scheme)

with ``delta_z = delta_w * delta_x``.  Full-precision layers (first/last)
skip the integer path and compute ``x @ W`` in floating point.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np

from ..cyclic import CyclicSpec, cyclic_apply
from ..errors import SchemeMismatchError, ShapeMismatchError, SpecMismatchError
from ..fxp import FixedTensor, QuantScheme, quantize_uniform, round_half_away
from ..kernels import AccMode, gemm, im2col
from ..kernels.lowering import conv_output_shape

OpKind = Literal["linear", "conv"]
CarryMode = Literal["none", "carry", "buffer"]
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    """One block of a sequential model.

    ``weights`` is a FixedTensor for quantized layers and a float array for
    full-precision ones.  Linear weights are ``in x out``; conv weights are
    ``Cout x Cin x kh x kw``.  ``carry_mode`` records how the layer was
    adapted for packed accumulation: ``carry`` subtracts the per-neuron
    ``carry_mean`` from contaminated sums, ``buffer`` runs with a buffer bit
    (its cyclic spec then uses one bit fewer).
    """

    name: str
    op: OpKind
    weights: FixedTensor | np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    input_scheme: QuantScheme | None = None
    output_scheme: QuantScheme | None = None
    cyclic: CyclicSpec | None = None
    relu: bool = True
    full_precision: bool = False
    stride: int = 1
    pad: int = 0
    carry_mode: CarryMode = "none"
    carry_mean: np.ndarray | None = None

    def __post_init__(self):
        if self.op not in ("linear", "conv"):
            raise SpecMismatchError(f"unknown op {self.op!r}")
        if self.carry_mode not in ("none", "carry", "buffer"):
            raise SpecMismatchError(f"unknown carry mode {self.carry_mode!r}")
        if self.full_precision:
            w = np.asarray(self.weights, dtype=np.float64)
            object.__setattr__(self, "weights", w)
        else:
            if not isinstance(self.weights, FixedTensor):
                raise SchemeMismatchError(f"layer {self.name}: quantized layers need FixedTensor weights")
            if self.input_scheme is None:
                raise SchemeMismatchError(f"layer {self.name}: quantized layers need an input scheme")
        w = self.weight_values
        if self.op == "linear" and w.ndim != 2:
            raise ShapeMismatchError(f"layer {self.name}: linear weights must be 2-D")
        if self.op == "conv" and w.ndim != 4:
            raise ShapeMismatchError(f"layer {self.name}: conv weights must be 4-D")
        for attr in ("gamma", "beta"):
            v = np.asarray(getattr(self, attr), dtype=np.float64).reshape(-1)
            if v.size != self.out_channels:
                raise ShapeMismatchError(
                    f"layer {self.name}: {attr} has {v.size} entries, expected {self.out_channels}")
            object.__setattr__(self, attr, v)
        if self.carry_mean is not None:
            m = np.asarray(self.carry_mean, dtype=np.float64).reshape(-1)
            if m.size != self.out_channels:
                raise ShapeMismatchError(f"layer {self.name}: carry_mean size mismatch")
            object.__setattr__(self, "carry_mean", m)

    @property
    def weight_values(self) -> np.ndarray:
        return self.weights.values if isinstance(self.weights, FixedTensor) else self.weights

    @property
    def out_channels(self) -> int:
        w = self.weight_values
        return w.shape[1] if self.op == "linear" else w.shape[0]

    @property
    def delta_w(self) -> float:
        if self.full_precision:
            return 1.0
        return self.weights.scheme.step_size

    @property
    def delta_z(self) -> float:
        """Scale of the integer pre-activation: ``delta_w * delta_x``."""
        if self.full_precision:
            return 1.0
        return self.weights.scheme.step_size * self.input_scheme.step_size

    def weight_matrix(self) -> np.ndarray:
        """Weights as a ``K x N`` matrix (conv kernels flattened per output channel)."""
        w = self.weight_values
        return w if self.op == "linear" else w.reshape(w.shape[0], -1).T

    def with_(self, **changes) -> "LayerSpec":
        return replace(self, **changes)


@dataclass(frozen=True)
class ModelManifest:
    layers: tuple
    acc_bits: int
    metadata: dict = field(default_factory=dict)
    version: int = MANIFEST_VERSION

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        check_consistency(self)

    def with_layers(self, layers) -> "ModelManifest":
        return ModelManifest(tuple(layers), self.acc_bits, dict(self.metadata), self.version)


def check_consistency(model: ModelManifest):
    """Adjacent schemes must match and cyclic specs must agree with ``acc_bits``."""
    if not model.layers:
        raise SpecMismatchError("model has no layers")
    for prev, nxt in zip(model.layers, model.layers[1:]):
        if prev.output_scheme != nxt.input_scheme:
            raise SchemeMismatchError(
                f"{prev.name} emits {prev.output_scheme} but {nxt.name} expects {nxt.input_scheme}")
    for layer in model.layers:
        if layer.full_precision or layer.cyclic is None:
            continue
        want = model.acc_bits - 1 if layer.carry_mode == "buffer" else model.acc_bits
        if layer.cyclic.bits != want:
            raise SchemeMismatchError(
                f"{layer.name}: cyclic uses {layer.cyclic.bits} bits, accumulator has {want}")


def _layer_mode(layer: LayerSpec, mode: AccMode) -> AccMode:
    if layer.carry_mode == "buffer" and mode.kind == "packed_contaminated":
        return AccMode("packed_buffered", mode.bits, mode.width)
    return mode


def _as_input(x, layer: LayerSpec):
    """Integer activations for a quantized layer (real inputs get quantized)."""
    if isinstance(x, FixedTensor):
        if x.scheme != layer.input_scheme:
            raise SchemeMismatchError(
                f"{layer.name}: input scheme {x.scheme} differs from {layer.input_scheme}")
        return x.values
    return quantize_uniform(np.asarray(x, dtype=np.float64), layer.input_scheme).values


def _linear_in(x: np.ndarray) -> np.ndarray:
    return x.reshape(x.shape[0], -1) if x.ndim > 2 else x


def _matmul(layer: LayerSpec, x: np.ndarray, mode: AccMode | None, threads: int) -> np.ndarray:
    """Pre-activations: ``B x N`` for linear, ``B x Cout x Ho x Wo`` for conv."""
    wm = layer.weight_matrix()
    if layer.op == "linear":
        x = _linear_in(x)
        if x.shape[1] != wm.shape[0]:
            raise ShapeMismatchError(f"{layer.name}: input has {x.shape[1]} features, expected {wm.shape[0]}")
        return x @ wm if mode is None else np.asarray(gemm(x, wm, mode, threads=threads))
    if x.ndim != 4:
        raise ShapeMismatchError(f"{layer.name}: conv input must be B x C x H x W")
    cout, cin, kh, kw = layer.weight_values.shape
    if x.shape[1] != cin:
        raise ShapeMismatchError(f"{layer.name}: input has {x.shape[1]} channels, expected {cin}")
    ho, wo = conv_output_shape(x.shape[2], x.shape[3], kh, kw, layer.stride, layer.pad)
    cols = np.concatenate([im2col(s, (kh, kw), layer.stride, layer.pad).T for s in x], axis=0)
    z = cols @ wm if mode is None else np.asarray(gemm(cols, wm, mode, threads=threads))
    return z.reshape(x.shape[0], ho * wo, cout).transpose(0, 2, 1).reshape(x.shape[0], cout, ho, wo)


def _channel(v: np.ndarray, ndim: int) -> np.ndarray:
    return v if ndim == 2 else v.reshape(1, -1, *([1] * (ndim - 2)))


def forward_block(x, layer: LayerSpec, mode: AccMode | str = "exact32", threads: int = 1,
                  taps: bool = False):
    """Run one block.  Returns the next activations (and a dict of taps).

    The taps hold ``z`` (the accumulator result after any carry correction),
    ``c`` (cyclic output) and ``y`` (post affine/ReLU, pre-requantization).
    """
    if isinstance(mode, str):
        mode = AccMode.parse(mode)
    if layer.full_precision:
        xr = x.dequantize() if isinstance(x, FixedTensor) else np.asarray(x, dtype=np.float64)
        z = _matmul(layer, xr, None, threads)
        c = z
        y = c * _channel(layer.gamma, z.ndim) + _channel(layer.beta, z.ndim)
    else:
        xq = _as_input(x, layer)
        lmode = _layer_mode(layer, mode)
        z = _matmul(layer, xq, lmode, threads)
        if (layer.carry_mode == "carry" and lmode.kind == "packed_contaminated"
                and layer.carry_mean is not None):
            z = z - _channel(round_half_away(layer.carry_mean).astype(np.int64), z.ndim)
        c = cyclic_apply(z, layer.cyclic) if layer.cyclic is not None else z
        scale = layer.delta_z * layer.gamma
        y = c * _channel(scale, z.ndim) + _channel(layer.beta, z.ndim)
    if layer.relu:
        y = np.maximum(y, 0.0)
    out = quantize_uniform(y, layer.output_scheme) if layer.output_scheme is not None else y
    if taps:
        return out, {"z": z, "c": c, "y": y}
    return out


def forward(model: ModelManifest, x, mode: AccMode | str = "exact32", threads: int = 1,
            taps: bool = False):
    """Run every block; returns the final real output (logits) and optional taps list."""
    if isinstance(mode, str):
        mode = AccMode.parse(mode)
    collected = []
    for layer in model.layers:
        if taps:
            x, t = forward_block(x, layer, mode, threads, taps=True)
            collected.append(t)
        else:
            x = forward_block(x, layer, mode, threads)
    out = x.dequantize() if isinstance(x, FixedTensor) else x
    return (out, collected) if taps else out


def predict(model: ModelManifest, x, mode: AccMode | str = "exact32", threads: int = 1) -> np.ndarray:
    return np.argmax(forward(model, x, mode, threads), axis=1)


def layer_inputs(model: ModelManifest, x, mode: AccMode | str = "exact32") -> list:
    """Input fed to each layer (integer values for quantized layers, real otherwise)."""
    if isinstance(mode, str):
        mode = AccMode.parse(mode)
    inputs = []
    for layer in model.layers:
        inputs.append(x)
        x = forward_block(x, layer, mode)
    return inputs
