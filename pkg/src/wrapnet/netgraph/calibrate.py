"""Overflow measurement, the overflow penalty and step-size calibration."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import CalibrationError, ConfigError, RangeError
from ..fxp import QuantScheme, round_half_away, wrap
from ..kernels import AccMode, im2col
from ..packing import carry_fold_batch
from .model import ModelManifest, _as_input, _matmul, forward, forward_block

MAX_ACT_BITS = 16
PERCENTILE = 99.9
MAX_ITERATIONS = 40
TOLERANCE = 0.005  # absolute, on the overflow fraction


def overflow_fraction(z, bits: int) -> float:
    """Fraction of entries with ``|z| > 2**(bits-1) - 1``."""
    z = np.asarray(z)
    if z.size == 0:
        return 0.0
    return float(np.mean(np.abs(z) > (1 << (bits - 1)) - 1))


def overflow_penalty(z_q, bits: int) -> tuple[float, np.ndarray]:
    """Hinge ``mean(max(|z| - 2**(bits-1), 0))`` and its (sub)gradient.

    The subgradient is taken as 0 at the hinge point itself.
    """
    z = np.asarray(z_q, dtype=np.float64)
    if z.size == 0:
        return 0.0, np.zeros_like(z)
    excess = np.abs(z) - float(1 << (bits - 1))
    active = excess > 0
    value = float(np.where(active, excess, 0.0).sum() / z.size)
    return value, np.sign(z) * active / z.size


def model_overflow_penalty(model: ModelManifest, data, bits: int | None = None) -> float:
    """Sum over quantized layers of the per-layer hinge penalty."""
    bits = model.acc_bits if bits is None else bits
    _, taps = forward(model, data, "exact32", taps=True)
    return sum(overflow_penalty(t["z"], bits)[0]
               for layer, t in zip(model.layers, taps) if not layer.full_precision)


def overflow_rate(model: ModelManifest, data, bits: int | None = None) -> dict:
    """Per quantized layer, the fraction of (sample, neuron) pairs that overflow ``bits``."""
    bits = model.acc_bits if bits is None else bits
    _, taps = forward(model, data, "exact32", taps=True)
    return {layer.name: overflow_fraction(t["z"], bits)
            for layer, t in zip(model.layers, taps) if not layer.full_precision}


def activation_bits(q: float, step: float) -> int:
    """Unsigned bits needed to represent ``q`` at step ``step``: ceil(log2(ceil(q/step) + 1))."""
    levels = math.ceil(q / step) if q > 0 else 0
    return int(min(MAX_ACT_BITS, max(1, math.ceil(math.log2(levels + 1)))))


@dataclass(frozen=True)
class Calibration:
    step_size: float
    act_bits: int
    rate: float  # measured overflow fraction at step_size
    reachable: bool
    iterations: int

    @property
    def scheme(self) -> QuantScheme:
        return QuantScheme(self.step_size, self.act_bits, signed=False)


class _Problem:
    """Activations (as a patch matrix) and weights for one layer."""

    def __init__(self, acts, weights, op: str = "linear", stride: int = 1, pad: int = 0):
        acts = np.asarray(acts, dtype=np.float64)
        w = np.asarray(getattr(weights, "values", weights), dtype=np.float64)
        if acts.size == 0 or acts.shape[0] == 0:
            raise CalibrationError("empty calibration set")
        if op == "conv":
            kh, kw = w.shape[2], w.shape[3]
            self.X = np.concatenate([im2col(s, (kh, kw), stride, pad).T for s in acts], axis=0)
            self.W = w.reshape(w.shape[0], -1).T
        else:
            self.X = acts.reshape(acts.shape[0], -1)
            self.W = w
        if self.X.shape[1] != self.W.shape[0]:
            raise CalibrationError(f"activations have {self.X.shape[1]} features, weights {self.W.shape[0]}")
        self.q = float(np.percentile(self.X, PERCENTILE))
        self.top = float(self.X.max())
        if self.q <= 0:
            self.q = self.top

    def rate(self, step: float, bits: int) -> float:
        abits = activation_bits(self.q, step)
        xq = np.clip(round_half_away(self.X / step), 0, (1 << abits) - 1)
        return overflow_fraction(xq @ self.W, bits)


def _bisect(problems: list[_Problem], p_target: float, bits: int) -> Calibration:
    if not 0 <= p_target <= 50:
        raise ConfigError(f"p_target must lie in [0, 50] percent, got {p_target}")
    target = p_target / 100.0
    q = max(pr.q for pr in problems)
    top = max(pr.top for pr in problems)
    if top <= 0:
        # nothing to overflow: every step gives rate 0
        return Calibration(1.0, 1, 0.0, target <= TOLERANCE, 0)

    def rate(step):
        return float(np.mean([pr.rate(step, bits) for pr in problems]))

    lo = min(pr.q for pr in problems if pr.q > 0) / ((1 << MAX_ACT_BITS) - 1)
    hi = 4.0 * top  # every activation rounds to zero
    r_lo, r_hi = rate(lo), 0.0
    if r_lo <= target:
        # finest admissible step already overflows no more than asked
        return Calibration(lo, activation_bits(q, lo), r_lo, target - r_lo <= TOLERANCE, 0)
    it = 0
    while it < MAX_ITERATIONS:
        it += 1
        mid = math.sqrt(lo * hi)
        r = rate(mid)
        if r <= target:
            hi, r_hi = mid, r
            if target > 0 and target - r_hi <= TOLERANCE:
                break
        else:
            lo = mid
    return Calibration(hi, activation_bits(q, hi), r_hi, target - r_hi <= TOLERANCE, it)


def calibrate_step_size(weights, acts, p_target: float = 5.0, bits: int = 8, op: str = "linear",
                        stride: int = 1, pad: int = 0) -> Calibration:
    """Step size for a layer's (unsigned) input so that ``p_target`` percent of
    its pre-activations overflow a ``bits``-bit accumulator.

    Bisects (geometrically) between the 16-bit step and a step that zeroes
    every activation; stops once the rate is within 0.5% below the target or
    after 40 iterations, and returns the smallest step whose rate does not
    exceed the target.  ``reachable`` is False when no step gets within 0.5%.
    """
    return _bisect([_Problem(acts, weights, op, stride, pad)], p_target, bits)


def calibrate_shared(pairs, p_target: float = 5.0, bits: int = 8) -> Calibration:
    """One step size for several layers; ``pairs`` holds (weights, acts[, op]) tuples.

    The rate being matched is the mean of the per-layer rates.
    """
    problems = [_Problem(p[1], p[0], *(p[2:] if len(p) > 2 else ())) for p in pairs]
    return _bisect(problems, p_target, bits)


def calibrate_model(model: ModelManifest, data, p_target: float = 5.0, bits: int | None = None,
                    shared: bool = False):
    """Re-derive every quantized layer's input scheme from real activations.

    The real activations are the pre-requantization outputs of the previous
    layer (or the raw data for the first).  Layers are calibrated in order,
    each on activations produced by the already-recalibrated layers before
    it.  With ``shared`` one step is chosen for all layers from a single
    pass.  Returns the new model and one report row per calibrated layer,
    whose ``rate`` is measured on the returned model.
    """
    bits = model.acc_bits if bits is None else bits
    data = np.asarray(data, dtype=np.float64)
    idx = [i for i, layer in enumerate(model.layers) if not layer.full_precision]
    layers = list(model.layers)

    def problem(i, current):
        _, taps = forward(current, data, "exact32", taps=True)
        acts = data if i == 0 else taps[i - 1]["y"]
        l = current.layers[i]
        return _Problem(acts, l.weights, l.op, l.stride, l.pad)

    def apply(i, cal):
        layers[i] = layers[i].with_(input_scheme=cal.scheme)
        if i > 0:
            layers[i - 1] = layers[i - 1].with_(output_scheme=cal.scheme)

    results = {}
    if shared and idx:
        problems = {i: problem(i, model) for i in idx}
        common = _bisect(list(problems.values()), p_target, bits)
        for i, pr in problems.items():
            results[i] = Calibration(common.step_size, activation_bits(pr.q, common.step_size),
                                     common.rate, common.reachable, common.iterations)
            apply(i, results[i])
    else:
        for i in idx:
            results[i] = _bisect([problem(i, model.with_layers(layers))], p_target, bits)
            apply(i, results[i])
    new = model.with_layers(layers)
    measured = overflow_rate(new, data, bits)
    rows = [{"layer": layers[i].name, "step_size": results[i].step_size,
             "act_bits": results[i].act_bits, "rate": measured[layers[i].name],
             "reachable": results[i].reachable, "iterations": results[i].iterations} for i in idx]
    return new, rows


def calibrate_carry_means(model: ModelManifest, data, width: int = 64) -> ModelManifest:
    """Set each carry-mode layer's ``carry_mean`` to what the packed kernel adds.

    The contaminated kernel drops top-lane and lane-reduction carries, so the
    offset it leaves in a sum is smaller than the full carry count used in
    training.  Per neuron, the mean of ``wrap(packed - exact)`` over ``data``
    is measured layer by layer, each layer seeing the inputs produced by the
    already-corrected layers before it.
    """
    mode = AccMode("packed_contaminated", model.acc_bits, width)
    layers = list(model.layers)
    x = np.asarray(data, dtype=np.float64)
    for i, layer in enumerate(layers):
        if layer.carry_mode == "carry" and not layer.full_precision:
            xq = _as_input(x, layer)
            offset = wrap(_matmul(layer, xq, mode, 1) - _matmul(layer, xq, AccMode("exact32"), 1),
                          model.acc_bits)
            axes = (0,) if offset.ndim == 2 else (0, 2, 3)
            layers[i] = layer = layer.with_(carry_mean=offset.mean(axis=axes).astype(np.float64))
        x = forward_block(x, layer, mode)
    return model.with_layers(layers)


def carry_counts(model: ModelManifest, data, mode: AccMode | str | None = None) -> dict:
    """Per-sample, per-neuron carry totals of every quantized layer.

    Products are accumulated one at a time in an ``acc_bits`` end-around
    register (carry-outs re-enter at bit 0).  Weights must be ternary.
    Conv layers report one total per output pixel, flattened into the
    sample axis.  Layers see inputs produced by ``mode`` (default: wrapped
    at ``acc_bits``).
    """
    if mode is None:
        mode = AccMode("wrapped", model.acc_bits)
    elif isinstance(mode, str):
        mode = AccMode.parse(mode)
    x = np.asarray(data, dtype=np.float64)
    out = {}
    for layer in model.layers:
        if not layer.full_precision:
            wm = layer.weight_matrix()
            if np.abs(wm).max(initial=0) > 1:
                raise RangeError(f"{layer.name}: carry simulation needs weights in {{-1, 0, 1}}")
            xq = _as_input(x, layer)
            if layer.op == "conv":
                _, cin, kh, kw = layer.weight_values.shape
                xq = np.concatenate([im2col(s, (kh, kw), layer.stride, layer.pad).T for s in xq])
            else:
                xq = xq.reshape(xq.shape[0], -1)
            bits = model.acc_bits - 1 if layer.carry_mode == "buffer" else model.acc_bits
            pos, neg = (wm > 0).astype(np.int64), (wm < 0).astype(np.int64)
            # each negative product x * w contributes 2**b - |p| to the unsigned sum
            n_neg = (xq > 0).astype(np.int64) @ neg + (xq < 0).astype(np.int64) @ pos
            u = xq.astype(np.int64) @ wm.astype(np.int64) + (n_neg << bits)
            out[layer.name] = carry_fold_batch(u, bits)[0]
        x = forward_block(x, layer, mode)
    return out
