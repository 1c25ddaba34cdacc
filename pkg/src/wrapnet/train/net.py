"""The desk-scale MLP: full-precision first/last layers around quantized blocks.

Each quantized block keeps latent real weights ``W`` (quantized on the fly),
a per-channel affine ``(gamma, beta)`` and the scheme/cyclic/carry state
that the pipeline stages fill in.  ``export`` turns the network into a
:class:`~wrapnet.netgraph.ModelManifest` whose integer forward pass matches
``forward`` in evaluation mode bit for bit (without carry simulation).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import autodiff as ad
from ..cyclic import CyclicSpec
from ..fxp import FixedTensor, QuantScheme
from ..netgraph import LayerSpec, ModelManifest
from ..packing import CarryStats, carry_batch_stats, update_moving_mean
from .config import TrainConfig

OUT_ACT_BITS = 8  # input resolution of the full-precision output layer


def weight_step(W: np.ndarray, bits: int) -> float:
    """Per-tensor weight scale: mean |W| for binary, a fixed fraction of it otherwise."""
    m = float(np.mean(np.abs(W)))
    if bits == 1:
        return m
    return m * min(1.4, 3.0 / ((1 << (bits - 1)) - 1))


@dataclass
class Phase:
    quant_acts: bool = False
    cyclic: bool = False
    simulate_carry: bool = False
    update_stats: bool = False
    reg_overflow: bool = False
    reg_carry: bool = False
    collect: bool = False


@dataclass
class QuantBlock:
    name: str
    W: ad.Tensor
    gamma: ad.Tensor
    beta: ad.Tensor
    acc_bits: int
    step_x: float = 1.0
    act_bits: int | None = None
    cyclic: CyclicSpec | None = None
    carry_mode: str = "none"
    carry: CarryStats | None = None
    reg_carry: bool = True
    packed_mean: np.ndarray | None = None  # carry offset of the inference kernel

    @property
    def bits(self) -> int:
        return self.acc_bits - 1 if self.carry_mode == "buffer" else self.acc_bits

    @property
    def input_scheme(self) -> QuantScheme:
        return QuantScheme(self.step_x, self.act_bits or 16, signed=False)


@dataclass
class Aux:
    reg_overflow: ad.Tensor | None = None
    reg_carry: ad.Tensor | None = None
    z: list = field(default_factory=list)
    carries: list = field(default_factory=list)
    inputs: list = field(default_factory=list)


class ToyNet:
    def __init__(self, cfg: TrainConfig, rng: np.random.Generator):
        self.cfg = cfg
        H, F, C = cfg.hidden, cfg.features, cfg.classes
        self.W0 = ad.parameter(rng.normal(scale=np.sqrt(2.0 / F), size=(F, H)))
        self.b0 = ad.parameter(np.zeros(H))
        self.blocks = [
            QuantBlock(f"q{i + 1}", ad.parameter(rng.normal(scale=np.sqrt(2.0 / H), size=(H, H))),
                       ad.parameter(np.ones(H)), ad.parameter(np.zeros(H)), cfg.acc_bits)
            for i in range(cfg.depth)
        ]
        self.Wout = ad.parameter(rng.normal(scale=np.sqrt(1.0 / H), size=(H, C)))
        self.bout = ad.parameter(np.zeros(C))
        self.out_step: float | None = None

    def parameters(self) -> list[ad.Tensor]:
        ps = [self.W0, self.b0]
        for b in self.blocks:
            ps += [b.W, b.gamma, b.beta]
        return ps + [self.Wout, self.bout]

    def weight_levels(self, block: QuantBlock) -> tuple[ad.Tensor, float]:
        bits = self.cfg.weight_bits
        step = weight_step(block.W.value, bits)
        if bits == 1:
            return ad.ste_sign(block.W, step, clip=3.0), step
        m = (1 << (bits - 1)) - 1
        return ad.ste_levels(block.W, step, -m, m), step

    def init_affine(self, x: np.ndarray):
        """Data-dependent init: each block's affine standardizes its outputs."""
        h = np.maximum(x @ self.W0.value + self.b0.value, 0.0)
        for b in self.blocks:
            q, dw = self.weight_levels(b)
            y = (h @ q.value) * dw
            mu, sd = y.mean(axis=0), y.std(axis=0) + 1e-8
            b.gamma.value[:] = 1.0 / sd
            b.beta.value[:] = -mu / sd
            h = np.maximum(y * b.gamma.value + b.beta.value, 0.0)

    def forward(self, x: np.ndarray, phase: Phase) -> tuple[ad.Tensor, Aux]:
        aux = Aux()
        h = ad.relu(ad.add(ad.matmul(ad.Tensor(x), self.W0), self.b0))
        reg_o, reg_c = [], []
        for b in self.blocks:
            q, dw = self.weight_levels(b)
            if phase.quant_acts:
                xz = ad.ste_levels(h, b.step_x, 0, (1 << b.act_bits) - 1)
            else:
                xz = ad.mul(h, 1.0 / b.step_x)
            if phase.collect:
                aux.inputs.append(h.value)
            z = ad.matmul(xz, q)
            sim = phase.simulate_carry and b.carry_mode == "carry"
            need_n = phase.quant_acts and (sim or (phase.reg_carry and b.reg_carry) or phase.collect)
            n = ad.carry_counts(xz, q, b.bits, self.cfg.carry_temperature) if need_n else None
            if sim:
                if b.carry is None:
                    b.carry = CarryStats(n.value.mean(axis=0), np.zeros(n.shape[1]),
                                         self.cfg.carry_momentum)
                correction = np.rint(b.carry.mean)
                if phase.update_stats:
                    b.carry = update_moving_mean(b.carry, *carry_batch_stats(n.value))
                z = ad.add(z, ad.add(n, -correction))
            if n is not None and phase.reg_carry and b.reg_carry:
                reg_c.append(ad.batch_variance_mean(n))
            if phase.reg_overflow:
                reg_o.append(ad.overflow_hinge(z, b.bits))
            if phase.collect:
                aux.z.append(z.value)
                aux.carries.append(None if n is None else n.value)
            c = ad.cyclic(z, b.cyclic) if (phase.cyclic and b.cyclic is not None) else z
            scale = ad.mul(b.gamma, dw * b.step_x)
            h = ad.relu(ad.add(ad.mul(c, scale), b.beta))
        if phase.collect:
            aux.inputs.append(h.value)
        if phase.quant_acts and self.out_step is not None:
            h = ad.ste_quantize(h, self.out_step, 0, (1 << OUT_ACT_BITS) - 1)
        logits = ad.add(ad.matmul(h, self.Wout), self.bout)
        if reg_o:
            aux.reg_overflow = _sum(reg_o)
        if reg_c:
            aux.reg_carry = _sum(reg_c)
        return logits, aux

    def hidden_inputs(self, x: np.ndarray, phase: Phase) -> list[np.ndarray]:
        """Real-valued inputs of each quantized block, then of the output layer."""
        _, aux = self.forward(x, Phase(**{**phase.__dict__, "collect": True}))
        return aux.inputs

    def export(self, metadata: dict | None = None) -> ModelManifest:
        cfg = self.cfg
        schemes = [b.input_scheme for b in self.blocks]
        out_scheme = QuantScheme(self.out_step, OUT_ACT_BITS, signed=False) if self.out_step else None
        layers = [LayerSpec("fp_in", "linear", self.W0.value.copy(), np.ones(cfg.hidden),
                            self.b0.value.copy(), None, schemes[0], None, True, True)]
        for i, b in enumerate(self.blocks):
            q, dw = self.weight_levels(b)
            kind = "binary" if cfg.weight_bits == 1 else "uniform"
            wt = FixedTensor(q.value.astype(np.int64), QuantScheme(dw, cfg.weight_bits, True, kind))
            nxt = schemes[i + 1] if i + 1 < len(schemes) else out_scheme
            layers.append(LayerSpec(
                b.name, "linear", wt, b.gamma.value.copy(), b.beta.value.copy(), schemes[i], nxt,
                b.cyclic, True, False, carry_mode=b.carry_mode,
                carry_mean=self._carry_mean(b)))
        layers.append(LayerSpec("fp_out", "linear", self.Wout.value.copy(), np.ones(cfg.classes),
                                self.bout.value.copy(), out_scheme, None, None, False, True))
        meta = {"seed": cfg.seed, "weight_bits": cfg.weight_bits}
        meta.update(metadata or {})
        return ModelManifest(tuple(layers), cfg.acc_bits, meta)

    @staticmethod
    def _carry_mean(b: QuantBlock):
        if b.packed_mean is not None:
            return b.packed_mean.copy()
        return None if b.carry is None else b.carry.mean.copy()

    def state(self) -> list[np.ndarray]:
        return [p.value.copy() for p in self.parameters()]


def _sum(ts: list[ad.Tensor]) -> ad.Tensor:
    out = ts[0]
    for t in ts[1:]:
        out = ad.add(out, t)
    return out
