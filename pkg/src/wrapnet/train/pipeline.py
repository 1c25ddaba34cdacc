"""Staged training: pretrain, calibrate, warm up, fine-tune (and carry adaptation)."""
from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .. import autodiff as ad
from ..cyclic import CyclicSpec
from ..errors import DivergenceError
from ..fxp import round_half_away
from ..netgraph import (activation_bits, calibrate_carry_means, calibrate_shared,
                        calibrate_step_size, overflow_fraction, overflow_penalty)
from ..netgraph import forward as integer_forward
from .config import TrainConfig
from .dataset import Dataset, make_synthetic_dataset
from .net import OUT_ACT_BITS, Phase, ToyNet

CALIBRATION_SAMPLES = 2000

# per-stage RNG streams, so that reusing a pretrained network does not shift later draws
_STREAM = {"pretrain": 1, "warmup": 2, "finetune": 3, "adapt": 4}


@dataclass
class TrainResult:
    config: TrainConfig
    net: ToyNet
    metrics: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    calibration: list = field(default_factory=list)
    schedule: list = field(default_factory=list)

    @property
    def model(self):
        return self.net.export({"config": self.config.to_dict()})


class _Monitor:
    """Collects per-epoch metrics and watches for divergence."""

    def __init__(self, cfg: TrainConfig, chance: float, log_path=None):
        self.cfg = cfg
        self.threshold = chance + cfg.divergence_margin / 100.0
        self.streak = 0
        self.records: list[dict] = []
        self.fh = open(log_path, "w") if log_path else None

    def record(self, rec: dict, check: bool = True):
        self.records.append(rec)
        if self.fh:
            self.fh.write(json.dumps(rec) + "\n")
            self.fh.flush()
        if not check or "acc" not in rec:
            return
        self.streak = self.streak + 1 if rec["acc"] <= self.threshold else 0
        if self.streak >= self.cfg.divergence_patience:
            raise DivergenceError(
                f"validation accuracy stayed at or below {100 * self.threshold:.1f}% for "
                f"{self.streak} consecutive epochs (stage {rec['stage']}, epoch {rec['epoch']}); "
                f"last accuracies {[round(r['acc'], 4) for r in self.records[-self.streak:]]}")

    def close(self):
        if self.fh:
            self.fh.close()


def _eval_phase(train: Phase) -> Phase:
    return Phase(quant_acts=train.quant_acts, cyclic=train.cyclic,
                 simulate_carry=train.simulate_carry, collect=True)


def evaluate(net: ToyNet, x: np.ndarray, y: np.ndarray, phase: Phase) -> dict:
    """Accuracy plus overflow and carry statistics of ``net`` on ``(x, y)``."""
    logits, aux = net.forward(x, _eval_phase(phase))
    acc = float(np.mean(np.argmax(logits.value, axis=1) == y))
    rates = [overflow_fraction(z, b.bits) for z, b in zip(aux.z, net.blocks)]
    r_o = sum(overflow_penalty(z, b.bits)[0] for z, b in zip(aux.z, net.blocks))
    carries = [n for n in aux.carries if n is not None]
    out = {"acc": acc, "overflow_rate": float(np.mean(rates)), "R_o": float(r_o),
           "carry_std": None, "carry_mean": None, "R_c": None}
    if carries:
        out["carry_std"] = float(np.mean([n.std(axis=0).mean() for n in carries]))
        out["carry_mean"] = float(np.mean([n.mean() for n in carries]))
        out["R_c"] = float(sum(n.var(axis=0).mean() for n in carries))
        out["carry_std_layers"] = [float(n.std(axis=0).mean()) for n in carries]
    return out


def _lr(cfg: TrainConfig, base: float, step: int, total: int) -> float:
    if cfg.lr_schedule == "constant" or total <= 1:
        return base
    return base * (0.02 + 0.98 * 0.5 * (1.0 + math.cos(math.pi * step / total)))


def run_stage(net: ToyNet, data: Dataset, cfg: TrainConfig, stage: str, epochs: int, phase: Phase,
              monitor: _Monitor, rng: np.random.Generator, lambda_overflow: float = 0.0,
              lambda_carry: float = 0.0):
    """SGD with momentum over ``epochs`` passes; logs one record per epoch."""
    params = net.parameters()
    velocity = [np.zeros_like(p.value) for p in params]
    base_lr = cfg.lr if stage == "pretrain" else cfg.lr_finetune
    n = data.x_train.shape[0]
    bs = cfg.batch_size
    steps = math.ceil(n / bs)
    total = epochs * steps
    t = 0
    for epoch in range(epochs):
        perm = rng.permutation(n)
        losses = []
        for i in range(steps):
            idx = perm[i * bs:(i + 1) * bs]
            logits, aux = net.forward(data.x_train[idx], phase)
            loss = ad.cross_entropy(logits, data.y_train[idx])
            if aux.reg_overflow is not None and lambda_overflow > 0:
                loss = ad.add(loss, ad.mul(aux.reg_overflow, lambda_overflow))
            if aux.reg_carry is not None and lambda_carry > 0:
                loss = ad.add(loss, ad.mul(aux.reg_carry, lambda_carry))
            for p in params:
                p.zero_grad()
            loss.backward()
            lr = _lr(cfg, base_lr, t, total)
            grads = [np.zeros_like(p.value) if p.grad is None else p.grad for p in params]
            if cfg.grad_clip > 0:
                norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
                if norm > cfg.grad_clip:
                    grads = [g * (cfg.grad_clip / norm) for g in grads]
            for p, g, v in zip(params, grads, velocity):
                v *= cfg.momentum
                v += g
                p.value -= lr * v
            losses.append(float(loss.value))
            t += 1
        ev = evaluate(net, data.x_val, data.y_val, phase)
        ev.pop("carry_std_layers", None)
        monitor.record({"stage": stage, "epoch": epoch, "loss": float(np.mean(losses)), **ev})


def calibrate(net: ToyNet, data: Dataset, cfg: TrainConfig, bits: int | None = None,
              blocks=None) -> list[dict]:
    """Set each block's input step (and activation bits) from pretrained activations."""
    bits = cfg.acc_bits if bits is None else bits
    x = data.x_train[:CALIBRATION_SAMPLES]
    inputs = net.hidden_inputs(x, Phase())
    chosen = list(range(len(net.blocks))) if blocks is None else list(blocks)
    weights = {i: net.weight_levels(net.blocks[i])[0].value for i in chosen}
    rows = []
    if cfg.calibration == "overflow" and cfg.shared_step:
        cal = calibrate_shared([(weights[i], inputs[i]) for i in chosen], cfg.p_target, bits)
    for i in chosen:
        b = net.blocks[i]
        if cfg.calibration == "range":
            q = float(np.percentile(inputs[i], 99.9)) or float(inputs[i].max()) or 1.0
            step, abits, reachable = q / ((1 << cfg.act_bits) - 1), cfg.act_bits, True
        else:
            if not cfg.shared_step:
                cal = calibrate_step_size(weights[i], inputs[i], cfg.p_target, b.bits)
            q = float(np.percentile(inputs[i], 99.9))
            step, abits, reachable = cal.step_size, activation_bits(q, cal.step_size), cal.reachable
        b.step_x, b.act_bits = step, abits
        xq = np.clip(round_half_away(inputs[i] / step), 0, (1 << abits) - 1)
        rate = overflow_fraction(xq @ weights[i], b.bits)
        rows.append({"layer": b.name, "step_size": step, "act_bits": abits, "rate": rate,
                     "reachable": reachable})
    q_out = float(np.percentile(inputs[-1], 99.9)) or float(inputs[-1].max()) or 1.0
    net.out_step = q_out / ((1 << OUT_ACT_BITS) - 1)
    return rows


def _cyclic_spec(cfg: TrainConfig, bits: int) -> CyclicSpec | None:
    if not cfg.cyclic:
        return None
    return CyclicSpec(bits, cfg.slope, cfg.cyclic_kind)


def pretrain(cfg: TrainConfig, data: Dataset, monitor: _Monitor | None = None) -> ToyNet:
    """Binary (or low-bit) weights, full-precision activations, no cyclic layer."""
    rng = np.random.default_rng([cfg.seed, 0])
    net = ToyNet(cfg, rng)
    net.init_affine(data.x_train[:512])
    mon = monitor or _Monitor(cfg, data.chance)
    run_stage(net, data, cfg, "pretrain", cfg.stage_epochs("pretrain"), Phase(), mon,
              np.random.default_rng([cfg.seed, _STREAM["pretrain"]]))
    return net


def train_pipeline(cfg: TrainConfig, data: Dataset | None = None, pretrained: ToyNet | None = None,
                   log_path=None) -> TrainResult:
    """Run all stages; raises :class:`DivergenceError` when validation accuracy collapses.

    ``pretrained`` (from :func:`pretrain` with the same architecture) skips the
    first stage; it is copied, not modified.
    """
    cfg.validate()
    data = data or make_synthetic_dataset(cfg.seed, cfg.n_samples, cfg.difficulty, cfg.classes,
                                          cfg.features)
    mon = _Monitor(cfg, data.chance, log_path)
    try:
        if pretrained is None:
            net = pretrain(cfg, data, mon)
        else:
            net = copy.deepcopy(pretrained)
            net.cfg = cfg
            for b in net.blocks:
                b.acc_bits = cfg.acc_bits
        result = TrainResult(cfg, net)
        result.calibration = calibrate(net, data, cfg)
        mon.record({"stage": "calibrate", "epoch": 0,
                    "overflow_rate": float(np.mean([r["rate"] for r in result.calibration])),
                    "act_bits": [r["act_bits"] for r in result.calibration]}, check=False)
        for b in net.blocks:
            b.cyclic = _cyclic_spec(cfg, b.bits)
        warm = Phase(cyclic=True, reg_overflow=cfg.shared_step and cfg.lambda_overflow > 0)
        run_stage(net, data, cfg, "warmup", cfg.stage_epochs("warmup"), warm, mon,
                  np.random.default_rng([cfg.seed, _STREAM["warmup"]]),
                  lambda_overflow=cfg.lambda_overflow)
        fine = Phase(quant_acts=True, cyclic=True, reg_overflow=cfg.lambda_overflow > 0,
                     reg_carry=cfg.lambda_carry > 0)
        run_stage(net, data, cfg, "finetune", cfg.stage_epochs("finetune"), fine, mon,
                  np.random.default_rng([cfg.seed, _STREAM["finetune"]]),
                  cfg.lambda_overflow, cfg.lambda_carry)
        if cfg.carry_adaptation != "none":
            result.schedule = carry_adaptation_schedule(net, data, cfg, mon)
            set_packed_carry_means(net, data.x_train[:CALIBRATION_SAMPLES])
        result.metrics = mon.records
        result.summary = summarize(net, data, cfg)
        return result
    except DivergenceError as exc:
        exc.metrics = mon.records
        raise
    finally:
        mon.close()


def _sim_phase(cfg: TrainConfig, train: bool) -> Phase:
    return Phase(quant_acts=True, cyclic=True, simulate_carry=True, update_stats=train,
                 reg_overflow=train and cfg.lambda_overflow > 0,
                 reg_carry=train and cfg.lambda_carry > 0)


def carry_adaptation_schedule(net: ToyNet, data: Dataset, cfg: TrainConfig,
                              monitor: _Monitor | None = None, stds=None) -> list[dict]:
    """Enable carry simulation layer by layer, least carry spread first.

    After each layer's fine-tuning the validation accuracy (with simulated
    carries) is compared with the accuracy before adaptation; a drop of more
    than ``cfg.adaptation_drop`` points (hybrid only) moves that layer and all
    remaining ones to buffer-bit accumulation.  ``stds`` overrides the
    measured per-layer carry spreads (used for ordering only).
    """
    mon = monitor or _Monitor(cfg, data.chance)
    rng = np.random.default_rng([cfg.seed, _STREAM["adapt"]])
    x_cal = data.x_train[:CALIBRATION_SAMPLES]
    base = evaluate(net, x_cal, data.y_train[:CALIBRATION_SAMPLES], _sim_phase(cfg, False))
    if stds is None:
        stds = base["carry_std_layers"]
    order = sorted(range(len(net.blocks)), key=lambda i: (stds[i], i))
    ref = evaluate(net, data.x_val, data.y_val, _sim_phase(cfg, False))["acc"]
    plan = []
    for pos, i in enumerate(order):
        b = net.blocks[i]
        b.carry_mode = "carry"
        b.carry = None
        run_stage(net, data, cfg, f"adapt:{b.name}", cfg.adaptation_epochs, _sim_phase(cfg, True),
                  mon, rng, cfg.lambda_overflow, cfg.lambda_carry)
        acc = evaluate(net, data.x_val, data.y_val, _sim_phase(cfg, False))["acc"]
        drop = 100.0 * (ref - acc)
        plan.append({"layer": b.name, "carry_std": stds[i], "acc": acc, "drop": drop, "mode": "carry"})
        if cfg.carry_adaptation == "hybrid" and drop > cfg.adaptation_drop:
            rest = order[pos:]
            for j in rest:
                nb = net.blocks[j]
                nb.carry_mode, nb.carry, nb.reg_carry = "buffer", None, False
                nb.cyclic = _cyclic_spec(cfg, nb.bits)
            for entry in plan:
                if entry["layer"] in {net.blocks[j].name for j in rest}:
                    entry["mode"] = "buffer"
            plan.extend({"layer": net.blocks[j].name, "carry_std": stds[j], "acc": None, "drop": None,
                         "mode": "buffer"} for j in rest[1:])
            # the buffer bit halves the accumulator range: recalibrate those inputs
            calibrate(net, data, cfg, blocks=rest)
            run_stage(net, data, cfg, "adapt:buffer", cfg.adaptation_epochs, _sim_phase(cfg, True),
                      mon, rng, cfg.lambda_overflow, cfg.lambda_carry)
            break
    return plan


def set_packed_carry_means(net: ToyNet, x: np.ndarray):
    """Measure, on the packed kernel, the carry offset each carry-mode block subtracts."""
    model = calibrate_carry_means(net.export(), x)
    by_name = {layer.name: layer for layer in model.layers}
    for b in net.blocks:
        b.packed_mean = by_name[b.name].carry_mean if b.carry_mode == "carry" else None


def summarize(net: ToyNet, data: Dataset, cfg: TrainConfig) -> dict:
    """Test-set accuracy of the exported integer model under several accumulators."""
    model = net.export()
    out = {}
    modes = [("exact", "exact32"), ("wrapped", f"wrapped({cfg.acc_bits})")]
    if cfg.carry_adaptation != "none":
        modes.append(("packed", f"packed_contaminated({cfg.acc_bits},64)"))
    for label, mode in modes:
        logits = integer_forward(model, data.x_test, mode)
        out[f"acc_{label}"] = float(np.mean(np.argmax(logits, axis=1) == data.y_test))
    sim = evaluate(net, data.x_test, data.y_test,
                   _sim_phase(cfg, False) if cfg.carry_adaptation != "none"
                   else Phase(quant_acts=True, cyclic=True))
    out["acc_simulated"] = sim["acc"]
    out["overflow_rate"] = sim["overflow_rate"]
    out["carry_std"] = sim["carry_std"]
    out["carry_mean"] = sim["carry_mean"]
    out["act_bits"] = [b.act_bits for b in net.blocks]
    out["modes"] = [b.carry_mode for b in net.blocks]
    return out
