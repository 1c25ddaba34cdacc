"""Training configuration with exhaustive validation."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace

from ..cyclic import KINDS as CYCLIC_KINDS
from ..errors import ConfigError

STAGES = ("pretrain", "calibrate", "warmup", "finetune")


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    # task and architecture
    n_samples: int = 3000
    difficulty: float = 1.5
    classes: int = 4
    features: int = 8
    hidden: int = 512
    depth: int = 3  # quantized hidden layers between the full-precision ends
    # stage lengths (calibrate has no epochs)
    epochs: dict = field(default_factory=lambda: {"pretrain": 10, "warmup": 5, "finetune": 8})
    lr: float = 0.05  # pretrain
    lr_finetune: float = 0.01  # warmup, finetune and carry adaptation
    grad_clip: float = 5.0  # global gradient-norm bound; 0 disables
    lr_schedule: str = "cosine"
    momentum: float = 0.9
    batch_size: int = 64
    # quantization
    acc_bits: int = 8
    weight_bits: int = 1
    calibration: str = "overflow"  # "overflow": match p_target; "range": fixed act_bits over q99.9
    act_bits: int = 3  # used by calibration="range"
    p_target: float = 5.0
    shared_step: bool = False
    # cyclic activation
    cyclic: bool = True
    slope: float = 2.0
    cyclic_kind: str = "smooth_modulo"
    # regularizers (finetune only; warmup also applies lambda_overflow with shared_step)
    lambda_overflow: float = 0.01
    lambda_carry: float = 0.0
    carry_temperature: float = 1.0
    carry_momentum: float = 0.99
    # packed-accumulation adaptation after finetune: "none", "carry" (all layers) or "hybrid"
    carry_adaptation: str = "none"
    adaptation_epochs: int = 3
    adaptation_drop: float = 3.0  # accuracy points
    # divergence detection
    divergence_patience: int = 10
    divergence_margin: float = 2.0  # accuracy points above chance

    def validate(self) -> "TrainConfig":
        problems = []

        def bad(name, msg):
            problems.append(f"{name}: {msg} (got {getattr(self, name)!r})")

        if not isinstance(self.seed, int) or self.seed < 0:
            bad("seed", "must be a non-negative integer")
        for name in ("n_samples", "classes", "features", "hidden", "batch_size", "divergence_patience"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 1:
                bad(name, "must be a positive integer")
        if self.classes < 2:
            bad("classes", "needs at least two classes")
        if not isinstance(self.depth, int) or self.depth < 1:
            bad("depth", "needs at least one quantized layer")
        if not self.difficulty > 0:
            bad("difficulty", "must be positive")
        if not isinstance(self.epochs, dict) or set(self.epochs) - {"pretrain", "warmup", "finetune"}:
            bad("epochs", "must map pretrain/warmup/finetune to epoch counts")
        else:
            for k, v in self.epochs.items():
                if not isinstance(v, int) or v < 0:
                    problems.append(f"epochs.{k}: must be a non-negative integer (got {v!r})")
        for name in ("lr", "lr_finetune"):
            if not getattr(self, name) > 0:
                bad(name, "must be positive")
        if not self.grad_clip >= 0:
            bad("grad_clip", "must be >= 0")
        if self.lr_schedule not in ("constant", "cosine"):
            bad("lr_schedule", "must be 'constant' or 'cosine'")
        if not 0 <= self.momentum < 1:
            bad("momentum", "must lie in [0, 1)")
        if not isinstance(self.acc_bits, int) or not 4 <= self.acc_bits <= 32:
            bad("acc_bits", "must lie in [4, 32]")
        if self.weight_bits not in (1, 2, 3, 4, 5):
            bad("weight_bits", "must be one of 1..5")
        if self.calibration not in ("overflow", "range"):
            bad("calibration", "must be 'overflow' or 'range'")
        if not isinstance(self.act_bits, int) or not 1 <= self.act_bits <= 16:
            bad("act_bits", "must lie in [1, 16]")
        if not 0 <= self.p_target <= 50:
            bad("p_target", "must lie in [0, 50] percent")
        if not (self.slope >= 1 or math.isinf(self.slope)):
            bad("slope", "must be >= 1 or inf")
        if self.cyclic_kind not in CYCLIC_KINDS:
            bad("cyclic_kind", f"must be one of {CYCLIC_KINDS}")
        for name in ("lambda_overflow", "lambda_carry"):
            if not getattr(self, name) >= 0:
                bad(name, "must be >= 0")
        if not self.carry_temperature > 0:
            bad("carry_temperature", "must be positive")
        if not 0 < self.carry_momentum < 1:
            bad("carry_momentum", "must lie in (0, 1)")
        if self.carry_adaptation not in ("none", "carry", "hybrid"):
            bad("carry_adaptation", "must be 'none', 'carry' or 'hybrid'")
        if self.carry_adaptation != "none" and self.weight_bits > 2:
            bad("carry_adaptation", "packed accumulation needs weight_bits <= 2")
        if not isinstance(self.adaptation_epochs, int) or self.adaptation_epochs < 0:
            bad("adaptation_epochs", "must be a non-negative integer")
        if not self.adaptation_drop >= 0:
            bad("adaptation_drop", "must be >= 0")
        if not self.divergence_margin >= 0:
            bad("divergence_margin", "must be >= 0")
        if problems:
            raise ConfigError(problems)
        return self

    def stage_epochs(self, stage: str) -> int:
        return int(self.epochs.get(stage, 0))

    def replace(self, **changes) -> "TrainConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["slope"] = "inf" if math.isinf(self.slope) else self.slope
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        """Build and validate; every unknown, mistyped or invalid field is reported at once."""
        known = {f.name for f in fields(cls)}
        problems = [f"{k}: unknown field" for k in sorted(set(d) - known)]
        d = {k: v for k, v in d.items() if k in known}
        if "slope" in d and str(d["slope"]).lower() in ("inf", "infinity"):
            d["slope"] = math.inf
        defaults = cls()
        for k, v in list(d.items()):
            want = type(getattr(defaults, k))
            numeric = isinstance(v, (int, float)) and not isinstance(v, bool)
            if want is float and numeric:
                d[k] = float(v)
            elif want is int and numeric and float(v).is_integer():
                d[k] = int(v)
            elif not isinstance(v, want) or (want is not bool and isinstance(v, bool)):
                problems.append(f"{k}: expected {want.__name__} (got {v!r})")
                del d[k]
        if isinstance(d.get("epochs"), dict):
            d["epochs"] = {**cls().epochs, **d["epochs"]}
        cfg = cls(**d)
        try:
            cfg.validate()
        except ConfigError as exc:
            problems += exc.problems
        if problems:
            raise ConfigError(problems)
        return cfg
