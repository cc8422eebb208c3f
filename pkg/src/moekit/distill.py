"""Staged knowledge distillation and depth-reduced student models.

Two ideas live here:

  * ``derive_student`` shrinks a teacher stack by removing whole blocks.
    The default policy removes blocks from the shallow end of the stack,
    starting at the first routed layer, which trims the narrow stages of a
    pyramid schedule first and always preserves the two deepest routed
    layers (the widest ones).

  * ``kd_objective`` blends the usual label loss with a teacher-matching
    term:  CE(student, labels) + alpha_eff * KL(teacher || student).
    The blend weight follows a hard stage schedule: alpha before
    ``stage_boundary`` steps, exactly zero at and after it. Stopping the
    teacher term partway through training lets the student finish on the
    labels alone instead of inheriting the teacher's residual errors.

``train_toy`` runs the objective end to end on a synthetic classification
stream with a deliberately imperfect teacher, using the gradient tape for
optimization. It exists so schedule variants can be compared empirically.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as tk
from .arch import (
    LayerSpec,
    MoeModelConfig,
    ValidationError,
    forward_layer,
    init_layer_params,
)
from .gating import GatingConfig
from .tensor import GradTape, Tensor

__all__ = [
    "KDConfig",
    "StudentPlan",
    "TrainingError",
    "derive_student",
    "kd_objective",
    "SyntheticStream",
    "ToyModel",
    "ToyTrainConfig",
    "StepRecord",
    "train_toy",
    "write_trajectory_csv",
]


class TrainingError(RuntimeError):
    """Raised when the toy optimizer hits a non-finite loss."""

    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KDConfig:
    """Distillation blend: weight, hard stop boundary, softmax temperature.

    temperature rescales both logit sets before the KL term (with the
    customary T^2 correction); the default of 1.0 leaves logits untouched.
    """

    alpha: float = 1.0
    stage_boundary: int | None = None  # None: never stop
    temperature: float = 1.0

    def __post_init__(self) -> None:
        if self.alpha < 0:
            raise ValidationError("alpha must be >= 0")
        if self.temperature <= 0:
            raise ValidationError("temperature must be positive")
        if self.stage_boundary is not None and self.stage_boundary < 0:
            raise ValidationError("stage_boundary must be >= 0")

    def effective_alpha(self, step: int) -> float:
        if self.stage_boundary is not None and step >= self.stage_boundary:
            return 0.0
        return self.alpha


def kd_objective(
    student_logits: Tensor,
    teacher_logits: np.ndarray | Tensor,
    labels: np.ndarray,
    cfg: KDConfig,
    step: int,
) -> tuple[Tensor, float, float]:
    """Blended loss at a given step; returns (loss, ce_value, kd_value).

    The teacher term is skipped entirely (not just weighted by zero) once the
    stage boundary has passed, so the late-stage loss graph is exactly the
    label-only one.
    """
    ce = tk.cross_entropy(student_logits, labels)
    alpha = cfg.effective_alpha(step)
    if alpha == 0.0:
        return ce, ce.item(), 0.0
    t_vals = teacher_logits.value if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    t = cfg.temperature
    if t != 1.0:
        kl = tk.kl_divergence(Tensor(t_vals / t), tk.scale(student_logits, 1.0 / t))
        kd = tk.scale(kl, alpha * t * t)
    else:
        kd = tk.scale(tk.kl_divergence(Tensor(t_vals), student_logits), alpha)
    loss = tk.add(ce, kd)
    return loss, ce.item(), kd.item()


# ---------------------------------------------------------------------------
# student derivation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StudentPlan:
    teacher: MoeModelConfig
    student: MoeModelConfig
    removed_layers: tuple[int, ...]  # teacher block indices, ascending


def derive_student(
    teacher: MoeModelConfig,
    target_depth: int,
    removal_policy: str | tuple[int, ...] = "shallow-routed-first",
) -> StudentPlan:
    """Drop whole blocks from the teacher stack until target_depth remains.

    Policies:
      * "shallow-routed-first" (default): remove consecutive blocks starting
        at the first routed layer (index 1), so the shallowest routed layers
        and their dense neighbours go first. The two deepest routed layers
        are never eligible.
      * an explicit tuple of block indices to remove.
    """
    depth = teacher.num_layers
    if not (0 < target_depth < depth):
        raise ValidationError(
            f"target depth {target_depth} must be positive and below teacher depth {depth}"
        )
    removal = depth - target_depth

    if isinstance(removal_policy, tuple):
        removed = tuple(sorted(removal_policy))
        if len(removed) != removal or len(set(removed)) != removal:
            raise ValidationError(
                f"explicit removal set needs {removal} distinct indices, got {removed}"
            )
        if any(i < 0 or i >= depth for i in removed):
            raise ValidationError("removal index out of range")
    elif removal_policy == "shallow-routed-first":
        moe_idx = teacher.moe_layer_indices
        protected = set(moe_idx[-2:])  # keep the widest (deepest) routed layers
        candidates = [i for i in range(1, depth) if i not in protected]
        if removal > len(candidates):
            raise ValidationError("target depth removes protected layers")
        removed = tuple(candidates[:removal])
    else:
        raise ValidationError(f"unknown removal policy {removal_policy!r}")

    kept = tuple(spec for i, spec in enumerate(teacher.layers) if i not in set(removed))
    student = replace(teacher, num_layers=len(kept), layers=kept)
    return StudentPlan(teacher=teacher, student=student, removed_layers=removed)


# ---------------------------------------------------------------------------
# synthetic task and toy models
# ---------------------------------------------------------------------------


@dataclass
class SyntheticStream:
    """Seeded classification stream with an imperfect teacher.

    Inputs are standard normal; true labels come from a hidden linear map.
    The teacher scores with a noisy copy of that map, so its soft labels are
    informative early but systematically wrong in the tail - matching them
    forever caps how well a student can fit the labels.
    """

    hidden: int
    vocab: int
    batch: int
    seed: int = 42
    teacher_noise: float = 0.8

    def __post_init__(self) -> None:
        rng = np.random.default_rng(self.seed)
        self.true_map = rng.standard_normal((self.hidden, self.vocab))
        self.teacher_map = self.true_map + self.teacher_noise * rng.standard_normal(
            (self.hidden, self.vocab)
        )
        self._rng = np.random.default_rng(self.seed + 1)
        holdout_rng = np.random.default_rng(self.seed + 2)
        self.holdout_x = holdout_rng.standard_normal((4 * self.batch, self.hidden))
        self.holdout_labels = np.argmax(self.holdout_x @ self.true_map, axis=1)

    def next_batch(self) -> tuple[np.ndarray, np.ndarray]:
        x = self._rng.standard_normal((self.batch, self.hidden))
        return x, np.argmax(x @ self.true_map, axis=1)

    def teacher_logits(self, x: np.ndarray) -> np.ndarray:
        return x @ self.teacher_map


@dataclass
class ToyModel:
    """A small routed stack plus a classification head."""

    specs: tuple[LayerSpec, ...]
    layer_params: list
    head: Tensor

    @classmethod
    def create(
        cls,
        hidden: int,
        vocab: int,
        experts: int = 4,
        depth: int = 1,
        seed: int = 0,
        k: int = 1,
        capacity_factor: float = 2.0,
    ) -> "ToyModel":
        rng = np.random.default_rng(seed)
        specs = tuple(
            LayerSpec(
                kind="moe",
                hidden=hidden,
                experts=experts,
                gating=GatingConfig(num_experts=experts, k=k, capacity_factor=capacity_factor),
            )
            for _ in range(depth)
        )
        params = [init_layer_params(s, rng, scale=0.3) for s in specs]
        head = Tensor(rng.standard_normal((hidden, vocab)) * 0.3)
        return cls(specs=specs, layer_params=params, head=head)

    def leaves(self) -> list[Tensor]:
        out: list[Tensor] = []
        for p in self.layer_params:
            out.extend(p.leaves())
        out.append(self.head)
        return out

    def logits(self, x: np.ndarray, tape: GradTape | None = None) -> Tensor:
        h = Tensor(x, tape)
        for spec, params in zip(self.specs, self.layer_params):
            h = forward_layer(h, spec, params)
        return tk.matmul(h, self.head)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KDTrainResult:
    records: list["StepRecord"]

    @property
    def final_heldout_ce(self) -> float:
        return self.records[-1].heldout_ce


@dataclass(frozen=True)
class StepRecord:
    step: int
    ce: float
    kd: float
    total: float
    heldout_ce: float


@dataclass(frozen=True)
class ToyTrainConfig:
    kd: KDConfig
    steps: int = 200
    lr: float = 0.05


def train_toy(
    student: ToyModel,
    stream: SyntheticStream,
    cfg: ToyTrainConfig,
) -> KDTrainResult:
    """Plain gradient descent on the blended objective.

    One batch per step, evaluated against the stream's fixed held-out set
    after the update. Raises TrainingError with the failing step index if the
    loss stops being finite.
    """
    records: list[StepRecord] = []
    leaves = student.leaves()
    for step in range(cfg.steps):
        x, labels = stream.next_batch()
        tape = GradTape()
        logits = student.logits(x, tape)
        loss, ce_val, kd_val = kd_objective(
            logits, stream.teacher_logits(x), labels, cfg.kd, step
        )
        total = loss.item()
        if not np.isfinite(total):
            raise TrainingError(step, f"non-finite loss {total}")
        tk.reset_grads(leaves)
        tape.backward(loss)
        for leaf in leaves:
            if leaf.grad is not None:
                leaf.value -= cfg.lr * leaf.grad
        heldout = tk.cross_entropy(
            student.logits(stream.holdout_x), stream.holdout_labels
        ).item()
        records.append(
            StepRecord(step=step, ce=ce_val, kd=kd_val, total=total, heldout_ce=heldout)
        )
    return KDTrainResult(records=records)


def write_trajectory_csv(records: list[StepRecord], fileobj) -> None:
    """Emit the loss trajectory as CSV columns (step, ce, kd, total)."""
    writer = csv.writer(fileobj)
    writer.writerow(["step", "ce", "kd", "total"])
    for r in records:
        writer.writerow([r.step, f"{r.ce:.10g}", f"{r.kd:.10g}", f"{r.total:.10g}"])
