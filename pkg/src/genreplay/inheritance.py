"""Stage-II losses: new-task cross-entropy, distillation and their scheduled mix."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F

from .errors import ConfigurationError, DimensionError, LabelError


@dataclass
class DistillConfig:
    temperature: float = 2.0
    lambda4_mode: str = "task-index-schedule"
    fixed_lambda4: Optional[float] = None

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigurationError("temperature must be > 0")
        if self.lambda4_mode == "fixed":
            if self.fixed_lambda4 is None or not 0 <= self.fixed_lambda4 <= 1:
                raise ConfigurationError("fixed lambda4 mode needs fixed_lambda4 in [0, 1]")
        elif self.lambda4_mode == "task-index-schedule":
            if self.fixed_lambda4 is not None:
                raise ConfigurationError("fixed_lambda4 is only valid in fixed mode")
        else:
            raise ConfigurationError(f"unknown lambda4 mode {self.lambda4_mode!r}")


def cross_entropy_loss(new_logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean softmax cross-entropy over the new-head columns only."""
    k = new_logits.shape[1]
    bad = ((labels < 0) | (labels >= k)).nonzero()
    if bad.numel():
        row = int(bad[0])
        raise LabelError(f"row {row}: label {int(labels[row])} outside new head of width {k}")
    return F.cross_entropy(new_logits, labels)


def kd_loss(teacher_logits: torch.Tensor, student_logits: torch.Tensor, temperature: float) -> torch.Tensor:
    """Mean cross-entropy H(softmax(t/T), softmax(s/T)); the teacher side carries no gradient."""
    if teacher_logits.shape != student_logits.shape:
        raise DimensionError(
            f"teacher {tuple(teacher_logits.shape)} and student {tuple(student_logits.shape)} differ"
        )
    if not temperature > 0:
        raise ConfigurationError("temperature must be > 0")
    p = F.softmax(teacher_logits.detach() / temperature, dim=1)
    return -(p * F.log_softmax(student_logits / temperature, dim=1)).sum(dim=1).mean()


def lambda4(task_index: int, cfg: DistillConfig) -> float:
    """Distillation weight for the ``task_index``-th incremental step (1-based)."""
    if task_index < 1:
        raise ValueError("task_index is 1-based")
    if cfg.lambda4_mode == "fixed":
        return float(cfg.fixed_lambda4)
    return task_index / (task_index + 1)


def inheritance_loss(ce, gkd, nkd, lam4: float):
    if not 0 <= lam4 <= 1:
        raise ValueError("lambda4 must lie in [0, 1]")
    total = (1 - lam4) * ce + lam4 * (gkd + nkd)
    terms = {"ce": ce.item(), "gkd": gkd.item(), "nkd": nkd.item(), "lambda4": lam4, "total": total.item()}
    return total, terms
