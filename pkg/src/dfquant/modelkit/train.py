from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from ..data import LabeledDataset, iterate_batches
from .classifier import Classifier

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TeacherSchedule:
    epochs: int = 20
    lr: float = 3e-3
    batch_size: int = 50
    weight_decay: float = 1e-4
    seed: int = 0


@dataclass
class TeacherHistory:
    epoch_loss: list[float] = field(default_factory=list)
    epoch_acc: list[float] = field(default_factory=list)


def train_teacher(m: Classifier, data: LabeledDataset, schedule: TeacherSchedule) -> tuple[Classifier, TeacherHistory]:
    """Supervised training of the full-precision model; mutates and returns ``m``."""
    if len(data) == 0:
        raise ValueError("empty training set")
    opt = torch.optim.Adam(m.parameters(), lr=schedule.lr, weight_decay=schedule.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(schedule.epochs, 1))
    hist = TeacherHistory()
    m.train()
    for epoch in range(schedule.epochs):
        total, correct, loss_sum = 0, 0, 0.0
        for x, y in iterate_batches(data, schedule.batch_size, shuffle_seed=schedule.seed * 100_003 + epoch):
            if len(y) < 2:
                continue
            logits = m(x)
            loss = F.cross_entropy(logits, y)
            if not math.isfinite(loss.item()):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            loss_sum += loss.item() * len(y)
            correct += (logits.argmax(1) == y).sum().item()
            total += len(y)
        sched.step()
        hist.epoch_loss.append(loss_sum / total)
        hist.epoch_acc.append(correct / total)
        log.info("teacher epoch %d loss %.4f acc %.3f", epoch + 1, hist.epoch_loss[-1], hist.epoch_acc[-1])
    m.eval()
    return m, hist
