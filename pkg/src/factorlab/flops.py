"""Idealized FLOP accounting (embedding lookups are free, backward = 2x forward)."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class FlopModel:
    L: int
    d: int
    h: int
    M: int

    def __post_init__(self):
        for name in ("L", "d", "h", "M"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")


def forward_flops_per_input(fm: FlopModel) -> int:
    blocks = 6 * fm.L * fm.d * fm.h
    head = 2 * fm.d * fm.M
    return blocks + head


def training_flops(fm: FlopModel, inputs_per_epoch: int, epochs: int) -> int:
    # python ints: no overflow at 1e6 epochs x 4096 inputs
    return 3 * forward_flops_per_input(fm) * int(inputs_per_epoch) * int(epochs)


def epoch_cost(fm: FlopModel, inputs_per_epoch: int) -> int:
    return training_flops(fm, inputs_per_epoch, 1)


def epochs_for_budget(fm: FlopModel, budget: int, inputs_per_epoch: int) -> int:
    """Largest ``T`` with ``training_flops(T) <= budget``."""
    return int(budget) // epoch_cost(fm, inputs_per_epoch)


def evaluation_flops(fm: FlopModel, inputs: int) -> int:
    """Forward-only cost of evaluating ``inputs`` tokens (kept out of training budgets)."""
    return forward_flops_per_input(fm) * int(inputs)
