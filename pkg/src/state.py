"""
Progress shared between a long-running optimisation loop and its caller.
Single source of truth for step counters, latest losses and status.
"""

from typing import Optional


class TrainState:
    """Mutable state of a training run, updated once per iteration."""

    def __init__(self) -> None:
        self.step: int = 0
        self.total_steps: int = 0
        self.epoch: int = 0
        self.loss: Optional[float] = None
        self.batch_psnr: Optional[float] = None
        self.epoch_psnr: list[float] = []
        self.running: bool = False
        self.error: Optional[str] = None


class InversionState:
    """Mutable state of one test-time inversion."""

    def __init__(self) -> None:
        self.iteration: int = 0
        self.loss: Optional[float] = None
        self.best_loss: Optional[float] = None
        self.pose: Optional[dict] = None
        self.diverged: bool = False
        self.running: bool = False
        self.error: Optional[str] = None
