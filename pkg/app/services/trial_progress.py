from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional


class TrialPhase(str, Enum):
    IDLE = "idle"
    RUNNING = "running"
    AGGREGATING = "aggregating"
    DONE = "done"
    FAILED = "failed"


@dataclass(frozen=True)
class CurveTally:
    label: str
    total: int
    finished: int = 0

    @property
    def complete(self) -> bool:
        return self.finished >= self.total


@dataclass(frozen=True)
class TrialProgressSnapshot:
    phase: TrialPhase
    experiment: Optional[str]
    total_trials: int
    finished_trials: int
    elapsed_s: float
    eta_s: Optional[float]
    curves: tuple[CurveTally, ...] = ()
    message: Optional[str] = None

    def curve(self, label: str) -> Optional[CurveTally]:
        return next((item for item in self.curves if item.label == label), None)

    def describe(self) -> str:
        text = f"{self.finished_trials}/{self.total_trials} 次试验，已用 {self.elapsed_s:.1f}s"
        if self.eta_s is not None:
            text += f"，预计剩余 {self.eta_s:.1f}s"
        return text


@dataclass
class _Batch:
    experiment: str
    total: int
    started: float
    curves: dict[str, CurveTally] = field(default_factory=dict)
    finished: int = 0


class TrialProgress:
    """一次实验的试验计数：总数、各曲线完成数与按平均耗时外推的剩余时间。

    试验在线程池中完成，tick() 可能被并发调用。
    """

    def __init__(self, clock: Callable[[], float] = time.monotonic) -> None:
        self._clock = clock
        self._lock = threading.Lock()
        self._phase = TrialPhase.IDLE
        self._batch: Optional[_Batch] = None
        self._message: Optional[str] = None

    def start(self, *, experiment: str, total_trials: int) -> None:
        with self._lock:
            self._phase = TrialPhase.RUNNING
            self._batch = _Batch(experiment=experiment, total=max(int(total_trials or 0), 0), started=self._clock())
            self._message = None

    def begin_curve(self, label: str, trials: int) -> None:
        with self._lock:
            if self._batch is not None:
                self._batch.curves[label] = CurveTally(label=label, total=max(int(trials), 0))

    def tick(self, label: Optional[str] = None) -> None:
        with self._lock:
            batch = self._batch
            if self._phase is not TrialPhase.RUNNING or batch is None:
                return
            batch.finished += 1
            tally = batch.curves.get(label) if label is not None else None
            if tally is not None:
                batch.curves[label] = CurveTally(label=label, total=tally.total, finished=tally.finished + 1)

    def set_aggregating(self) -> None:
        with self._lock:
            if self._phase is TrialPhase.RUNNING:
                self._phase = TrialPhase.AGGREGATING

    def done(self, message: Optional[str] = None) -> None:
        with self._lock:
            self._phase = TrialPhase.DONE
            self._message = message

    def fail(self, message: str) -> None:
        with self._lock:
            self._phase = TrialPhase.FAILED
            self._message = message

    def snapshot(self) -> TrialProgressSnapshot:
        with self._lock:
            batch = self._batch
            if batch is None:
                return TrialProgressSnapshot(
                    phase=self._phase,
                    experiment=None,
                    total_trials=0,
                    finished_trials=0,
                    elapsed_s=0.0,
                    eta_s=None,
                    message=self._message,
                )
            elapsed = max(self._clock() - batch.started, 0.0)
            eta: Optional[float] = None
            if self._phase is TrialPhase.DONE:
                eta = 0.0
            elif self._phase is TrialPhase.RUNNING and batch.finished > 0:
                eta = elapsed / batch.finished * max(batch.total - batch.finished, 0)
            return TrialProgressSnapshot(
                phase=self._phase,
                experiment=batch.experiment,
                total_trials=batch.total,
                finished_trials=batch.finished,
                elapsed_s=elapsed,
                eta_s=eta,
                curves=tuple(batch.curves.values()),
                message=self._message,
            )


_TRIAL_PROGRESS = TrialProgress()


def get_trial_progress() -> TrialProgress:
    return _TRIAL_PROGRESS
