"""Throughput measurement and leave-one-attack-out generalisation runs."""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .attacks import AttackType
from .guard import GuardConfig, evaluate, train_guard
from .metrics import MetricsReport


class TimingError(RuntimeError):
    pass


@dataclass
class FPSResult:
    fps: float                  # median over repetitions
    repetitions: list
    frames: int


def fps_benchmark(pipeline_fn: Callable, frames: Sequence, warmup: int = 5,
                  repetitions: int = 5, clock: Callable[[], float] = time.perf_counter) -> FPSResult:
    """Frames per second of ``pipeline_fn`` over ``frames``, median of ``repetitions`` runs.

    The first ``warmup`` frames are processed once beforehand and not timed.
    Runs in the calling thread only.
    """
    if warmup < 5:
        raise ValueError(f"warmup must be at least 5 frames, got {warmup}")
    if len(frames) < 30:
        raise ValueError(f"need at least 30 timed frames, got {len(frames)}")
    if repetitions < 1:
        raise ValueError("repetitions must be positive")
    for f in frames[:warmup]:
        pipeline_fn(f)
    rates = []
    for _ in range(repetitions):
        t0 = clock()
        for f in frames:
            pipeline_fn(f)
        elapsed = clock() - t0
        if elapsed <= 0:
            raise TimingError("elapsed time is zero; the clock cannot resolve this workload")
        rates.append(len(frames) / elapsed)
    return FPSResult(statistics.median(rates), rates, len(frames))


GRADIENT_TYPES = (AttackType.PGD, AttackType.BIM, AttackType.CW)


def _report(ev, digest: str, **extra) -> MetricsReport:
    return MetricsReport.from_counts(ev.counts, config_digest=digest, extra=dict(extra))


def leave_one_out(dataset, guard_config: GuardConfig = GuardConfig(), seed: int = 0,
                  attack_types: Sequence[AttackType] = tuple(AttackType), split: str = "test") -> dict:
    """Train with each attack type withheld and test on it; also train the all-types upper bound.

    Returns ``{name: MetricsReport}`` for every held-out type plus
    ``"upper_bound"``, whose ``per_attack`` holds its accuracy on each
    type-specific test subset (benign records plus that attack).
    """
    codes = dataset.attack_types
    train = dataset.indices("train")
    missing = [t.name for t in attack_types if not np.any(codes[train] == int(t))]
    if missing:
        raise ValueError(f"training split lacks attack types {missing}")
    digest = dataset.manifest.config_digest
    out = {}
    for t in attack_types:
        model = train_guard(dataset, guard_config, seed, exclude_attacks=[int(t)], validate=False)
        ev = evaluate(model, dataset, split, attack_types=[int(t)])
        out[t.name] = _report(ev, digest, held_out=t.name, train_records=int(
            np.sum(~np.isin(codes[train], [int(t)]))))
    full = train_guard(dataset, guard_config, seed, validate=False)
    ub = _report(evaluate(full, dataset, split), digest, held_out=None)
    for t in attack_types:
        ub.per_attack[t.name] = evaluate(full, dataset, split, attack_types=[int(t)]).counts.rates()
    out["upper_bound"] = ub
    return out
