"""Hypothesize-and-verify consensus defence used as the comparison baseline.

Random subsets of collaborators are fused with the ego map and decoded; a
subset is accepted when its detections agree with the ego-only detections.
Every hypothesis costs a full fuse + decode, which is exactly the overhead the
feature-level guard avoids.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .cpsim import DetectorModel, FeatureMap, box_iou, detections, fuse_and_decode


@dataclass(frozen=True)
class BaselineConfig:
    subset_size: int | None = None      # None: one fewer than the collaborator count
    max_attempts: int = 10
    iou_threshold: float = 0.5


@dataclass
class BaselineResult:
    verdicts: list
    proposals: list
    attempts: int
    scores: list = field(default_factory=list)


def consensus_score(candidate, reference) -> float:
    """Mean best-match IoU of each reference detection against the candidate set.

    An empty reference is vacuously consistent (1.0).
    """
    if not reference:
        return 1.0
    if not candidate:
        return 0.0
    return float(np.mean([max(box_iou(r.box, c.box) for c in candidate) for r in reference]))


def consensus_baseline(ego: FeatureMap, collaborators: Sequence[FeatureMap], detector: DetectorModel,
                       config: BaselineConfig = BaselineConfig(), seed: int = 0,
                       counter: Counter | None = None) -> BaselineResult:
    """Sample, fuse, verify; flag collaborators that never sit in an accepted subset.

    Sampling favours collaborators not yet covered by an accepted subset and
    stops once every collaborator is covered or ``max_attempts`` is spent.
    """
    counter = Counter() if counter is None else counter
    n = len(collaborators)
    if config.subset_size is None:
        k = max(n - 1, 1)
    else:
        k = config.subset_size
        if n and not 0 < k < n:
            raise ValueError(f"subset size {k} must lie in [1, {n - 1}] for {n} collaborators")
    reference = detections(fuse_and_decode(ego, [], detector, counter))
    rng = np.random.default_rng(seed)
    covered: set[int] = set()
    scores = []
    attempts = 0
    while attempts < config.max_attempts and len(covered) < n:
        fresh = [i for i in range(n) if i not in covered]
        rest = [i for i in range(n) if i in covered]
        take = list(rng.permutation(fresh)[:k])
        if len(take) < k:
            take += list(rng.permutation(rest)[:k - len(take)])
        subset = sorted(int(i) for i in take)
        props = detections(fuse_and_decode(ego, [collaborators[i] for i in subset], detector, counter))
        score = consensus_score(props, reference)
        scores.append(score)
        attempts += 1
        if score >= config.iou_threshold:
            covered.update(subset)
    verdicts = [i not in covered for i in range(n)]
    kept = [c for c, bad in zip(collaborators, verdicts) if not bad]
    proposals = fuse_and_decode(ego, kept, detector, counter) if kept else \
        fuse_and_decode(ego, [], detector, counter)
    return BaselineResult(verdicts, proposals, attempts, scores)
