"""Feature-space attacks by a malicious collaborator.

The attacker owns one transmitted feature map ``F`` and searches for a
perturbation ``delta`` with ``max|delta| <= budget`` that maximises the
class-specific adversarial objective summed over every proposal of the ego
detector.  The detector is frozen; only ``delta`` carries a gradient.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cpsim import (BACKGROUND, DetectorModel, FeatureMap, Frame, HeadOutput,
                    decode_dense, frame_features)

PROB_EPS = 1e-6


class AttackType(enum.IntEnum):
    PGD = 1
    BIM = 2
    CW = 3
    FGSM = 4
    GN = 5


GRADIENT_ATTACKS = (AttackType.PGD, AttackType.BIM, AttackType.CW, AttackType.FGSM)
BUDGET_GRID = (0.1, 0.25, 0.5, 0.75, 1.0)


@dataclass(frozen=True)
class AttackConfig:
    attack_type: AttackType | None
    budget: float = 0.5
    steps: int = 15
    step_size: float = 0.1
    tau1: float = 0.7
    tau2: float = 0.9
    lam: float = 0.1
    background_class: int = BACKGROUND
    sign_flip: bool = False
    cw_c: float = 0.01

    def __post_init__(self):
        if self.attack_type is not None and not isinstance(self.attack_type, AttackType):
            object.__setattr__(self, "attack_type", AttackType[str(self.attack_type).upper()])
        if self.budget < 0:
            raise ValueError("budget must be non-negative")
        if not (0 < self.tau1 < 1 and 0 < self.tau2 < 1):
            raise ValueError("tau1 and tau2 must lie in (0, 1)")
        if self.steps < 1:
            raise ValueError("steps must be positive")
        if self.attack_type == AttackType.FGSM:
            object.__setattr__(self, "steps", 1)
        if self.attack_type in (AttackType.PGD, AttackType.BIM):
            if self.step_size <= 0 or (self.budget > 0 and self.step_size > self.budget):
                raise ValueError(f"step_size must lie in (0, budget]; got {self.step_size} "
                                 f"for budget {self.budget}")


@dataclass
class Perturbation:
    delta: np.ndarray
    loss: float             # objective at the returned delta
    iterations: int
    best_loss: float | None = None
    zero_gradient: bool = False


def budget_bound(budget: float) -> np.float32:
    """Largest float32 not exceeding ``budget``, so clipping never overshoots it."""
    b = np.float32(budget)
    if float(b) > budget:
        b = np.nextafter(b, np.float32(0))
    return b


def clip_budget(delta: np.ndarray, budget: float) -> np.ndarray:
    b = budget_bound(budget)
    return np.clip(delta, -b, b).astype(np.float32)


# ---------------------------------------------------------------------------
# objective


def iou_tensor(a: Tensor, b: np.ndarray) -> Tensor:
    """Row-wise IoU between differentiable boxes ``a`` and fixed boxes ``b`` (cx, cy, w, h)."""
    b = np.asarray(b, dtype=np.float32)
    ax1 = a[:, 0] - a[:, 2] * 0.5
    ax2 = a[:, 0] + a[:, 2] * 0.5
    ay1 = a[:, 1] - a[:, 3] * 0.5
    ay2 = a[:, 1] + a[:, 3] * 0.5
    bx1, bx2 = Tensor(b[:, 0] - b[:, 2] / 2), Tensor(b[:, 0] + b[:, 2] / 2)
    by1, by2 = Tensor(b[:, 1] - b[:, 3] / 2), Tensor(b[:, 1] + b[:, 3] / 2)
    iw = ad.relu(ad.minimum(ax2, bx2) - ad.maximum(ax1, bx1))
    ih = ad.relu(ad.minimum(ay2, by2) - ad.maximum(ay1, by1))
    inter = iw * ih
    union = a[:, 2] * a[:, 3] + Tensor(b[:, 2] * b[:, 3]) - inter
    return inter / union


def adv_loss_terms(perturbed_scores: Tensor, clean_scores: np.ndarray, eta,
                   config: AttackConfig) -> Tensor:
    """Per-proposal adversarial terms (vector).

    ``c`` is the clean argmax class.  Foreground proposals confident above
    ``tau1`` contribute ``-log(1 - p'_c) * eta``; background proposals above
    ``tau2`` contribute ``-lam * p'_c * log(1 - p'_c)``; the rest contribute 0.
    """
    clean = np.asarray(clean_scores)
    n = clean.shape[0]
    if perturbed_scores.shape != clean.shape:
        raise ValueError(f"misaligned proposals: {perturbed_scores.shape} vs {clean.shape}")
    rows = np.arange(n)
    c = np.argmax(clean, axis=1)
    pc = clean[rows, c]
    k = config.background_class
    fg = ((c != k) & (pc > config.tau1)).astype(np.float32)
    bg = ((c == k) & (pc > config.tau2)).astype(np.float32)
    p = ad.clamp(perturbed_scores[rows, c], PROB_EPS, 1 - PROB_EPS)
    log1m = ad.log(1.0 - p)
    eta = ad.as_tensor(eta)
    return -(log1m * eta) * Tensor(fg) - (p * log1m) * Tensor(bg * config.lam)


def adv_loss(perturbed: HeadOutput, clean: HeadOutput, config: AttackConfig) -> Tensor:
    if perturbed.scores.shape != clean.scores.shape or not np.array_equal(perturbed.cells, clean.cells):
        raise ValueError("perturbed and clean proposals are not cell-aligned")
    eta = iou_tensor(perturbed.boxes, clean.boxes.data)
    return ad.tsum(adv_loss_terms(perturbed.scores, clean.scores.data, eta, config))


# ---------------------------------------------------------------------------
# victim pipeline


@dataclass
class CollabState:
    """Ego-frame features of every agent around one ego, plus the frozen detector."""

    model: DetectorModel
    features: list      # FeatureMap per agent; features[0] is the ego's own

    @classmethod
    def from_frame(cls, frame: Frame, model: DetectorModel) -> "CollabState":
        return cls(model, frame_features(frame, model))

    @property
    def ego_id(self) -> int:
        return self.features[0].owner

    def index_of(self, agent_id: int) -> int:
        for i, f in enumerate(self.features):
            if f.owner == agent_id:
                return i
        raise KeyError(f"no agent {agent_id} in this frame")


class VictimPipeline:
    """fuse -> decode as a function of the perturbation on one collaborator's map."""

    def __init__(self, state: CollabState, target_index: int):
        if target_index == 0:
            raise ValueError("the ego agent cannot be the attacker")
        self.state = state
        self.target_index = target_index
        self.target = state.features[target_index].data.data
        with ad.no_grad():
            self.clean = self(Tensor(np.zeros_like(self.target))).detach()

    def __call__(self, delta: Tensor) -> HeadOutput:
        maps = [f.data for f in self.state.features]
        maps[self.target_index] = Tensor(self.target) + delta
        return decode_dense(ad.sort_mean(maps), self.state.model)

    def objective(self, delta: np.ndarray, config: AttackConfig, with_grad: bool = True):
        d = Tensor(delta, requires_grad=with_grad)
        if not with_grad:
            with ad.no_grad():
                val = adv_loss(self(d), self.clean, config)
            return (-val.item() if config.sign_flip else val.item()), None
        val = adv_loss(self(d), self.clean, config)
        if config.sign_flip:
            val = -val
        return val.item(), ad.backward(val)[d]


# ---------------------------------------------------------------------------
# generators


def fgsm(pipeline: VictimPipeline, config: AttackConfig) -> Perturbation:
    _, g = pipeline.objective(np.zeros_like(pipeline.target), config)
    delta = clip_budget(np.float32(config.budget) * np.sign(g), config.budget)
    loss, _ = pipeline.objective(delta, config, with_grad=False)
    return Perturbation(delta, loss, 1, loss, zero_gradient=not np.any(g))


def _sign_ascent(pipeline: VictimPipeline, config: AttackConfig, delta: np.ndarray) -> Perturbation:
    best, any_grad = -np.inf, False
    for _ in range(config.steps):
        val, g = pipeline.objective(delta, config)
        best = max(best, val)
        any_grad |= bool(np.any(g))
        delta = clip_budget(delta + np.float32(config.step_size) * np.sign(g), config.budget)
    loss, _ = pipeline.objective(delta, config, with_grad=False)
    return Perturbation(delta, loss, config.steps, max(best, loss), zero_gradient=not any_grad)


def pgd(pipeline: VictimPipeline, config: AttackConfig, seed: int = 0) -> Perturbation:
    rng = np.random.default_rng(seed)
    b = float(budget_bound(config.budget))
    start = rng.uniform(-b, b, size=pipeline.target.shape).astype(np.float32)
    return _sign_ascent(pipeline, config, clip_budget(start, config.budget))


def bim(pipeline: VictimPipeline, config: AttackConfig) -> Perturbation:
    return _sign_ascent(pipeline, config, np.zeros_like(pipeline.target))


def cw(pipeline: VictimPipeline, config: AttackConfig) -> Perturbation:
    """Penalised first-order ascent on ``objective - c * ||delta||^2``, clipped at the end.

    Steps follow Adam moment scaling with ``step_size`` as the learning rate.
    """
    delta = Tensor(np.zeros_like(pipeline.target))
    state = ad.OptimState(config.step_size, kind="adam")
    c2 = np.float32(2 * config.cw_c)
    best, any_grad = -np.inf, False
    for _ in range(config.steps):
        val, g = pipeline.objective(delta.data, config)
        best = max(best, val)
        any_grad |= bool(np.any(g))
        # the optimizer descends, so feed it the negated ascent direction
        ad.sgd_step([delta], [-(g - c2 * delta.data)], state)
    out = clip_budget(delta.data, config.budget)
    loss, _ = pipeline.objective(out, config, with_grad=False)
    return Perturbation(out, loss, config.steps, max(best, loss), zero_gradient=not any_grad)


def gn(shape: Sequence[int], config: AttackConfig, seed: int) -> Perturbation:
    rng = np.random.default_rng(seed)
    delta = rng.normal(0.0, config.budget / 2, size=tuple(shape))
    return Perturbation(clip_budget(delta, config.budget), float("nan"), 0)


def run_attack(pipeline: VictimPipeline, config: AttackConfig, seed: int = 0) -> Perturbation:
    t = config.attack_type
    if t == AttackType.PGD:
        return pgd(pipeline, config, seed)
    if t == AttackType.BIM:
        return bim(pipeline, config)
    if t == AttackType.CW:
        return cw(pipeline, config)
    if t == AttackType.FGSM:
        return fgsm(pipeline, config)
    if t == AttackType.GN:
        pert = gn(pipeline.target.shape, config, seed)
        pert.loss, _ = pipeline.objective(pert.delta, config, with_grad=False)
        pert.best_loss = pert.loss
        return pert
    raise ValueError(f"unknown attack type {t!r}")


def attack_agent(state: CollabState, malicious_agent_id: int, config: AttackConfig | None,
                 seed: int = 0) -> tuple[FeatureMap, Perturbation]:
    """Perturb one collaborator's transmitted map; the state itself is left untouched."""
    if malicious_agent_id == state.ego_id:
        raise ValueError("the ego agent cannot be malicious")
    idx = state.index_of(malicious_agent_id)
    target = state.features[idx]
    if config is None or config.attack_type is None:
        return target, Perturbation(np.zeros(target.shape, dtype=np.float32), 0.0, 0)
    if config.attack_type not in AttackType.__members__.values():
        raise ValueError(f"unknown attack type {config.attack_type!r}")
    pipeline = VictimPipeline(state, idx)
    pert = run_attack(pipeline, config, seed)
    data = (target.data.data + pert.delta).astype(np.float32)
    return FeatureMap(Tensor(data), target.owner), pert


def with_replaced(state: CollabState, replacements: dict) -> list:
    """Copy of ``state.features`` with some agents' maps swapped (agent id -> FeatureMap)."""
    return [replacements.get(f.owner, f) for f in state.features]


def config_for(attack_type, budget: float, **kw) -> AttackConfig:
    return AttackConfig(attack_type=attack_type, budget=budget, **kw)
