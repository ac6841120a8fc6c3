"""End-to-end helpers shared by the command line and the acceptance runs."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .attacks import AttackConfig, CollabState, attack_agent, with_replaced
from .cpsim import (DetectorModel, DetectorTrainConfig, Frame, SceneConfig, ViewConfig,
                    detections, fuse_and_decode, generate_scene, make_frame, train_detector)
from .guard import GuardModel, defend
from .metrics import average_precision_frames

TRAIN_SCENE_BASE = 1000
EVAL_SCENE_BASE = 1_000_000


def train_default_detector(config: DetectorTrainConfig = DetectorTrainConfig(),
                           n_scenes: int = 200, scene: SceneConfig = SceneConfig()) -> DetectorModel:
    scenes = [generate_scene(scene, TRAIN_SCENE_BASE + i) for i in range(n_scenes)]
    return train_detector(scenes, config).freeze()


def eval_frames(detector: DetectorModel, n_frames: int, n_agents, seed: int = 0,
                scene: SceneConfig = SceneConfig(), view: ViewConfig = ViewConfig(),
                max_offset: float = 12.0, agent_weights=None) -> list[Frame]:
    """Held-out frames; ``n_agents`` is a fixed count or a sequence sampled with ``agent_weights``."""
    rng = np.random.default_rng([seed, 17])
    out = []
    for i in range(n_frames):
        n = n_agents if isinstance(n_agents, int) else int(rng.choice(n_agents, p=agent_weights))
        sc = generate_scene(scene, EVAL_SCENE_BASE + 10_000 * seed + i)
        out.append(make_frame(sc, n, view, detector.config, seed=EVAL_SCENE_BASE + 7 * seed + i,
                              max_offset=max_offset))
    return out


@dataclass
class APOutcome:
    clean: dict
    attacked: dict
    defended: dict = field(default_factory=dict)
    flagged_attackers: int = 0
    flagged_benign: int = 0
    attackers: int = 0
    benign: int = 0


def _ap(preds, gts) -> dict:
    return {"ap_050": average_precision_frames(preds, gts, 0.5),
            "ap_070": average_precision_frames(preds, gts, 0.7)}


def attack_ap(detector: DetectorModel, frames: Sequence[Frame], attack: AttackConfig | None,
              seed: int = 0, guard: GuardModel | None = None, threshold: float | None = None) -> APOutcome:
    """AP of the clean, attacked and (with a guard) defended pipelines over ``frames``.

    One collaborator per frame is malicious, cycling through agent ids.
    """
    gts, clean, attacked, defended = [], [], [], []
    out = APOutcome({}, {})
    for i, frame in enumerate(frames):
        state = CollabState.from_frame(frame, detector)
        gts.append(frame.ground_truth())
        feats = state.features
        clean.append(detections(fuse_and_decode(feats[0], feats[1:], detector)))
        bad = feats[1 + i % (len(feats) - 1)].owner
        fm, _ = attack_agent(state, bad, attack, seed + i)
        hit = with_replaced(state, {bad: fm})
        attacked.append(detections(fuse_and_decode(hit[0], hit[1:], detector)))
        if guard is not None:
            props, verdicts = defend(hit[0], hit[1:], guard, detector, threshold)
            defended.append(detections(props))
            for f, v in zip(hit[1:], verdicts):
                if f.owner == bad:
                    out.attackers += 1
                    out.flagged_attackers += int(v)
                else:
                    out.benign += 1
                    out.flagged_benign += int(v)
    out.clean = _ap(clean, gts)
    out.attacked = _ap(attacked, gts)
    if guard is not None:
        out.defended = _ap(defended, gts)
    return out
