"""Toy collaborative-perception world.

A scene is a set of axis-aligned boxes on a square world.  Each agent sees
the world through a square occupancy window centred on its pose, masked to a
circular field of view.  Agents share one convolutional encoder; features
are shifted into the ego frame, averaged, and decoded by a dense per-cell
head (objectness + box regression).
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

OBJECT, BACKGROUND = 0, 1
LOG_SIZE_CLAMP = 3.0


class SceneError(RuntimeError):
    pass


class TrainingDiverged(RuntimeError):
    pass


class Box(NamedTuple):
    cx: float
    cy: float
    w: float
    h: float
    cls: int = 0

    def corners(self):
        return (self.cx - self.w / 2, self.cy - self.h / 2,
                self.cx + self.w / 2, self.cy + self.h / 2)

    def shifted(self, dx: float, dy: float) -> "Box":
        return self._replace(cx=self.cx + dx, cy=self.cy + dy)


def boxes_overlap(a: Box, b: Box) -> bool:
    """Positive-area intersection test on both axes."""
    return (abs(a.cx - b.cx) < (a.w + b.w) / 2) and (abs(a.cy - b.cy) < (a.h + b.h) / 2)


@dataclass(frozen=True)
class SceneConfig:
    world_size: float = 64.0
    min_objects: int = 3
    max_objects: int = 8
    min_box: float = 4.0
    max_box: float = 8.0


@dataclass(frozen=True)
class Scene:
    world_w: float
    world_h: float
    boxes: tuple
    seed: int


def generate_scene(config: SceneConfig, seed: int) -> Scene:
    rng = np.random.default_rng(seed)
    size = config.world_size
    n = int(rng.integers(config.min_objects, config.max_objects + 1))
    boxes: list[Box] = []
    for _ in range(n):
        for _attempt in range(1000):
            w, h = rng.uniform(config.min_box, config.max_box, size=2)
            cx = rng.uniform(w / 2, size - w / 2)
            cy = rng.uniform(h / 2, size - h / 2)
            cand = Box(float(cx), float(cy), float(w), float(h), 0)
            if not any(boxes_overlap(cand, b) for b in boxes):
                boxes.append(cand)
                break
        else:
            raise SceneError(f"could not place object {len(boxes) + 1} of {n} "
                             f"in a {size}x{size} world after 1000 tries")
    return Scene(size, size, tuple(boxes), seed)


# ---------------------------------------------------------------------------
# observation


@dataclass(frozen=True)
class ViewConfig:
    grid_size: int = 32
    fov_radius: float = 26.0
    noise_sigma: float = 0.05


@dataclass
class AgentView:
    agent_id: int
    pose: tuple
    fov_radius: float
    grid: Tensor
    window: float

    @property
    def origin(self) -> tuple:
        return (self.pose[0] - self.window / 2, self.pose[1] - self.window / 2)


def _cell_edges(origin: float, window: float, g: int) -> np.ndarray:
    return origin + np.arange(g + 1) * (window / g)


def fov_mask(pose, window: float, g: int, radius: float) -> np.ndarray:
    """Cells whose centre lies within ``radius`` of the pose."""
    ox, oy = pose[0] - window / 2, pose[1] - window / 2
    s = window / g
    centers = (np.arange(g) + 0.5) * s
    dx = ox + centers - pose[0]
    dy = oy + centers - pose[1]
    return (dy[:, None] ** 2 + dx[None, :] ** 2) <= radius ** 2


def box_cells(box: Box, pose, window: float, g: int) -> np.ndarray:
    ox, oy = pose[0] - window / 2, pose[1] - window / 2
    xe = _cell_edges(ox, window, g)
    ye = _cell_edges(oy, window, g)
    x1, y1, x2, y2 = box.corners()
    cols = (xe[:-1] < x2) & (xe[1:] > x1)
    rows = (ye[:-1] < y2) & (ye[1:] > y1)
    return rows[:, None] & cols[None, :]


def observe(scene: Scene, view_config: ViewConfig, agent_seed: int,
            pose=None, agent_id: int = 0) -> AgentView:
    """Noisy occupancy window of one agent.

    The window spans ``world_w`` units centred on ``pose`` (default: the
    world centre).  Gaussian noise is added inside the field of view and the
    result clamped to [0, 1]; cells outside the field of view are exactly 0.
    """
    if pose is None:
        pose = (scene.world_w / 2, scene.world_h / 2)
    if not (0 <= pose[0] <= scene.world_w and 0 <= pose[1] <= scene.world_h):
        raise ValueError(f"pose {pose} outside the world")
    g = view_config.grid_size
    window = scene.world_w
    occ = np.zeros((g, g), dtype=bool)
    for b in scene.boxes:
        occ |= box_cells(b, pose, window, g)
    fov = fov_mask(pose, window, g, view_config.fov_radius)
    grid = occ.astype(np.float64)
    if view_config.noise_sigma > 0:
        rng = np.random.default_rng(agent_seed)
        grid = np.clip(grid + rng.normal(0.0, view_config.noise_sigma, size=grid.shape), 0.0, 1.0)
    grid = np.where(fov, grid, 0.0)
    return AgentView(agent_id, (float(pose[0]), float(pose[1])), view_config.fov_radius,
                     Tensor(grid[None]), window)


# ---------------------------------------------------------------------------
# detector model


@dataclass(frozen=True)
class DetectorConfig:
    grid_size: int = 32
    channels: int = 16
    enc_hidden: int = 8
    dec_hidden: int = 32
    world_size: float = 64.0
    anchor: float = 6.0
    score_threshold: float = 0.5
    nms_iou: float = 0.3

    @property
    def feature_size(self) -> int:
        return self.grid_size // 2

    @property
    def feature_cell(self) -> float:
        return self.world_size / self.feature_size

    @property
    def feature_shape(self) -> tuple:
        return (self.channels, self.feature_size, self.feature_size)


_ENCODER = ("enc1_w", "enc1_b", "enc2_w", "enc2_b")
_DECODER = ("dec1_w", "dec1_b", "dec2_w", "dec2_b", "head_w", "head_b")


class DetectorModel:
    """Shared encoder plus decoder/head.  Parameters live in ``self.params``."""

    def __init__(self, config: DetectorConfig, params: dict):
        self.config = config
        self.params = params
        self.history: list[float] = []

    @classmethod
    def init(cls, config: DetectorConfig, seed: int = 0) -> "DetectorModel":
        rng = np.random.default_rng(seed)
        c, e, d = config.channels, config.enc_hidden, config.dec_hidden
        p = {
            "enc1_w": ad.he_normal(rng, (e, 1, 3, 3)),
            "enc1_b": ad.zeros_param((e,)),
            "enc2_w": ad.he_normal(rng, (c, e, 4, 4)),
            "enc2_b": ad.zeros_param((c,)),
            "dec1_w": ad.he_normal(rng, (d, c, 3, 3)),
            "dec1_b": ad.zeros_param((d,)),
            "dec2_w": ad.he_normal(rng, (d, d, 3, 3)),
            "dec2_b": ad.zeros_param((d,)),
            "head_w": ad.Tensor(rng.normal(0, 0.01, size=(6, d, 1, 1)), requires_grad=True),
            "head_b": ad.zeros_param((6,)),
        }
        return cls(config, p)

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in _ENCODER + _DECODER]

    def freeze(self) -> "DetectorModel":
        for p in self.params.values():
            p.requires_grad = False
        return self

    def copy(self) -> "DetectorModel":
        return DetectorModel(self.config, {k: Tensor(v.data, v.requires_grad)
                                           for k, v in self.params.items()})

    def encoder(self, grids: Tensor) -> Tensor:
        p = self.params
        h = ad.relu(ad.conv2d(grids, p["enc1_w"], p["enc1_b"], stride=1, pad=1))
        return ad.relu(ad.conv2d(h, p["enc2_w"], p["enc2_b"], stride=2, pad=1))

    def decoder(self, feats: Tensor) -> Tensor:
        p = self.params
        h = ad.relu(ad.conv2d(feats, p["dec1_w"], p["dec1_b"], pad=1))
        h = ad.relu(ad.conv2d(h, p["dec2_w"], p["dec2_b"], pad=1))
        return ad.conv2d(h, p["head_w"], p["head_b"])

    def save(self, path) -> None:
        save_checkpoint(path, "detector", asdict(self.config),
                        {k: self.params[k].data for k in _ENCODER + _DECODER})

    @classmethod
    def load(cls, path) -> "DetectorModel":
        cfg, params = load_checkpoint(path, "detector")
        return cls(DetectorConfig(**cfg), {k: Tensor(v) for k, v in params.items()})


# ---------------------------------------------------------------------------
# pipeline steps


@dataclass
class FeatureMap:
    data: Tensor
    owner: int
    out_of_range: bool = False

    @property
    def shape(self) -> tuple:
        return self.data.shape


def encode(view: AgentView, model: DetectorModel) -> FeatureMap:
    g = model.config.grid_size
    if view.grid.shape != (1, g, g):
        raise ValueError(f"grid shape {view.grid.shape} does not match model (1, {g}, {g})")
    return FeatureMap(model.encoder(view.grid), view.agent_id)


def pose_offset_cells(from_pose, to_pose, cell_size: float) -> tuple[int, int]:
    dr = int(round((from_pose[1] - to_pose[1]) / cell_size))
    dc = int(round((from_pose[0] - to_pose[0]) / cell_size))
    return dr, dc


def transmit(feature: FeatureMap, from_pose, to_pose, cell_size: float) -> FeatureMap:
    """Re-express a feature map in the receiver's frame by an integer cell shift."""
    dr, dc = pose_offset_cells(from_pose, to_pose, cell_size)
    h, w = feature.shape[-2:]
    if abs(dr) >= h or abs(dc) >= w:
        return FeatureMap(Tensor(np.zeros(feature.shape)), feature.owner, out_of_range=True)
    return FeatureMap(ad.shift2d(feature.data, dr, dc), feature.owner)


def fuse_mean(ego: FeatureMap, others: Sequence[FeatureMap]) -> FeatureMap:
    maps = [ego, *others]
    for m in others:
        if m.shape != ego.shape:
            raise ValueError(f"feature shape mismatch: {m.shape} vs {ego.shape}")
    return FeatureMap(ad.sort_mean([m.data for m in maps]), ego.owner)


@dataclass
class HeadOutput:
    """Dense per-cell predictions; ``scores`` and ``boxes`` stay on the tape."""

    scores: Tensor      # P x 2 softmax over (object, background)
    boxes: Tensor       # P x 4 (cx, cy, w, h) in the ego window frame
    cells: np.ndarray   # P x 2 (row, col)

    def detach(self) -> "HeadOutput":
        return HeadOutput(self.scores.detach(), self.boxes.detach(), self.cells)


@dataclass
class Proposal:
    cell: tuple
    scores: np.ndarray
    box: tuple
    confidence: float

    @property
    def object_score(self) -> float:
        return float(self.scores[OBJECT])


def _cell_grid(h: int, w: int) -> np.ndarray:
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return np.stack([rr.ravel(), cc.ravel()], axis=1)


def head_to_output(raw: Tensor, config: DetectorConfig) -> HeadOutput:
    """Turn raw head activations (6 x H x W, or batched) into scores and boxes."""
    if raw.ndim == 3:
        raw = ad.reshape(raw, (1,) + raw.shape)
    n, _, h, w = raw.shape
    flat = ad.reshape(ad.transpose(raw, (0, 2, 3, 1)), (n * h * w, 6))
    scores = ad.softmax(flat[:, 0:2], axis=1)
    cells = np.tile(_cell_grid(h, w), (n, 1))
    s = config.feature_cell
    col_c = Tensor(cells[:, 1] + 0.5)
    row_c = Tensor(cells[:, 0] + 0.5)
    cx = (flat[:, 2] + col_c) * s
    cy = (flat[:, 3] + row_c) * s
    bw = ad.exp(ad.clamp(flat[:, 4], -LOG_SIZE_CLAMP, LOG_SIZE_CLAMP)) * config.anchor
    bh = ad.exp(ad.clamp(flat[:, 5], -LOG_SIZE_CLAMP, LOG_SIZE_CLAMP)) * config.anchor
    return HeadOutput(scores, ad.stack([cx, cy, bw, bh], axis=1), cells)


def decode_dense(fused: Tensor, model: DetectorModel) -> HeadOutput:
    return head_to_output(model.decoder(fused), model.config)


def to_proposals(head: HeadOutput) -> list[Proposal]:
    scores = head.scores.data
    boxes = head.boxes.data
    return [Proposal((int(r), int(c)), scores[i].copy(), tuple(float(v) for v in boxes[i]),
                     float(scores[i].max()))
            for i, (r, c) in enumerate(head.cells)]


def decode(fused: FeatureMap, model: DetectorModel) -> list[Proposal]:
    """One proposal per output cell, unfiltered."""
    c = model.config
    if fused.shape != c.feature_shape:
        raise ValueError(f"fused shape {fused.shape} does not match {c.feature_shape}")
    return to_proposals(decode_dense(fused.data, model))


def box_iou(a, b) -> float:
    ax1, ay1, ax2, ay2 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx1, by1, bx2, by2 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def detections(proposals: Sequence[Proposal], threshold: float = 0.5,
               nms_iou: float | None = 0.3) -> list[Proposal]:
    """Proposals whose object score clears ``threshold``, greedily de-duplicated."""
    kept = sorted((p for p in proposals if p.object_score >= threshold),
                  key=lambda p: -p.object_score)
    if nms_iou is None:
        return kept
    out: list[Proposal] = []
    for p in kept:
        if all(box_iou(p.box, q.box) <= nms_iou for q in out):
            out.append(p)
    return out


# ---------------------------------------------------------------------------
# multi-agent frames


@dataclass
class Frame:
    scene: Scene
    views: list          # views[0] is the ego agent
    config: DetectorConfig

    @property
    def ego(self) -> AgentView:
        return self.views[0]

    def to_ego_frame(self, box: Box) -> Box:
        ox, oy = self.ego.origin
        return box.shifted(-ox, -oy)

    def visible(self, box: Box, agent_ids=None) -> bool:
        g = self.config.grid_size
        for v in self.views:
            if agent_ids is not None and v.agent_id not in agent_ids:
                continue
            cells = box_cells(box, v.pose, v.window, g)
            if np.any(cells & fov_mask(v.pose, v.window, g, v.fov_radius)):
                return True
        return False

    def ground_truth(self, agent_ids=None) -> list[Box]:
        """Boxes (ego-window coordinates) centred in the ego window and seen by some agent."""
        win = self.ego.window
        out = []
        for b in self.scene.boxes:
            local = self.to_ego_frame(b)
            if 0 <= local.cx < win and 0 <= local.cy < win and self.visible(b, agent_ids):
                out.append(local)
        return out


def sample_poses(n_agents: int, world: float, cell: float, max_offset: float,
                 rng: np.random.Generator) -> list[tuple]:
    """Distinct agent poses on the feature-cell lattice around the world centre."""
    steps = int(max_offset // cell)
    lattice = [(i, j) for i in range(-steps, steps + 1) for j in range(-steps, steps + 1)]
    if n_agents > len(lattice):
        raise ValueError(f"cannot place {n_agents} agents on {len(lattice)} lattice points")
    pick = rng.choice(len(lattice), size=n_agents, replace=False)
    c = world / 2
    return [(c + lattice[k][1] * cell, c + lattice[k][0] * cell) for k in pick]


def make_frame(scene: Scene, n_agents: int, view_config: ViewConfig, config: DetectorConfig,
               seed: int, max_offset: float = 12.0) -> Frame:
    rng = np.random.default_rng([seed, 7])
    poses = sample_poses(n_agents, scene.world_w, config.feature_cell, max_offset, rng)
    noise_seeds = rng.integers(0, 2**31, size=n_agents)
    views = [observe(scene, view_config, int(noise_seeds[i]), pose=poses[i], agent_id=i)
             for i in range(n_agents)]
    return Frame(scene, views, config)


def frame_features(frame: Frame, model: DetectorModel) -> list[FeatureMap]:
    """Encode every agent and move its features into the ego frame (no gradient)."""
    ego = frame.ego
    cell = model.config.feature_cell
    with ad.no_grad():
        grids = Tensor(np.stack([v.grid.data for v in frame.views]))
        feats = model.encoder(grids).data
    out = []
    for i, v in enumerate(frame.views):
        fm = FeatureMap(Tensor(feats[i]), v.agent_id)
        out.append(fm if i == 0 else transmit(fm, v.pose, ego.pose, cell))
    return out


def fuse_and_decode(ego: FeatureMap, others: Sequence[FeatureMap], model: DetectorModel,
                    counter=None) -> list[Proposal]:
    if counter is not None:
        counter["fuse_decode"] += 1
    with ad.no_grad():
        return decode(fuse_mean(ego, others), model)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class DetectorTrainConfig:
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    n_agents: int = 4
    max_offset: float = 12.0
    collab_dropout: float = 0.3
    pos_weight: float = 4.0
    seed: int = 0
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    view: ViewConfig = field(default_factory=ViewConfig)


def box_targets(gt: Sequence[Box], config: DetectorConfig):
    """Per-cell class labels plus regression targets for the positive cells."""
    hs = config.feature_size
    s = config.feature_cell
    labels = np.full(hs * hs, BACKGROUND, dtype=np.intp)
    pos, reg = [], []
    for b in gt:
        c = int(math.floor(b.cx / s))
        r = int(math.floor(b.cy / s))
        if not (0 <= r < hs and 0 <= c < hs):
            continue
        idx = r * hs + c
        labels[idx] = OBJECT
        pos.append(idx)
        reg.append([b.cx / s - (c + 0.5), b.cy / s - (r + 0.5),
                    math.log(b.w / config.anchor), math.log(b.h / config.anchor)])
    return labels, np.asarray(pos, dtype=np.intp), np.asarray(reg, dtype=np.float32).reshape(-1, 4)


def smooth_l1(x: Tensor) -> Tensor:
    a = ad.tabs(x)
    m = ad.clamp(a, 0.0, 1.0)
    return m * m * 0.5 + a - m


def detection_loss(raw: Tensor, labels: np.ndarray, pos: np.ndarray, reg: np.ndarray,
                   pos_weight: float = 1.0) -> Tensor:
    """Cell objectness cross-entropy plus smooth-L1 box regression on positive cells."""
    n, _, h, w = raw.shape
    flat = ad.reshape(ad.transpose(raw, (0, 2, 3, 1)), (n * h * w, 6))
    weights = np.where(labels == OBJECT, pos_weight, 1.0)
    loss = ad.softmax_cross_entropy(flat[:, 0:2], labels, weights)
    if len(pos):
        diff = flat[pos, 2:6] - Tensor(reg)
        loss = loss + smooth_l1(diff).sum() / float(len(pos))
    return loss


def _frame_batch(frames: Sequence[Frame], model: DetectorModel, keep: list[list[int]]) -> Tensor:
    """Differentiable fused features for a batch of frames and kept-agent lists."""
    cfg = model.config
    grids = Tensor(np.stack([v.grid.data for f in frames for v in f.views]))
    feats = model.encoder(grids)
    fused, k = [], 0
    for f, kept in zip(frames, keep):
        maps = []
        for i, v in enumerate(f.views):
            if i in kept:
                fm = feats[k + i]
                if i:
                    dr, dc = pose_offset_cells(v.pose, f.ego.pose, cfg.feature_cell)
                    fm = ad.shift2d(fm, dr, dc)
                maps.append(fm)
        k += len(f.views)
        fused.append(ad.sort_mean(maps))
    return ad.stack(fused)


def train_detector(scenes: Sequence[Scene], config: DetectorTrainConfig) -> DetectorModel:
    """Fit encoder and decoder jointly on mean-fused features of benign agents.

    Each step keeps the ego and drops every collaborator independently with
    probability ``collab_dropout``, so the head sees fusions of varying size.
    """
    if not scenes:
        raise ValueError("need at least one training scene")
    model = DetectorModel.init(config.detector, config.seed)
    frames = [make_frame(s, config.n_agents, config.view, config.detector,
                         seed=config.seed * 100003 + i, max_offset=config.max_offset)
              for i, s in enumerate(scenes)]
    rng = np.random.default_rng([config.seed, 11])
    state = ad.OptimState(config.learning_rate, kind=config.optimizer)
    params = model.parameters()
    for epoch in range(config.epochs):
        order = rng.permutation(len(frames))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = [frames[i] for i in order[start:start + config.batch_size]]
            keep, labels, pos, reg = [], [], [], []
            hw = config.detector.feature_size ** 2
            for b, f in enumerate(batch):
                kept = [0] + [i for i in range(1, len(f.views)) if rng.random() >= config.collab_dropout]
                keep.append(kept)
                lab, p, r = box_targets(f.ground_truth(set(kept)), config.detector)
                labels.append(lab)
                pos.append(p + b * hw)
                reg.append(r)
            fused = _frame_batch(batch, model, keep)
            raw = model.decoder(fused)
            loss = detection_loss(raw, np.concatenate(labels), np.concatenate(pos),
                                  np.concatenate(reg), config.pos_weight)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"detector loss became {value} at epoch {epoch}, "
                                       f"step {start // config.batch_size}")
            grads = ad.backward(loss)
            ad.sgd_step(params, [grads.get(p) for p in params], state)
            losses.append(value)
        model.history.append(float(np.mean(losses)))
        log.info("detector epoch %d loss %.4f", epoch, model.history[-1])
    return model


def predict_frame(frame: Frame, model: DetectorModel, agent_ids=None) -> list[Proposal]:
    feats = frame_features(frame, model)
    others = [f for f in feats[1:] if agent_ids is None or f.owner in agent_ids]
    return fuse_and_decode(feats[0], others, model)
