"""Labelled benign/malicious feature pairs and their on-disk shard format.

Each frame puts agent 0 in the ego role.  Some collaborators are chosen as
attackers and perturb their transmitted map with a randomly chosen attack.
One record is emitted per (ego, collaborator) pair.

Shard file layout (all little-endian)::

    header   8s magic b"CPGBSHRD" | u16 version | u16 header bytes (28)
             | u32 C | u32 H | u32 W | u32 record count
    records  u32 scene_id | u32 ego_id | u32 collab_id | u8 label
             | u8 attack_type | u16 pad (0) | f32 budget
             | f32[C*H*W] ego feature | f32[C*H*W] collaborator feature

``manifest.json`` next to the shards carries ``format``, ``version``,
``dims``, ``count``, ``record_size``, ``shards`` (file + count), ``splits``
(half-open index ranges over the concatenated shards), ``config_digest``,
``generation`` and ``stats``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .attacks import BUDGET_GRID, AttackConfig, AttackType, CollabState, attack_agent
from .cpsim import DetectorModel, SceneConfig, ViewConfig, generate_scene, make_frame

log = logging.getLogger(__name__)

MAGIC = b"CPGBSHRD"
VERSION = 1
HEADER = struct.Struct("<8sHHIIII")
ATTACK_NAMES = {0: "none", **{int(t): t.name for t in AttackType}}


class ShardFormatError(ValueError):
    pass


def record_dtype(dims: Sequence[int]) -> np.dtype:
    dims = tuple(int(d) for d in dims)
    return np.dtype([
        ("scene_id", "<u4"), ("ego_id", "<u4"), ("collab_id", "<u4"),
        ("label", "u1"), ("attack_type", "u1"), ("pad", "<u2"), ("budget", "<f4"),
        ("ego", "<f4", dims), ("collab", "<f4", dims),
    ])


@dataclass
class SampleRecord:
    scene_id: int
    ego_agent_id: int
    collaborator_agent_id: int
    label: int
    attack_type: int
    budget: float
    ego_feature: np.ndarray
    collaborator_feature: np.ndarray


def check_records(arr: np.ndarray) -> None:
    """Raise unless label, attack type and budget agree on every record."""
    label = arr["label"]
    atype = arr["attack_type"]
    bad = (label > 1) | (atype > max(ATTACK_NAMES)) | ((label == 1) != (atype != 0)) \
        | ((label == 0) & (arr["budget"] != 0)) | ~np.isfinite(arr["budget"])
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise ShardFormatError(f"record {i} violates label/attack/budget consistency "
                               f"(label={label[i]}, attack={atype[i]}, budget={arr['budget'][i]})")


class Dataset:
    """Records held as one numpy structured array, plus the manifest that describes them."""

    def __init__(self, records: np.ndarray, manifest: "Manifest"):
        self.records = records
        self.manifest = manifest

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i: int) -> SampleRecord:
        r = self.records[i]
        return SampleRecord(int(r["scene_id"]), int(r["ego_id"]), int(r["collab_id"]),
                            int(r["label"]), int(r["attack_type"]), float(r["budget"]),
                            np.array(r["ego"]), np.array(r["collab"]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def labels(self) -> np.ndarray:
        return self.records["label"].astype(np.intp)

    @property
    def attack_types(self) -> np.ndarray:
        return self.records["attack_type"].astype(np.intp)

    def indices(self, split: str) -> np.ndarray:
        lo, hi = self.manifest.splits[split]
        return np.arange(lo, hi)

    def residuals(self, idx) -> np.ndarray:
        return self.records["ego"][idx] - self.records["collab"][idx]


def records_to_array(records: Iterable[SampleRecord], dims: Sequence[int]) -> np.ndarray:
    records = list(records)
    arr = np.zeros(len(records), dtype=record_dtype(dims))
    for i, r in enumerate(records):
        arr[i] = (r.scene_id, r.ego_agent_id, r.collaborator_agent_id, r.label, r.attack_type,
                  0, r.budget, r.ego_feature, r.collaborator_feature)
    return arr


# ---------------------------------------------------------------------------
# splits and statistics


def split(count: int, ratios=(8, 1, 1), seed: int = 0) -> tuple[np.ndarray, dict]:
    """Random permutation plus contiguous train/val/test ranges over it.

    Sizes use largest-remainder rounding, so each is within 1 of its exact share.
    """
    if count < 10:
        raise ValueError(f"need at least 10 records to split, got {count}")
    ratios = np.asarray(ratios, dtype=np.float64)
    exact = count * ratios / ratios.sum()
    sizes = np.floor(exact).astype(int)
    order = np.argsort(-(exact - sizes), kind="stable")
    sizes[order[:count - sizes.sum()]] += 1
    perm = np.random.default_rng(seed).permutation(count)
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    names = ("train", "val", "test")
    return perm, {names[i]: (int(bounds[i]), int(bounds[i + 1])) for i in range(3)}


@dataclass
class DatasetStats:
    frames: int
    agent_count_hist: dict
    attack_type_hist: dict
    attack_ratio_min: float
    attack_ratio_mean: float
    attack_ratio_max: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d["agent_count_hist"] = {str(k): v for k, v in sorted(self.agent_count_hist.items())}
        d["attack_ratio_mean"] = round(self.attack_ratio_mean, 2)
        return d

    def lines(self) -> list[str]:
        total = sum(self.agent_count_hist.values())
        out = ["collaborating agents per frame:"]
        for n, c in sorted(self.agent_count_hist.items()):
            out.append(f"  {n}: {c} ({100 * c / total:.1f}%)")
        n_att = sum(v for k, v in self.attack_type_hist.items() if k != "none")
        out.append("attack types (malicious records):")
        for k, v in self.attack_type_hist.items():
            if k != "none":
                share = 100 * v / n_att if n_att else 0.0
                out.append(f"  {k}: {v} ({share:.1f}%)")
        out.append(f"  benign records: {self.attack_type_hist.get('none', 0)}")
        out.append(f"attack ratio per frame: min {self.attack_ratio_min:.2f} "
                   f"mean {self.attack_ratio_mean:.2f} max {self.attack_ratio_max:.2f}")
        return out


def compute_stats(records) -> DatasetStats:
    """Per-frame agent counts, attack-type shares and attacker ratios.

    A frame's agent count is its record count plus the ego; its attack ratio
    is malicious records divided by that count.
    """
    if isinstance(records, Dataset):
        arr = records.records
        scene, label, atype = arr["scene_id"], arr["label"], arr["attack_type"]
    else:
        recs = list(records)
        scene = np.array([r.scene_id for r in recs], dtype=np.int64)
        label = np.array([r.label for r in recs], dtype=np.int64)
        atype = np.array([r.attack_type for r in recs], dtype=np.int64)
    type_hist = {name: int(np.sum(atype == code)) for code, name in ATTACK_NAMES.items()}
    if len(scene) == 0:
        return DatasetStats(0, {}, type_hist, 0.0, 0.0, 0.0)
    frames, inverse = np.unique(scene, return_inverse=True)
    n_rec = np.bincount(inverse)
    n_mal = np.bincount(inverse, weights=label)
    agents = n_rec + 1
    ratio = n_mal / agents
    hist = {int(k): int(v) for k, v in zip(*np.unique(agents, return_counts=True))}
    return DatasetStats(len(frames), hist, type_hist, float(ratio.min()),
                        float(ratio.mean()), float(ratio.max()))


# ---------------------------------------------------------------------------
# manifest and shard I/O


@dataclass
class Manifest:
    dims: tuple
    count: int
    splits: dict
    shards: list = field(default_factory=list)
    config_digest: str = ""
    generation: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)
    version: int = VERSION

    @property
    def record_size(self) -> int:
        return record_dtype(self.dims).itemsize

    def to_json(self) -> str:
        d = {"format": "cpgb-shards", "version": self.version, "dims": list(self.dims),
             "count": self.count, "record_size": self.record_size,
             "splits": {k: list(v) for k, v in self.splits.items()},
             "shards": self.shards, "config_digest": self.config_digest,
             "generation": self.generation, "stats": self.stats}
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Manifest":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ShardFormatError(f"manifest is not valid JSON: {exc}") from exc
        if d.get("format") != "cpgb-shards":
            raise ShardFormatError("not a shard manifest")
        if d.get("version") != VERSION:
            raise ShardFormatError(f"unsupported manifest version {d.get('version')}")
        m = cls(tuple(d["dims"]), int(d["count"]), {k: tuple(v) for k, v in d["splits"].items()},
                d["shards"], d["config_digest"], d["generation"], d["stats"], d["version"])
        m.validate()
        return m

    def validate(self) -> None:
        if len(self.dims) != 3 or any(int(x) <= 0 for x in self.dims):
            raise ShardFormatError(f"bad feature dims {self.dims}")
        covered = sorted(tuple(v) for v in self.splits.values())
        pos = 0
        for lo, hi in covered:
            if lo != pos or hi < lo:
                raise ShardFormatError(f"split ranges do not partition [0, {self.count})")
            pos = hi
        if pos != self.count:
            raise ShardFormatError(f"split ranges do not partition [0, {self.count})")


def write_shards(records, manifest: Manifest, path, shard_size: int = 1024) -> Path:
    """Write ``records`` (structured array, Dataset or SampleRecords) plus manifest.json."""
    if isinstance(records, Dataset):
        arr = records.records
    elif isinstance(records, np.ndarray):
        arr = records
    else:
        arr = records_to_array(records, manifest.dims)
    if arr.dtype != record_dtype(manifest.dims):
        raise ShardFormatError("record layout does not match manifest dims")
    if len(arr) != manifest.count:
        raise ShardFormatError(f"manifest says {manifest.count} records, got {len(arr)}")
    check_records(arr)
    manifest.validate()
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    c, h, w = manifest.dims
    manifest.shards = []
    n_shards = max(1, -(-len(arr) // shard_size))
    for s in range(n_shards):
        chunk = arr[s * shard_size:(s + 1) * shard_size]
        name = f"shard-{s:05d}.bin"
        with open(out / name, "wb") as fh:
            fh.write(HEADER.pack(MAGIC, VERSION, HEADER.size, c, h, w, len(chunk)))
            fh.write(chunk.tobytes())
        manifest.shards.append({"file": name, "count": int(len(chunk))})
    (out / "manifest.json").write_text(manifest.to_json())
    return out


def read_shards(path) -> Dataset:
    root = Path(path)
    try:
        manifest = Manifest.from_json((root / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise ShardFormatError(f"no manifest.json under {root}") from exc
    dtype = record_dtype(manifest.dims)
    parts = []
    for entry in manifest.shards:
        raw = (root / entry["file"]).read_bytes()
        if len(raw) < HEADER.size:
            raise ShardFormatError(f"{entry['file']}: truncated header")
        magic, version, hsize, c, h, w, n = HEADER.unpack_from(raw)
        if magic != MAGIC:
            raise ShardFormatError(f"{entry['file']}: bad magic {magic!r}")
        if version != VERSION:
            raise ShardFormatError(f"{entry['file']}: unsupported shard version {version}")
        if hsize != HEADER.size:
            raise ShardFormatError(f"{entry['file']}: unexpected header size {hsize}")
        if (c, h, w) != tuple(manifest.dims):
            raise ShardFormatError(f"{entry['file']}: dims {(c, h, w)} differ from manifest "
                                   f"{tuple(manifest.dims)}")
        if n != entry["count"]:
            raise ShardFormatError(f"{entry['file']}: holds {n} records, manifest says {entry['count']}")
        expected = HEADER.size + n * dtype.itemsize
        if len(raw) != expected:
            raise ShardFormatError(f"{entry['file']}: {len(raw)} bytes, expected {expected} "
                                   f"(truncated or padded shard)")
        parts.append(np.frombuffer(raw, dtype=dtype, offset=HEADER.size, count=n))
    arr = np.concatenate(parts) if parts else np.zeros(0, dtype=dtype)
    if len(arr) != manifest.count:
        raise ShardFormatError(f"shards hold {len(arr)} records, manifest says {manifest.count}")
    check_records(arr)
    return Dataset(arr, manifest)


# ---------------------------------------------------------------------------
# generation


@dataclass(frozen=True)
class AttackSettings:
    steps: int = 15
    step_size: float = 0.1
    tau1: float = 0.7
    tau2: float = 0.9
    lam: float = 0.1
    sign_flip: bool = True
    cw_c: float = 0.01


@dataclass(frozen=True)
class GenConfig:
    frames: int = 1000
    agent_counts: tuple = (3, 4, 5, 6)
    agent_weights: tuple = (0.046, 0.46, 0.299, 0.195)
    attacker_probs: tuple = (0.35, 0.49, 0.16)
    budget: float | None = None
    attack_types: tuple = ("PGD", "BIM", "CW", "FGSM", "GN")
    max_offset: float = 12.0
    scene: SceneConfig = field(default_factory=SceneConfig)
    view: ViewConfig = field(default_factory=ViewConfig)
    attack: AttackSettings = field(default_factory=AttackSettings)

    def validate(self) -> None:
        if len(self.agent_counts) != len(self.agent_weights):
            raise ValueError("agent_counts and agent_weights differ in length")
        if min(self.agent_counts) < 2:
            raise ValueError("every frame needs an ego and at least one collaborator")
        if len(self.attacker_probs) - 1 >= min(self.agent_counts):
            raise ValueError(f"attacker count up to {len(self.attacker_probs) - 1} is not below "
                             f"the smallest agent count {min(self.agent_counts)}")
        for name in (self.agent_weights, self.attacker_probs):
            if abs(sum(name) - 1.0) > 1e-6:
                raise ValueError(f"probabilities {name} do not sum to 1")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class FramePlan:
    index: int
    state: CollabState
    attacks: dict       # agent id -> (AttackConfig, seed)


def plan_frame(detector: DetectorModel, config: GenConfig, seed: int, index: int) -> FramePlan:
    """Scene, agents, clean features and attack assignments of one frame (deterministic)."""
    rng = np.random.default_rng([seed, index])
    n_agents = int(rng.choice(config.agent_counts, p=config.agent_weights))
    n_att = int(rng.choice(len(config.attacker_probs), p=config.attacker_probs))
    frame_seed = int(rng.integers(0, 2**31))
    scene = generate_scene(config.scene, seed + index)
    frame = make_frame(scene, n_agents, config.view, detector.config, frame_seed, config.max_offset)
    state = CollabState.from_frame(frame, detector)
    attackers = sorted(int(a) for a in rng.choice(np.arange(1, n_agents), size=n_att, replace=False))
    plan = {}
    for a in attackers:
        kind = AttackType[config.attack_types[int(rng.integers(len(config.attack_types)))]]
        budget = config.budget if config.budget is not None else \
            float(BUDGET_GRID[int(rng.integers(len(BUDGET_GRID)))])
        cfg = AttackConfig(kind, budget, **asdict(config.attack))
        plan[a] = (cfg, int(rng.integers(0, 2**31)))
    return FramePlan(index, state, plan)


def generate_records(detector: DetectorModel, config: GenConfig, seed: int) -> list[SampleRecord]:
    config.validate()
    out = []
    for idx in range(config.frames):
        plan = plan_frame(detector, config, seed, idx)
        state = plan.state
        ego = state.features[0]
        for fm in state.features[1:]:
            aid = fm.owner
            if aid in plan.attacks:
                cfg, aseed = plan.attacks[aid]
                fm, _ = attack_agent(state, aid, cfg, aseed)
                rec = SampleRecord(idx, ego.owner, aid, 1, int(cfg.attack_type), cfg.budget,
                                   ego.data.data, fm.data.data)
            else:
                rec = SampleRecord(idx, ego.owner, aid, 0, 0, 0.0, ego.data.data, fm.data.data)
            out.append(rec)
        if (idx + 1) % 100 == 0:
            log.info("generated %d/%d frames (%d records)", idx + 1, config.frames, len(out))
    return out


def generate_dataset(detector: DetectorModel, config: GenConfig, seed: int,
                     path=None) -> Dataset:
    """Generate, split 8:1:1, and (when ``path`` is given) write shards + manifest.

    Records are stored in permuted order so that each split is a contiguous
    index range.
    """
    recs = generate_records(detector, config, seed)
    dims = detector.config.feature_shape
    arr = records_to_array(recs, dims)
    if len(arr) >= 10:
        perm, ranges = split(len(arr), seed=seed)
        arr = arr[perm]
    else:
        ranges = {"train": (0, len(arr)), "val": (len(arr), len(arr)), "test": (len(arr), len(arr))}
    gen = asdict(config)
    gen["seed"] = seed
    manifest = Manifest(dims, len(arr), ranges, config_digest=config.digest(), generation=gen)
    ds = Dataset(arr, manifest)
    manifest.stats = compute_stats(ds).to_dict()
    if path is not None:
        write_shards(arr, manifest, path)
    return ds
