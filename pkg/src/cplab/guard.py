"""Feature-level malicious-collaborator detection.

The guard classifies the residual ``F_ego - F_collaborator`` of every
received map.  Its penultimate fully connected output ``V`` doubles as an
embedding that the dual-centred contrastive loss shapes during training:
each embedding is shifted by its own class centre and pulled towards
same-class partners under a temperature-scaled cosine softmax.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .cpsim import DetectorModel, FeatureMap, TrainingDiverged, fuse_and_decode
from .metrics import ConfusionCounts, classification_metrics

log = logging.getLogger(__name__)

BENIGN, MALICIOUS = 0, 1
DENOMINATOR_MODES = ("standard", "as_written")
SELECTOR_MODES = ("text", "as_written")


# ---------------------------------------------------------------------------
# residuals and model


@dataclass
class ResidualFeature:
    data: Tensor

    @property
    def shape(self) -> tuple:
        return self.data.shape


def _feature_tensor(x) -> Tensor:
    if isinstance(x, FeatureMap):
        return x.data
    return ad.as_tensor(x)


def residual(ego, collab) -> ResidualFeature:
    """Elementwise ``ego - collab`` of two feature maps (FeatureMap, Tensor or array)."""
    a, b = _feature_tensor(ego), _feature_tensor(collab)
    if a.shape != b.shape:
        raise ValueError(f"feature shapes differ: {a.shape} vs {b.shape}")
    return ResidualFeature(a - b)


@dataclass(frozen=True)
class GuardConfig:
    alpha: float = 0.1
    tau: float = 0.1
    denominator_mode: str = "standard"
    selector_mode: str = "text"
    threshold: float = 0.5
    epochs: int = 50
    batch_size: int = 10
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    embed_dim: int = 64
    hidden: tuple = (16, 32, 32, 128)

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.denominator_mode not in DENOMINATOR_MODES:
            raise ValueError(f"denominator_mode must be one of {DENOMINATOR_MODES}")
        if self.selector_mode not in SELECTOR_MODES:
            raise ValueError(f"selector_mode must be one of {SELECTOR_MODES}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be positive and epochs non-negative")


_PARAM_ORDER = ("c1_w", "c1_b", "c2_w", "c2_b", "c3_w", "c3_b",
                "fc1_w", "fc1_b", "fc2_w", "fc2_b", "head_w", "head_b")


class GuardModel:
    """conv 4x4/2 -> conv 4x4/2 -> conv 3x3 -> fc -> fc (embedding V) -> 2 logits."""

    def __init__(self, feature_shape: tuple, config: GuardConfig, params: dict):
        self.feature_shape = tuple(feature_shape)
        self.config = config
        self.params = params
        self.history: list[dict] = []

    @classmethod
    def init(cls, feature_shape, config: GuardConfig, seed: int = 0) -> "GuardModel":
        c, h, w = feature_shape
        if h % 4 or w % 4:
            raise ValueError(f"feature height/width must be multiples of 4, got {h}x{w}")
        h1, h2, h3, fc = config.hidden
        d = config.embed_dim
        rng = np.random.default_rng(seed)
        flat = h3 * (h // 4) * (w // 4)
        p = {
            "c1_w": ad.he_normal(rng, (h1, c, 4, 4)), "c1_b": ad.zeros_param((h1,)),
            "c2_w": ad.he_normal(rng, (h2, h1, 4, 4)), "c2_b": ad.zeros_param((h2,)),
            "c3_w": ad.he_normal(rng, (h3, h2, 3, 3)), "c3_b": ad.zeros_param((h3,)),
            "fc1_w": ad.he_normal(rng, (flat, fc), fan_in=flat), "fc1_b": ad.zeros_param((fc,)),
            "fc2_w": ad.he_normal(rng, (fc, d), fan_in=fc), "fc2_b": ad.zeros_param((d,)),
            "head_w": ad.he_normal(rng, (d, 2), fan_in=d), "head_b": ad.zeros_param((2,)),
        }
        return cls(feature_shape, config, p)

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in _PARAM_ORDER]

    def copy(self) -> "GuardModel":
        return GuardModel(self.feature_shape, self.config,
                          {k: Tensor(v.data, v.requires_grad) for k, v in self.params.items()})

    def forward(self, res: Tensor) -> tuple[Tensor, Tensor]:
        """Batch of residuals (N x C x H x W) -> (embeddings N x D, logits N x 2)."""
        if tuple(res.shape[1:]) != self.feature_shape:
            raise ValueError(f"residual shape {res.shape[1:]} does not match model {self.feature_shape}")
        p = self.params
        x = ad.relu(ad.conv2d(res, p["c1_w"], p["c1_b"], stride=2, pad=1))
        x = ad.relu(ad.conv2d(x, p["c2_w"], p["c2_b"], stride=2, pad=1))
        x = ad.relu(ad.conv2d(x, p["c3_w"], p["c3_b"], pad=1))
        x = ad.reshape(x, (x.shape[0], -1))
        x = ad.relu(ad.linear(x, p["fc1_w"], p["fc1_b"]))
        v = ad.relu(ad.linear(x, p["fc2_w"], p["fc2_b"]))
        return v, ad.linear(v, p["head_w"], p["head_b"])

    def save(self, path) -> None:
        cfg = {"feature_shape": list(self.feature_shape), "guard": asdict(self.config)}
        save_checkpoint(path, "guard", cfg, {k: self.params[k].data for k in _PARAM_ORDER})

    @classmethod
    def load(cls, path) -> "GuardModel":
        cfg, params = load_checkpoint(path, "guard")
        gc = dict(cfg["guard"])
        gc["hidden"] = tuple(gc["hidden"])
        return cls(tuple(cfg["feature_shape"]), GuardConfig(**gc),
                   {k: Tensor(v) for k, v in params.items()})


def embed_and_classify(res, model: GuardModel) -> tuple[Tensor, Tensor]:
    """Single residual -> (V of length D, 2 logits)."""
    x = res.data if isinstance(res, ResidualFeature) else ad.as_tensor(res)
    v, logits = model.forward(ad.reshape(x, (1, *x.shape)))
    return ad.reshape(v, (v.shape[1],)), ad.reshape(logits, (2,))


def malicious_probability(logits) -> np.ndarray:
    """Softmax probability of the malicious class, computed in float64."""
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    return 1.0 / (1.0 + np.exp(np.clip(z[..., BENIGN] - z[..., MALICIOUS], -700, 700)))


# ---------------------------------------------------------------------------
# centres and the contrastive loss


@dataclass
class ClassCenters:
    c_b: Tensor | None
    c_mal: Tensor | None
    n_b: int
    n_mal: int
    # float64 copies of the means, used by the loss so that centring adds no float32 rounding
    exact: dict = field(default_factory=dict, repr=False, compare=False)

    def get(self, label: int) -> Tensor | None:
        return self.c_b if label == BENIGN else self.c_mal

    def get64(self, label: int) -> np.ndarray | None:
        if label in self.exact:
            return self.exact[label]
        c = self.get(label)
        return None if c is None else c.data.astype(np.float64)


def compute_centers(embeddings, labels=None) -> ClassCenters:
    """Per-class means of the embeddings; a class without members gets ``None``.

    Accepts an N x D Tensor with a label array, or a list of ``(V, label)`` pairs.
    """
    if labels is None:
        pairs = list(embeddings)
        if not pairs:
            raise ValueError("no embeddings")
        embeddings = ad.stack([ad.as_tensor(v) for v, _ in pairs])
        labels = [lab for _, lab in pairs]
    v = ad.as_tensor(embeddings)
    y = np.asarray(labels, dtype=np.intp)
    if v.shape[0] == 0:
        raise ValueError("no embeddings")
    out, exact = [], {}
    for cls in (BENIGN, MALICIOUS):
        idx = np.flatnonzero(y == cls)
        out.append(ad.mean(v[idx], axis=0) if len(idx) else None)
        if len(idx):
            exact[cls] = v.data[idx].astype(np.float64).mean(axis=0)
    return ClassCenters(out[0], out[1], int(np.sum(y == BENIGN)), int(np.sum(y == MALICIOUS)), exact)


def _shifted64(embeddings: Tensor, y: np.ndarray, centers: ClassCenters) -> np.ndarray:
    x = embeddings.data.astype(np.float64)
    for cls in (BENIGN, MALICIOUS):
        m = y == cls
        if np.any(m):
            x[m] -= centers.get64(cls)
    return x


def center_shift(embeddings: Tensor, labels, centers: ClassCenters) -> Tensor:
    """``V_x - c^(x)``: each row minus the centre of its own class."""
    y = np.asarray(labels, dtype=np.intp)
    d = embeddings.shape[1]
    rows = []
    for cls in (BENIGN, MALICIOUS):
        c = centers.get(cls)
        if c is None:
            if np.any(y == cls):
                raise ValueError(f"class {cls} appears in the batch but its centre is absent")
            c = Tensor(np.zeros(d))
        rows.append(c)
    return embeddings - ad.stack(rows)[y]


def _contrastive_parts(x: np.ndarray, y: np.ndarray, tau: float, denominator_mode: str):
    """Float64 pieces shared by the pair terms and the batch loss.

    Returns ``(ell, valid, soft, den, vjp)``: ``ell[m, n] = -S_mn / tau + log Z_m``
    (rows with an empty denominator are NaN), ``soft`` the row softmax of
    ``S / tau`` restricted to the denominator mask, and the cosine VJP.
    """
    n = len(y)
    s, vjp = ad.cosine_matrix64(x, x)
    a = s / tau
    eye = np.eye(n, dtype=bool)
    same = y[:, None] == y[None, :]
    den = ~eye if denominator_mode == "standard" else (same & ~eye)
    valid = den.any(axis=1)
    masked = np.where(den, a, -np.inf)
    top = np.where(valid, masked.max(axis=1), 0.0)
    e = np.where(den, np.exp(masked - top[:, None]), 0.0)
    z = e.sum(axis=1)
    log_z = np.where(valid, top + np.log(np.where(valid, z, 1.0)), np.nan)
    soft = e / np.where(valid, z, 1.0)[:, None]
    ell = -a + log_z[:, None]
    return ell, valid, soft, vjp


def _contrastive_node(shifted: Tensor, x: np.ndarray, y: np.ndarray, config: GuardConfig,
                      weights_fn):
    """Autodiff node computing ``sum(w * ell)`` (or the full matrix when weights_fn is None).

    ``x`` is the float64 value of ``shifted``; gradients flow back through ``shifted``.
    """
    tau = config.tau
    ell, valid, soft, vjp = _contrastive_parts(x, y, tau, config.denominator_mode)

    def grad_from(gl: np.ndarray):
        # d ell_mn / d A_mo = -[o == n] + soft_mo, and A = S / tau
        gl = np.where(valid[:, None], gl, 0.0)
        ga = -gl + gl.sum(axis=1, keepdims=True) * soft
        g1, g2 = vjp(ga / tau)
        return ((g1 + g2).astype(ad.DTYPE),)

    if weights_fn is None:
        out = np.where(valid[:, None], ell, 0.0)
        return ad.custom(out, (shifted,), lambda g: grad_from(np.asarray(g, np.float64)), "dcc_terms")
    w = weights_fn(valid)
    total = float(np.sum(np.where(w != 0, ell, 0.0) * w))
    return ad.custom(total, (shifted,), lambda g: grad_from(w * float(g)), "dcc_loss")


def _check_batch(embeddings: Tensor, labels) -> np.ndarray:
    y = np.asarray(labels, dtype=np.intp)
    if embeddings.ndim != 2 or embeddings.shape[0] != len(y):
        raise ValueError(f"{embeddings.shape} embeddings for {len(y)} labels")
    if len(y) < 2:
        raise ValueError("the contrastive loss needs at least two samples")
    return y


def dcc_pair_loss(m: int, n: int, embeddings: Tensor, labels, centers: ClassCenters,
                  config: GuardConfig) -> Tensor:
    """``l(V_m, V_n) = -log(exp(c_m . c_n / tau) / Z_m)`` on centre-shifted embeddings.

    ``Z_m`` sums ``exp(c_m . c_o / tau)`` over every ``o != m`` (standard) or
    only over same-class partners of ``m`` (as_written).
    """
    y = _check_batch(embeddings, labels)
    if m == n:
        raise ValueError("a pair needs two distinct samples")
    shifted = center_shift(embeddings, y, centers)
    terms = _contrastive_node(shifted, _shifted64(embeddings, y, centers), y, config, None)
    if config.denominator_mode == "as_written" and not np.any((y == y[m]) & (np.arange(len(y)) != m)):
        raise ValueError(f"sample {m} has no same-class partner, so its denominator is empty")
    return terms[m, n]


def pair_selector(labels, selector_mode: str) -> np.ndarray:
    """Unordered pairs m < n that enter the loss: same-label (text) or different-label (as_written)."""
    y = np.asarray(labels)
    same = y[:, None] == y[None, :]
    upper = np.triu(np.ones((len(y), len(y)), dtype=bool), k=1)
    return upper & (same if selector_mode == "text" else ~same)


def dcc_loss(embeddings: Tensor, labels, centers: ClassCenters, config: GuardConfig) -> Tensor:
    """Sum of the selected pair terms divided by C(N, 2).

    Pairs whose anchor has an empty denominator (possible only in as_written
    denominator mode) are left out of the sum.
    """
    y = _check_batch(embeddings, labels)
    shifted = center_shift(embeddings, y, centers)
    k = math.comb(len(y), 2)
    sel = pair_selector(y, config.selector_mode)

    def weights(valid):
        return (sel & valid[:, None]).astype(np.float64) / k

    return _contrastive_node(shifted, _shifted64(embeddings, y, centers), y, config, weights)


def mixed_loss(logits: Tensor, labels, dcc_value, config: GuardConfig) -> Tensor:
    """Cross-entropy plus ``alpha`` times the contrastive value (skipped when None)."""
    ce = ad.softmax_cross_entropy(logits, np.asarray(labels, dtype=np.intp))
    if dcc_value is None or config.alpha == 0:
        return ce
    return ce + ad.as_tensor(dcc_value) * float(config.alpha)


def batch_loss(model: GuardModel, res: np.ndarray, labels: np.ndarray) -> Tensor:
    v, logits = model.forward(Tensor(res))
    dcc = None
    if model.config.alpha > 0 and len(labels) >= 2 and len(np.unique(labels)) == 2:
        centers = compute_centers(v, labels)
        dcc = dcc_loss(v, labels, centers, model.config)
    return mixed_loss(logits, labels, dcc, model.config)


# ---------------------------------------------------------------------------
# training and evaluation


def train_indices(dataset, exclude_attacks: Sequence[int] = ()) -> np.ndarray:
    idx = dataset.indices("train")
    if len(exclude_attacks):
        idx = idx[~np.isin(dataset.attack_types[idx], list(exclude_attacks))]
    return idx


def train_guard(dataset, config: GuardConfig = GuardConfig(), seed: int = 0,
                exclude_attacks: Sequence[int] = (), validate: bool = True) -> GuardModel:
    """Fit the guard on the train split with ``CE + alpha * DCC``.

    ``exclude_attacks`` drops records of the given attack-type codes, which
    is how held-out-attack runs are built.
    """
    idx = train_indices(dataset, exclude_attacks)
    labels = dataset.labels
    present = set(np.unique(labels[idx]).tolist())
    if present != {BENIGN, MALICIOUS}:
        raise ValueError(f"training split must contain both classes, found {sorted(present)}")
    model = GuardModel.init(dataset.manifest.dims, config, seed)
    params = model.parameters()
    state = ad.OptimState(config.learning_rate, kind=config.optimizer)
    rng = np.random.default_rng([seed, 3])
    for epoch in range(config.epochs):
        order = idx[rng.permutation(len(idx))]
        total, steps = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            b = order[start:start + config.batch_size]
            loss = batch_loss(model, dataset.residuals(b), labels[b])
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"guard loss became {value} at epoch {epoch}")
            grads = ad.backward(loss)
            ad.sgd_step(params, [grads.get(p) for p in params], state)
            total += value
            steps += 1
        entry = {"epoch": epoch, "loss": total / max(steps, 1)}
        if validate and len(dataset.indices("val")):
            entry["val_accuracy"] = evaluate(model, dataset, "val").counts.accuracy
        model.history.append(entry)
        log.info("guard epoch %d %s", epoch, entry)
    return model


def forward_numpy(model: GuardModel, res: np.ndarray, chunk: int = 256):
    """No-grad batched forward; returns (embeddings, logits) as float32 arrays."""
    vs, ls = [], []
    with ad.no_grad():
        for s in range(0, len(res), chunk):
            v, lg = model.forward(Tensor(res[s:s + chunk]))
            vs.append(v.data)
            ls.append(lg.data)
    if not vs:
        return np.zeros((0, model.config.embed_dim), np.float32), np.zeros((0, 2), np.float32)
    return np.concatenate(vs), np.concatenate(ls)


@dataclass
class Evaluation:
    counts: ConfusionCounts
    probabilities: np.ndarray
    labels: np.ndarray
    attack_types: np.ndarray
    embeddings: np.ndarray = field(repr=False)

    def per_attack(self, threshold: float = 0.5) -> dict:
        """Detection rate for each attack code and the benign false-positive rate."""
        verdicts = self.probabilities > threshold
        out = {}
        for code in np.unique(self.attack_types):
            m = self.attack_types == code
            out[int(code)] = classification_metrics(verdicts[m], self.labels[m])
        return out


def evaluate(model: GuardModel, dataset, split: str = "test", threshold: float | None = None,
             attack_types: Sequence[int] | None = None) -> Evaluation:
    """Classify one split (optionally keeping benign records plus the given attack codes)."""
    idx = dataset.indices(split)
    if attack_types is not None:
        keep = (dataset.attack_types[idx] == 0) | np.isin(dataset.attack_types[idx], list(attack_types))
        idx = idx[keep]
    thr = model.config.threshold if threshold is None else threshold
    v, logits = forward_numpy(model, dataset.residuals(idx))
    prob = malicious_probability(logits)
    verdicts = _verdicts(prob, thr)
    return Evaluation(classification_metrics(verdicts, dataset.labels[idx]), prob,
                      dataset.labels[idx], dataset.attack_types[idx], v)


def _verdicts(prob: np.ndarray, threshold: float) -> np.ndarray:
    # a non-positive threshold flags everything, even probabilities that underflow to 0
    if threshold <= 0:
        return np.ones(prob.shape, dtype=bool)
    return prob > threshold


def embedding_distances(embeddings: np.ndarray, labels) -> dict:
    """Mean cosine distance ``1 - cos`` over positive (same-label) and negative pairs."""
    s, _ = ad.cosine_matrix64(embeddings, embeddings)
    y = np.asarray(labels)
    upper = np.triu(np.ones(s.shape, dtype=bool), k=1)
    same = y[:, None] == y[None, :]
    d = 1.0 - s
    pos, neg = d[upper & same], d[upper & ~same]
    return {"positive": float(pos.mean()) if pos.size else None,
            "negative": float(neg.mean()) if neg.size else None,
            "positive_values": pos, "negative_values": neg}


# ---------------------------------------------------------------------------
# inference


def detect(ego: FeatureMap, collaborators: Sequence[FeatureMap], model: GuardModel,
           threshold: float | None = None, counter=None) -> list[bool]:
    """One classifier pass per collaborator residual; True marks a malicious verdict."""
    if not collaborators:
        return []
    thr = model.config.threshold if threshold is None else threshold
    res = np.stack([residual(ego, c).data.data for c in collaborators])
    if counter is not None:
        counter["guard_forward"] += len(collaborators)
    _, logits = forward_numpy(model, res)
    return [bool(x) for x in _verdicts(malicious_probability(logits), thr)]


def defend(ego: FeatureMap, collaborators: Sequence[FeatureMap], model: GuardModel,
           detector: DetectorModel, threshold: float | None = None, counter=None):
    """Drop flagged collaborators, then fuse and decode once.  Returns (proposals, verdicts)."""
    verdicts = detect(ego, collaborators, model, threshold, counter)
    kept = [c for c, bad in zip(collaborators, verdicts) if not bad]
    return fuse_and_decode(ego, kept, detector, counter), verdicts
