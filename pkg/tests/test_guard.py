import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cplab import autodiff as ad
from cplab import benchgen as bg
from cplab import cpsim as cs
from cplab import guard as gd
from cplab.autodiff import Tensor
from cplab.guard import GuardConfig

from helpers import conv2d_ref, cosine_ref, dcc_bruteforce, fd_grad, rel_err, softmax_ref


def fmap(arr, owner=0):
    return cs.FeatureMap(Tensor(np.asarray(arr, np.float32)), owner)


# ---------------------------------------------------------------------------
# residuals and centres


def test_residual_examples(rng):
    assert gd.residual(fmap([3.0]), fmap([1.0])).data.data.tolist() == [2.0]
    x = rng.normal(size=(2, 4, 4))
    assert not np.any(gd.residual(fmap(x), fmap(x)).data.data)
    y = rng.normal(size=(2, 4, 4))
    np.testing.assert_array_equal(gd.residual(x, y).data.data, -gd.residual(y, x).data.data)
    with pytest.raises(ValueError):
        gd.residual(np.zeros(3), np.zeros(4))


def test_residual_linear(rng):
    a, b, c, d = (rng.normal(size=(3, 3)).astype(np.float32) for _ in range(4))
    lhs = gd.residual(a + c, b + d).data.data
    rhs = gd.residual(a, b).data.data + gd.residual(c, d).data.data
    np.testing.assert_allclose(lhs, rhs, atol=1e-6)


def test_center_examples():
    c = gd.compute_centers([(np.array([1.0, 0.0]), 0), (np.array([0.0, 1.0]), 0)])
    assert c.c_b.data.tolist() == [0.5, 0.5] and c.c_mal is None and c.n_mal == 0
    v = np.array([0.3, -2.0], np.float32)
    c = gd.compute_centers([(v, 1)])
    assert c.c_mal.data.tobytes() == v.tobytes() and c.c_b is None
    with pytest.raises(ValueError):
        gd.compute_centers([])


def test_absent_center_in_batch_rejected():
    v = Tensor(np.eye(3))
    centers = gd.compute_centers(v, [0, 0, 0])
    with pytest.raises(ValueError):
        gd.center_shift(v, [0, 0, 1], centers)


# ---------------------------------------------------------------------------
# contrastive loss vs brute force


MODES = [("standard", "text"), ("as_written", "as_written"), ("standard", "as_written"),
         ("as_written", "text")]


def as_f32(v):
    # engine tensors are float32, so the oracle sees the same rounded embeddings
    return np.asarray(v, np.float32).astype(np.float64)


def engine_dcc(v, y, tau, den, sel):
    cfg = GuardConfig(tau=tau, denominator_mode=den, selector_mode=sel)
    t = Tensor(v)
    return gd.dcc_loss(t, y, gd.compute_centers(t, y), cfg).item()


def test_two_sample_standard_is_zero(rng):
    for y in ([0, 0], [0, 1], [1, 1]):
        v = Tensor(rng.normal(size=(2, 5)))
        cfg = GuardConfig()
        val = gd.dcc_pair_loss(0, 1, v, y, gd.compute_centers(v, y), cfg).item()
        assert val == pytest.approx(0.0, abs=1e-12)


def test_pair_loss_errors(rng):
    v = Tensor(rng.normal(size=(3, 4)))
    y = [0, 0, 1]
    centers = gd.compute_centers(v, y)
    with pytest.raises(ValueError):
        gd.dcc_pair_loss(1, 1, v, y, centers, GuardConfig())
    with pytest.raises(ValueError):
        gd.dcc_pair_loss(2, 0, v, y, centers, GuardConfig(denominator_mode="as_written"))
    one = Tensor(rng.normal(size=(1, 4)))
    with pytest.raises(ValueError):
        gd.dcc_loss(one, [0], gd.compute_centers(one, [0]), GuardConfig())


@pytest.mark.parametrize("den,sel", MODES)
def test_pair_loss_matches_bruteforce_hand_set(den, sel):
    v = as_f32([[1.0, 0.0, 0.5], [0.2, 1.0, 0.0], [0.0, 0.3, 1.0], [1.0, 1.0, 0.1]])
    y = np.array([0, 0, 1, 1])
    _, ell = dcc_bruteforce(v, y, 0.1, den, sel)
    t = Tensor(v)
    centers = gd.compute_centers(t, y)
    cfg = GuardConfig(tau=0.1, denominator_mode=den, selector_mode=sel)
    for m in range(4):
        for n in range(4):
            if m != n:
                got = gd.dcc_pair_loss(m, n, t, y, centers, cfg).item()
                assert got == pytest.approx(ell(m, n), abs=1e-6)


def test_tau_scaling_matches_direct_evaluation(rng):
    v = as_f32(rng.normal(size=(5, 4)))
    y = np.array([0, 1, 0, 1, 1])
    for tau in (0.1, 1.0):
        _, ell = dcc_bruteforce(v, y, tau)
        t = Tensor(v)
        got = gd.dcc_pair_loss(0, 2, t, y, gd.compute_centers(t, y), GuardConfig(tau=tau)).item()
        assert got == pytest.approx(ell(0, 2), abs=1e-6)


@settings(max_examples=150, deadline=None)
@given(st.integers(2, 8), st.integers(0, 2**31 - 1), st.sampled_from(MODES),
       st.sampled_from([0.1, 0.5, 1.0]))
def test_dcc_loss_matches_bruteforce(n, seed, modes, tau):
    r = np.random.default_rng(seed)
    v = as_f32(r.normal(size=(n, 6)))
    y = r.integers(0, 2, size=n)
    expected, _ = dcc_bruteforce(v, y, tau, *modes)
    assert engine_dcc(v, y, tau, *modes) == pytest.approx(expected, abs=1e-6)


def test_normaliser_is_binomial():
    # N=4 with two positive pairs: their sum over C(4,2) = 6
    v = as_f32([[1.0, 0.2], [0.1, 1.0], [0.7, 0.7], [0.3, 0.9]])
    y = np.array([0, 1, 1, 0])
    _, ell = dcc_bruteforce(v, y, 0.1)
    assert math.comb(4, 2) == 6
    expected = (ell(0, 3) + ell(1, 2)) / 6
    assert engine_dcc(v, y, 0.1, "standard", "text") == pytest.approx(expected, abs=1e-6)


def test_no_positive_pairs_gives_zero(rng):
    assert engine_dcc(rng.normal(size=(2, 3)), [0, 1], 0.1, "standard", "text") == 0


def test_dcc_gradient_matches_fd(rng):
    v = rng.normal(size=(6, 5))
    y = np.array([0, 1, 1, 0, 1, 0])
    for den, sel in MODES[:2]:
        t = Tensor(v, requires_grad=True)
        cfg = GuardConfig(tau=0.5, denominator_mode=den, selector_mode=sel)
        g = ad.backward(gd.dcc_loss(t, y, gd.compute_centers(t, y), cfg))[t]
        fd = fd_grad(lambda x: dcc_bruteforce(x, y, 0.5, den, sel)[0], v, h=1e-5)
        assert rel_err(g, fd) <= 1e-3


# ---------------------------------------------------------------------------
# mixed loss


def test_mixed_loss_examples(rng):
    logits = Tensor(rng.normal(size=(4, 2)))
    y = np.array([0, 1, 1, 0])
    ce = ad.softmax_cross_entropy(logits, y).item()
    assert gd.mixed_loss(logits, y, Tensor(3.0), GuardConfig(alpha=0)).item() == ce
    # logits chosen so that ce is exactly 1.0
    p = math.exp(-1.0)
    z = Tensor(np.array([[math.log(p / (1 - p)), 0.0]]))
    assert ad.softmax_cross_entropy(z, [0]).item() == pytest.approx(1.0, abs=1e-6)
    assert gd.mixed_loss(z, [0], 0.5, GuardConfig(alpha=1.0)).item() == pytest.approx(1.5, abs=1e-6)


TINY = GuardConfig(alpha=1.0, tau=0.5, hidden=(3, 4, 4, 8), embed_dim=5)


def guard_ref(params, res, labels, cfg):
    """Float64 forward of the guard plus CE + alpha * DCC, written with plain loops."""
    p = params
    relu = lambda x: np.maximum(x, 0)
    vs = []
    for r in res:
        x = relu(conv2d_ref(r, p["c1_w"], p["c1_b"], stride=2, pad=1))
        x = relu(conv2d_ref(x, p["c2_w"], p["c2_b"], stride=2, pad=1))
        x = relu(conv2d_ref(x, p["c3_w"], p["c3_b"], pad=1))
        x = relu(x.ravel() @ p["fc1_w"] + p["fc1_b"])
        vs.append(relu(x @ p["fc2_w"] + p["fc2_b"]))
    v = np.array(vs)
    logits = v @ p["head_w"] + p["head_b"]
    ce = -np.mean(np.log(softmax_ref(logits, 1))[np.arange(len(labels)), labels])
    dcc, _ = dcc_bruteforce(v, labels, cfg.tau, cfg.denominator_mode, cfg.selector_mode)
    return ce + cfg.alpha * dcc


def test_mixed_loss_parameter_gradient_matches_fd(rng):
    model = gd.GuardModel.init((2, 8, 8), TINY, seed=3)
    res = rng.normal(size=(4, 2, 8, 8)).astype(np.float32)
    y = np.array([0, 1, 0, 1])
    params = {k: Tensor(v.data, requires_grad=True) for k, v in model.params.items()}
    model.params = params
    grads = ad.backward(gd.batch_loss(model, res, y))
    p64 = {k: v.data.astype(np.float64) for k, v in params.items()}
    for name in p64:
        def f(x, name=name):
            q = dict(p64)
            q[name] = x
            return guard_ref(q, res, y, TINY)
        fd = fd_grad(f, p64[name], h=1e-5)
        assert rel_err(grads[params[name]], fd) <= 1e-3, name


# ---------------------------------------------------------------------------
# model, training, inference


def test_forward_shapes_and_softmax(rng):
    model = gd.GuardModel.init((16, 16, 16), GuardConfig(), seed=0)
    v, logits = gd.embed_and_classify(gd.residual(rng.normal(size=(16, 16, 16)), np.zeros((16, 16, 16))), model)
    assert v.shape == (64,) and logits.shape == (2,)
    assert abs(ad.softmax(ad.reshape(logits, (1, 2))).data.sum() - 1) <= 1e-5
    v2, _ = gd.embed_and_classify(gd.residual(rng.normal(size=(16, 16, 16)), np.zeros((16, 16, 16))), model)
    with pytest.raises(ValueError):
        gd.embed_and_classify(np.zeros((16, 8, 8)), model)
    with pytest.raises(ValueError):
        gd.GuardModel.init((16, 10, 10), GuardConfig())


def test_config_validation():
    for kw in ({"tau": 0}, {"alpha": -1}, {"denominator_mode": "x"}, {"selector_mode": "y"}):
        with pytest.raises(ValueError):
            GuardConfig(**kw)


def test_save_load_roundtrip(tmp_path):
    m = gd.GuardModel.init((4, 8, 8), TINY, seed=1)
    m.save(tmp_path / "g.ckpt")
    back = gd.GuardModel.load(tmp_path / "g.ckpt")
    assert back.config == m.config and back.feature_shape == m.feature_shape
    for k in m.params:
        assert back.params[k].data.tobytes() == m.params[k].data.tobytes()


@pytest.fixture(scope="module")
def guard_data(trained_detector):
    cfg = bg.GenConfig(frames=100, budget=1.0)
    return bg.generate_dataset(trained_detector, cfg, seed=21)


FAST = GuardConfig(epochs=15)


@pytest.fixture(scope="module")
def trained_guard(guard_data):
    return gd.train_guard(guard_data, FAST, seed=0)


def test_zero_epochs_equals_init(guard_data):
    m = gd.train_guard(guard_data, replace(FAST, epochs=0), seed=4)
    init = gd.GuardModel.init(guard_data.manifest.dims, FAST, seed=4)
    for k in init.params:
        assert np.array_equal(m.params[k].data, init.params[k].data)


def test_training_is_reproducible(guard_data):
    cfg = replace(FAST, epochs=2)
    a = gd.train_guard(guard_data, cfg, seed=8)
    b = gd.train_guard(guard_data, cfg, seed=8)
    assert a.history == b.history
    for k in a.params:
        assert a.params[k].data.tobytes() == b.params[k].data.tobytes()


def test_single_class_split_rejected(guard_data):
    from cplab.attacks import AttackType
    with pytest.raises(ValueError):
        gd.train_guard(guard_data, FAST, exclude_attacks=[int(t) for t in AttackType])


def test_trained_guard_separates(trained_guard, guard_data):
    ev = gd.evaluate(trained_guard, guard_data, "test")
    assert ev.counts.accuracy >= 0.85


def test_identical_collaborator_is_benign(trained_guard, rng):
    x = fmap(rng.normal(size=(16, 16, 16)))
    assert gd.detect(x, [fmap(x.data.data, 1)], trained_guard) == [False]


def test_detect_thresholds(trained_guard, guard_data):
    rec = [guard_data[i] for i in range(6)]
    ego = fmap(rec[0].ego_feature)
    collabs = [fmap(r.collaborator_feature, i + 1) for i, r in enumerate(rec)]
    assert gd.detect(ego, collabs, trained_guard, threshold=1.0) == [False] * 6
    assert gd.detect(ego, collabs, trained_guard, threshold=0.0) == [True] * 6
    counter = {"guard_forward": 0, "fuse_decode": 0}
    gd.detect(ego, collabs, trained_guard, counter=counter)
    assert counter["guard_forward"] == 6
    assert gd.detect(ego, [], trained_guard) == []


def test_defend_fallbacks(trained_guard, trained_detector):
    from cplab.experiments import eval_frames
    frame = eval_frames(trained_detector, 1, 4, seed=3)[0]
    feats = cs.frame_features(frame, trained_detector)
    ego, others = feats[0], feats[1:]
    props, verdicts = gd.defend(ego, others, trained_guard, trained_detector, threshold=1.0)
    assert verdicts == [False] * 3
    same = cs.fuse_and_decode(ego, others, trained_detector)
    assert [p.scores.tobytes() for p in props] == [p.scores.tobytes() for p in same]
    props, verdicts = gd.defend(ego, others, trained_guard, trained_detector, threshold=0.0)
    assert verdicts == [True] * 3
    alone = cs.decode(ego, trained_detector)
    assert [p.scores.tobytes() for p in props] == [p.scores.tobytes() for p in alone]


def test_embedding_distances_brute_force(rng):
    e = rng.normal(size=(7, 4))
    y = np.array([0, 1, 0, 0, 1, 1, 0])
    d = gd.embedding_distances(e, y)
    pos, neg = [], []
    for i in range(7):
        for j in range(i + 1, 7):
            (pos if y[i] == y[j] else neg).append(1 - cosine_ref(e[i], e[j]))
    assert d["positive"] == pytest.approx(np.mean(pos), abs=1e-12)
    assert d["negative"] == pytest.approx(np.mean(neg), abs=1e-12)
