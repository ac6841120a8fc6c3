import time
from collections import Counter

import numpy as np
import pytest

from cplab import benchgen as bg
from cplab import cpsim as cs
from cplab.attacks import AttackType
from cplab.baseline import BaselineConfig, consensus_baseline, consensus_score
from cplab.bench import TimingError, fps_benchmark, leave_one_out
from cplab.experiments import eval_frames
from cplab.guard import GuardConfig, GuardModel, detect, train_indices


@pytest.fixture(scope="module")
def feats(trained_detector):
    frame = eval_frames(trained_detector, 1, 6, seed=12)[0]
    f = cs.frame_features(frame, trained_detector)
    return f[0], f[1:]


def box(x, y):
    return cs.Proposal((0, 0), np.array([0.9, 0.1]), (x, y, 4.0, 4.0), 0.9)


def test_consensus_score_cases():
    ref = [box(10, 10), box(30, 30)]
    assert consensus_score([], []) == 1.0
    assert consensus_score([], ref) == 0.0
    assert consensus_score(ref, ref) == 1.0
    assert consensus_score([box(10, 10)], ref) == pytest.approx(0.5)


def test_zero_threshold_accepts_and_flags_nothing(feats, trained_detector):
    ego, others = feats
    res = consensus_baseline(ego, others, trained_detector, BaselineConfig(iou_threshold=0.0))
    assert res.verdicts == [False] * len(others)
    assert res.scores[0] >= 0.0
    # subsets of n - 1 cover everyone within two accepted hypotheses
    assert res.attempts == 2


def test_zero_attempts_falls_back_to_ego(feats, trained_detector):
    ego, others = feats
    res = consensus_baseline(ego, others, trained_detector, BaselineConfig(max_attempts=0))
    assert res.verdicts == [True] * len(others) and res.attempts == 0
    alone = cs.decode(ego, trained_detector)
    assert [p.scores.tobytes() for p in res.proposals] == [p.scores.tobytes() for p in alone]


def test_one_fuse_decode_per_hypothesis(feats, trained_detector):
    ego, others = feats
    for thr in (0.0, 0.5, 1.01):
        counter = Counter()
        res = consensus_baseline(ego, others, trained_detector,
                                 BaselineConfig(iou_threshold=thr, max_attempts=6), counter=counter)
        # one reference decode, one per hypothesis, one final fuse
        assert counter["fuse_decode"] == res.attempts + 2
        assert len(res.scores) == res.attempts


def test_unreachable_threshold_exhausts_attempts(feats, trained_detector):
    ego, others = feats
    res = consensus_baseline(ego, others, trained_detector,
                             BaselineConfig(iou_threshold=1.01, max_attempts=4))
    assert res.attempts == 4 and all(res.verdicts)


def test_subset_size_validation(feats, trained_detector):
    ego, others = feats
    with pytest.raises(ValueError):
        consensus_baseline(ego, others, trained_detector, BaselineConfig(subset_size=len(others)))
    res = consensus_baseline(ego, others, trained_detector, BaselineConfig(subset_size=2, iou_threshold=0.0))
    assert not any(res.verdicts)


def test_baseline_deterministic(feats, trained_detector):
    ego, others = feats
    a = consensus_baseline(ego, others, trained_detector, seed=3)
    b = consensus_baseline(ego, others, trained_detector, seed=3)
    assert a.verdicts == b.verdicts and a.scores == b.scores


def test_guard_detect_does_no_fuse_decode(feats):
    ego, others = feats
    model = GuardModel.init(ego.shape, GuardConfig(), seed=0)
    counter = Counter()
    detect(ego, others, model, counter=counter)
    assert counter["fuse_decode"] == 0 and counter["guard_forward"] == len(others)


# ---------------------------------------------------------------------------
# fps


def test_sleeping_pipeline_fps():
    r = fps_benchmark(lambda f: time.sleep(0.02), list(range(30)))
    assert 45 <= r.fps <= 55
    assert len(r.repetitions) == 5 and r.frames == 30


def test_doubling_work_halves_fps():
    one = fps_benchmark(lambda f: time.sleep(0.01), list(range(30)), repetitions=3)
    two = fps_benchmark(lambda f: time.sleep(0.02), list(range(30)), repetitions=3)
    assert abs(two.fps / one.fps - 0.5) <= 0.1


def test_fps_preconditions():
    with pytest.raises(ValueError):
        fps_benchmark(lambda f: None, list(range(29)))
    with pytest.raises(ValueError):
        fps_benchmark(lambda f: None, list(range(30)), warmup=4)
    with pytest.raises(TimingError):
        fps_benchmark(lambda f: None, list(range(30)), clock=lambda: 1.0)


def test_warmup_not_timed():
    calls = []
    ticks = iter(range(100))
    r = fps_benchmark(calls.append, list(range(30)), repetitions=2, clock=lambda: float(next(ticks)))
    assert len(calls) == 5 + 60
    assert r.fps == 30.0


# ---------------------------------------------------------------------------
# leave one out


@pytest.fixture(scope="module")
def loo_data(random_detector):
    return bg.generate_dataset(random_detector, bg.GenConfig(frames=80, budget=0.5), seed=2)


def test_held_out_type_absent_from_training(loo_data):
    for t in AttackType:
        idx = train_indices(loo_data, [int(t)])
        assert not np.any(loo_data.attack_types[idx] == int(t))
        assert np.any(loo_data.labels[idx] == 1)
    full = train_indices(loo_data)
    assert set(loo_data.attack_types[full].tolist()) == {0, *map(int, AttackType)}


def test_leave_one_out_structure(loo_data):
    out = leave_one_out(loo_data, GuardConfig(epochs=1), seed=0)
    assert set(out) == {t.name for t in AttackType} | {"upper_bound"}
    assert set(out["upper_bound"].per_attack) == {t.name for t in AttackType}
    for t in AttackType:
        assert out[t.name].extra["held_out"] == t.name
        assert 0 <= out[t.name].accuracy <= 1


def test_leave_one_out_missing_type(loo_data):
    arr = loo_data.records.copy()
    drop = arr["attack_type"] == int(AttackType.GN)
    arr["attack_type"][drop] = 0
    arr["label"][drop] = 0
    arr["budget"][drop] = 0
    ds = bg.Dataset(arr, loo_data.manifest)
    with pytest.raises(ValueError, match="GN"):
        leave_one_out(ds, GuardConfig(epochs=1))
