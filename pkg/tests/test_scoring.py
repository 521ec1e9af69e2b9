import numpy as np
import pytest
import torch

from saber.baselines import ConstantVelocity
from saber.model import ModelConfig, SaberModel
from saber.scene_data import Scene
from saber.scoring import (
    ScoreSeries,
    WindowErrors,
    anomaly_score,
    average_overlaps,
    evaluate_series,
    read_scores,
    scene_window_errors,
    score_scene,
    score_scenes,
    window_pred_errors,
    write_scores,
)
from saber.synth import ScenarioSpec, generate, generate_dataset


def brute_force_overlaps(windows, V, T):
    mean = np.full((V, T), np.nan)
    count = np.zeros((V, T), dtype=np.int64)
    for v in range(V):
        for t in range(T):
            vals = []
            for w in windows:
                for k, ts in enumerate(w.timesteps()):
                    if ts == t and v < w.errors.shape[0] and w.valid[v, k]:
                        vals.append(w.errors[v, k])
            count[v, t] = len(vals)
            if vals:
                mean[v, t] = sum(vals) / len(vals)
    return mean, count


def _random_windows(rng):
    V = int(rng.integers(1, 4))
    T = int(rng.integers(5, 30))
    W = int(rng.integers(2, min(T - 1, 10) + 1))
    stride = int(rng.integers(1, 4))
    offset = int(rng.integers(0, 2))
    out = []
    for start in range(0, T - 1 - W + 1, stride):
        K = W - offset
        out.append(WindowErrors("s", start, offset, rng.random((V, K)), rng.random((V, K)) > 0.2))
    return out, V, T


def test_overlap_average_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(20):
        wins, V, T = _random_windows(rng)
        mean, count = average_overlaps(wins, V, T)
        bm, bc = brute_force_overlaps(wins, V, T)
        np.testing.assert_array_equal(count, bc)
        np.testing.assert_allclose(mean, bm, rtol=0, atol=1e-15)


def test_window_timesteps():
    # observation index 0 is scene timestep 1; a prediction error sits one step later
    w = WindowErrors("s", 3, 1, np.zeros((1, 4)), np.ones((1, 4), bool))
    np.testing.assert_array_equal(w.timesteps(), [5, 6, 7, 8])


def test_overlap_example():
    w1 = WindowErrors("s", 0, 0, np.array([[1.0, 2.0]]), np.array([[True, True]]))
    w2 = WindowErrors("s", 1, 0, np.array([[4.0, 6.0]]), np.array([[True, False]]))
    mean, count = average_overlaps([w1, w2], 1, 4)
    np.testing.assert_array_equal(count, [[0, 1, 2, 0]])
    np.testing.assert_array_equal(mean[0, 1:3], [1.0, 3.0])
    assert np.isnan(mean[0, 0]) and np.isnan(mean[0, 3])


def test_anomaly_score_is_max_over_vehicles():
    pv = np.array([[1.0, np.nan, 0.5, np.nan], [2.0, 3.0, 0.1, np.nan]])
    s = anomaly_score(pv)
    np.testing.assert_array_equal(s[:3], [2.0, 3.0, 0.5])
    assert np.isnan(s[3])


def test_raising_one_vehicle_error_never_lowers_score():
    rng = np.random.default_rng(1)
    for _ in range(50):
        pv = rng.random((3, 8))
        bumped = pv.copy()
        bumped[rng.integers(3), rng.integers(8)] += rng.random()
        assert np.all(anomaly_score(bumped) >= anomaly_score(pv))


def test_unscored_head_filled_and_excluded():
    pv = np.array([[np.nan, np.nan, 0.4, 0.7]])
    ss = ScoreSeries.from_per_vehicle("s", ("normal",) * 3 + ("ignored",), pv, np.array([[0, 0, 1, 1]]))
    np.testing.assert_array_equal(ss.scores, [0.4, 0.4, 0.4, 0.7])
    np.testing.assert_array_equal(ss.scored, [False, False, True, True])
    np.testing.assert_array_equal(ss.metric_mask(), [False, False, True, False])


def test_cvm_scores_zero_on_constant_velocity(make_straight):
    # dyadic velocities keep every coordinate exactly representable
    s = make_straight([[10, -5.25], [40, -1.75], [300, 5.25]], [[2.5, 0], [2.0, 0.125], [-2.75, 0]], T=30)
    ss = score_scene(ConstantVelocity(), s, dtype=torch.float64)
    assert np.all(ss.scores == 0)
    assert ss.scored[2:].all() and not ss.scored[:2].any()


def test_cvm_near_zero_on_generated_constant_velocity():
    s = generate(ScenarioSpec("following", duration=60, noise_std=0.0, seed=7))
    ss = score_scene(ConstantVelocity(), s, dtype=torch.float64)
    assert np.max(ss.scores) <= 1e-9


def _model(seed=0, variant="saber_vae"):
    torch.manual_seed(seed)
    return SaberModel(ModelConfig(variant=variant, attn_dim=8, heads=2)).eval()


def test_far_vehicle_never_changes_scores(make_straight):
    model = _model()
    base = make_straight([[10, -5.25], [30, -1.75]], [[2.5, 0.02], [2.2, -0.01]], T=25)
    far = make_straight([[10, -5.25], [30, -1.75], [200, 5.25]], [[2.5, 0.02], [2.2, -0.01], [-2.5, 0]], T=25)
    a = score_scene(model, base)
    b = score_scene(model, far)
    np.testing.assert_array_equal(a.per_vehicle, b.per_vehicle[:2])


def test_masked_slot_contents_never_change_scores(make_straight):
    from saber.scene_data import build_observations, collate, make_windows

    model = _model()
    s = make_straight([[10, -5.25], [30, -1.75], [100, 1.75]], [[2.5, 0.0], [2.2, 0.0], [-2.0, 0]], T=20)
    batch = collate(make_windows(build_observations(s), 15))
    e1, _, _ = window_pred_errors(model, batch)
    batch.R = torch.where(batch.nbr_mask[..., None], batch.R, torch.full_like(batch.R, 1e6))
    batch.L = torch.where(batch.lane_mask[..., None], batch.L, torch.full_like(batch.L, -1e6))
    e2, _, _ = window_pred_errors(model, batch)
    assert torch.equal(e1, e2)


def test_labels_do_not_affect_scores():
    s = generate(ScenarioSpec("skidding", duration=40, seed=0))
    relabelled = Scene(s.scene_id, s.timestep_dt, s.positions, ("normal",) * s.length, s.map, s.present)
    a = score_scene(ConstantVelocity(), s)
    b = score_scene(ConstantVelocity(), relabelled)
    np.testing.assert_array_equal(a.scores, b.scores)


def test_scaled_errors_scale_scores():
    class Scaled:
        def __init__(self, inner, c):
            self.inner, self.c = inner, c

        def window_errors(self, batch):
            e, v, o = self.inner.window_errors(batch)
            return e * self.c, v, o

    s = generate(ScenarioSpec("off_road", duration=40, seed=0))
    a = score_scene(ConstantVelocity(), s, dtype=torch.float64)
    b = score_scene(Scaled(ConstantVelocity(), 4.0), s, dtype=torch.float64)
    np.testing.assert_allclose(b.scores, 4.0 * a.scores, rtol=1e-15)


def test_missing_model_raises():
    with pytest.raises(RuntimeError):
        window_pred_errors(None, None)


def test_short_scene_is_unscored(make_straight):
    s = make_straight([[10, -5.25]], [[2.5, 0]], T=10)
    ss = score_scene(ConstantVelocity(), s)
    assert not ss.scored.any()
    assert np.all(ss.scores == 0)


def test_parallel_scoring_keeps_order():
    _, test = generate_dataset({}, {"following": 2, "wrong_way": 2, "reeving": 2}, seed=3)
    model = _model()
    serial = score_scenes(model, test, jobs=1)
    parallel = score_scenes(model, test, jobs=3)
    assert [s.scene_id for s in serial] == [s.scene_id for s in parallel]
    for a, b in zip(serial, parallel):
        np.testing.assert_array_equal(a.scores, b.scores)


def test_scores_round_trip(tmp_path):
    _, test = generate_dataset({}, {"following": 1, "tailgating": 1}, seed=0)
    series = score_scenes(ConstantVelocity(), test)
    write_scores(series, tmp_path)
    back = read_scores(tmp_path)
    for a, b in zip(series, back):
        assert a.scene_id == b.scene_id and a.labels == b.labels and a.anomaly_type == b.anomaly_type
        np.testing.assert_array_equal(a.scores, b.scores)
        np.testing.assert_array_equal(a.scored, b.scored)
        np.testing.assert_array_equal(a.per_vehicle, b.per_vehicle)
    assert evaluate_series(series) == evaluate_series(back)


def test_window_errors_use_scene_vehicle_count():
    s = generate(ScenarioSpec("following", duration=30, seed=0, n_vehicles=3))
    wins = scene_window_errors(ConstantVelocity(), s)
    assert len(wins) == 30 - 1 - 15 + 1
    assert all(w.errors.shape == (3, 14) for w in wins)
