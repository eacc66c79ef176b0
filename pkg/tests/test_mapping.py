import numpy as np
import pytest

from dvio.camera import CameraIntrinsics, PyramidImage
from dvio.imu import Bias, State
from dvio.mapping import (
    CandidatePoint,
    EpipolarSearchConfig,
    Keyframe,
    KeyframePolicy,
    MatchOutcome,
    MatchResult,
    PointStatus,
    epipolar_search,
    make_keyframe,
    propagate_to_new_keyframe,
    select_candidates,
    should_create_keyframe,
    update_depth_filter,
)
from dvio.synthetic import make_scene, render_view
from dvio.tracking import RelativePoseMeasurement

INTR = CameraIntrinsics(fx=250.0, fy=250.0, cx=159.5, cy=119.5, width=320, height=240)
CFG = EpipolarSearchConfig()


def _keyframe(pyramid, kf_id=0):
    state = State(np.zeros(3), np.zeros(3), np.eye(3), Bias())
    return Keyframe(id=kf_id, timestamp=0.0, pyramid=pyramid, state=state)


@pytest.fixture(scope="module")
def plane_pair():
    scene = make_scene(distance=2.0, seed=5)
    pyr_a, invd_a = render_view(scene, np.eye(3), np.zeros(3), INTR)
    t_b = np.array([0.1, 0.02, 0.0])
    pyr_b, _ = render_view(scene, np.eye(3), t_b, INTR)
    # reference -> frame b: x_b = x_a - t_b
    return pyr_a, invd_a, pyr_b, -t_b


class TestSelectCandidates:
    def test_constant_image_yields_nothing(self):
        kf = _keyframe(PyramidImage(np.full((240, 320), 128.0)))
        assert select_candidates(kf, 500) == []

    def test_count_near_target(self, plane_pair):
        pyr_a, _, _, _ = plane_pair
        pts = select_candidates(_keyframe(pyr_a), 1000)
        assert 300 <= len(pts) <= 1300

    def test_all_above_gradient_threshold(self, plane_pair):
        pyr_a, _, _, _ = plane_pair
        g = np.hypot(pyr_a.grad_x[0], pyr_a.grad_y[0])
        for p in select_candidates(_keyframe(pyr_a), 400):
            assert g[int(p.pixel[1]), int(p.pixel[0])] > CFG.gradient_threshold

    def test_spatial_spread(self, plane_pair):
        # the grid bucketing must leave points in every quadrant
        pyr_a, _, _, _ = plane_pair
        pts = np.stack([p.pixel for p in select_candidates(_keyframe(pyr_a), 800)])
        for qx in (pts[:, 0] < 160, pts[:, 0] >= 160):
            for qy in (pts[:, 1] < 120, pts[:, 1] >= 120):
                assert np.count_nonzero(qx & qy) > 20

    def test_edge_image_concentrates_on_edge(self):
        img = np.full((240, 320), 20.0)
        img[:, 160:] = 230.0
        pts = select_candidates(_keyframe(PyramidImage(img)), 300)
        assert len(pts) > 0
        cols = np.array([p.pixel[0] for p in pts])
        assert np.all(np.abs(cols - 159.5) <= 2.0)

    def test_margin_respected(self, plane_pair):
        pyr_a, _, _, _ = plane_pair
        for p in select_candidates(_keyframe(pyr_a), 2000, margin=4):
            assert 4 <= p.pixel[0] < 316 and 4 <= p.pixel[1] < 236

    def test_prior_initialization(self, plane_pair):
        pyr_a, _, _, _ = plane_pair
        p = select_candidates(_keyframe(pyr_a, kf_id=7), 100)[0]
        assert p.inv_depth == CFG.init_inv_depth
        assert p.variance == CFG.init_variance
        assert p.status == PointStatus.CANDIDATE
        assert p.host_id == 7


def _search_points(pyr, invd_map, n=60, seed=0):
    """High-gradient pixels with their exact inverse depths."""
    g = np.hypot(pyr.grad_x[0], pyr.grad_y[0])
    ys, xs = np.mgrid[12:228:4, 12:308:4]
    keep = g[ys, xs] > 10.0
    xs, ys = xs[keep], ys[keep]
    idx = np.random.default_rng(seed).permutation(len(xs))[:n]
    pixels = np.stack([xs[idx], ys[idx]], axis=1).astype(float)
    return pixels, invd_map[ys[idx], xs[idx]]


class TestEpipolarSearch:
    def test_recovers_true_inverse_depth(self, plane_pair):
        pyr_a, invd_a, pyr_b, t_cr = plane_pair
        kf = _keyframe(pyr_a)
        pixels, truths = _search_points(pyr_a, invd_a)
        errs = []
        for px, rho_t in zip(pixels, truths):
            point = CandidatePoint(px, rho_t * 1.2, (0.3 * rho_t) ** 2)
            res = epipolar_search(point, kf, pyr_b, np.eye(3), t_cr, INTR)
            if res.outcome == MatchOutcome.OK:
                errs.append(abs(res.inv_depth - rho_t))
        errs = np.array(errs)
        assert len(errs) > 0.7 * len(pixels)
        assert np.median(errs) < 0.02
        assert np.mean(errs < 0.05) > 0.8

    def test_result_within_search_interval(self, plane_pair):
        pyr_a, invd_a, pyr_b, t_cr = plane_pair
        kf = _keyframe(pyr_a)
        pixels, truths = _search_points(pyr_a, invd_a, n=40, seed=1)
        for px, rho_t in zip(pixels, truths):
            point = CandidatePoint(px, rho_t * 1.3, (0.4 * rho_t) ** 2)
            res = epipolar_search(point, kf, pyr_b, np.eye(3), t_cr, INTR)
            if res.outcome == MatchOutcome.OK:
                sigma = np.sqrt(point.variance)
                assert point.inv_depth - 2 * sigma - 1e-12 <= res.inv_depth
                assert res.inv_depth <= point.inv_depth + 2 * sigma + 1e-12

    def test_zero_baseline_is_degenerate(self, plane_pair):
        pyr_a, invd_a, _, _ = plane_pair
        kf = _keyframe(pyr_a)
        point = CandidatePoint(np.array([160.0, 120.0]), 0.5, 0.04)
        res = epipolar_search(point, kf, pyr_a, np.eye(3), np.zeros(3), INTR)
        assert res.outcome == MatchOutcome.DEGENERATE
        assert res.inv_depth == point.inv_depth
        assert res.variance == point.variance

    def test_segment_behind_camera_is_off_image(self, plane_pair):
        pyr_a, _, pyr_b, _ = plane_pair
        kf = _keyframe(pyr_a)
        point = CandidatePoint(np.array([160.0, 120.0]), 1.0, 0.04)
        res = epipolar_search(point, kf, pyr_b, np.eye(3),
                              np.array([0.0, 0.0, -1.2]), INTR)
        assert res.outcome == MatchOutcome.OFF_IMAGE

    def test_periodic_texture_is_ambiguous(self):
        xs = np.arange(320)
        stripes = 128.0 + 60.0 * np.sin(2.0 * np.pi * xs / 12.0)
        img = np.tile(stripes, (240, 1))
        pyr = PyramidImage(img)
        kf = _keyframe(pyr)
        point = CandidatePoint(np.array([160.0, 120.0]), 0.5, 0.25)
        res = epipolar_search(point, kf, pyr, np.eye(3),
                              np.array([0.2, 0.0, 0.0]), INTR)
        assert res.outcome == MatchOutcome.AMBIGUOUS

    def test_observation_variance_shrinks_with_baseline(self, plane_pair):
        # longer segment -> finer inverse-depth resolution per pixel
        pyr_a, invd_a, _, _ = plane_pair
        scene = make_scene(distance=2.0, seed=5)
        kf = _keyframe(pyr_a)
        point = CandidatePoint(np.array([200.0, 80.0]),
                               invd_a[80, 200], 0.02)
        out = []
        for bx in (0.05, 0.15):
            pyr_c, _ = render_view(scene, np.eye(3), np.array([bx, 0.0, 0.0]), INTR)
            res = epipolar_search(point, kf, pyr_c, np.eye(3),
                                  np.array([-bx, 0.0, 0.0]), INTR)
            assert res.outcome == MatchOutcome.OK
            out.append(res.variance)
        assert out[1] < out[0]


class TestUpdateDepthFilter:
    def test_equal_variance_fusion(self):
        p = CandidatePoint(np.zeros(2), 0.4, 0.02)
        q = update_depth_filter(p, MatchResult(MatchOutcome.OK, 0.6, 0.02, 1.0))
        assert np.isclose(q.inv_depth, 0.5)
        assert np.isclose(q.variance, 0.01)

    def test_fusion_weights_by_inverse_variance(self):
        p = CandidatePoint(np.zeros(2), 1.0, 1.0)
        q = update_depth_filter(p, MatchResult(MatchOutcome.OK, 2.0, 1e-6, 0.0))
        assert abs(q.inv_depth - 2.0) < 1e-4
        assert q.variance < 1e-6

    def test_activation_promotion(self):
        p = CandidatePoint(np.zeros(2), 0.5, 0.015)
        q = update_depth_filter(p, MatchResult(MatchOutcome.OK, 0.5, 0.015, 0.0))
        assert q.status == PointStatus.ACTIVE
        assert q.variance < CFG.activation_variance

    def test_no_promotion_above_threshold(self):
        p = CandidatePoint(np.zeros(2), 0.5, 0.5)
        q = update_depth_filter(p, MatchResult(MatchOutcome.OK, 0.5, 0.5, 0.0))
        assert q.status == PointStatus.CANDIDATE

    def test_ambiguous_inflates_variance(self):
        p = CandidatePoint(np.zeros(2), 0.5, 0.1)
        q = update_depth_filter(p, MatchResult(MatchOutcome.AMBIGUOUS))
        assert q.variance == pytest.approx(0.1 * CFG.variance_inflation)
        assert q.fail_count == 1
        assert q.inv_depth == p.inv_depth

    def test_outlier_after_consecutive_failures(self):
        p = CandidatePoint(np.zeros(2), 0.5, 0.1)
        for _ in range(CFG.max_failures):
            p = update_depth_filter(p, MatchResult(MatchOutcome.AMBIGUOUS))
        assert p.status == PointStatus.OUTLIER

    def test_success_resets_failure_count(self):
        p = CandidatePoint(np.zeros(2), 0.5, 0.1, fail_count=4)
        q = update_depth_filter(p, MatchResult(MatchOutcome.OK, 0.5, 0.1, 0.0))
        assert q.fail_count == 0
        assert q.status != PointStatus.OUTLIER

    def test_off_image_leaves_point_untouched(self):
        p = CandidatePoint(np.zeros(2), 0.5, 0.1, fail_count=2)
        assert update_depth_filter(p, MatchResult(MatchOutcome.OFF_IMAGE)) == p

    def test_degenerate_leaves_point_untouched(self):
        p = CandidatePoint(np.zeros(2), 0.5, 0.1)
        assert update_depth_filter(
            p, MatchResult(MatchOutcome.DEGENERATE, 0.5, 0.1, 0.0)) == p

    def test_nonpositive_fused_depth_is_outlier(self):
        p = CandidatePoint(np.zeros(2), 0.1, 1.0)
        q = update_depth_filter(p, MatchResult(MatchOutcome.OK, -5.0, 0.1, 0.0))
        assert q.status == PointStatus.OUTLIER


class TestDepthFilterConvergence:
    def test_multi_frame_convergence(self, plane_pair):
        # wrong prior, several baselines: the filter must land on the truth
        scene = make_scene(distance=2.0, seed=5)
        pyr_a, invd_a, _, _ = plane_pair
        kf = _keyframe(pyr_a)
        pixels, truths = _search_points(pyr_a, invd_a, n=40, seed=2)
        points = [CandidatePoint(px, 0.8, 0.16) for px in pixels]
        for bx, by in ((0.03, 0.01), (0.06, -0.02), (0.1, 0.03), (0.14, 0.0)):
            t_b = np.array([bx, by, 0.0])
            pyr_c, _ = render_view(scene, np.eye(3), t_b, INTR)
            points = [
                update_depth_filter(
                    p, epipolar_search(p, kf, pyr_c, np.eye(3), -t_b, INTR))
                for p in points
            ]
        live = [(p, t) for p, t in zip(points, truths)
                if p.status in (PointStatus.CANDIDATE, PointStatus.ACTIVE)]
        assert len(live) > 0.6 * len(points)
        rel = np.array([abs(p.inv_depth - t) / t for p, t in live])
        assert np.median(rel) < 0.05
        assert sum(p.status == PointStatus.ACTIVE for p, _ in live) > 0.5 * len(live)


class TestKeyframeDecision:
    def test_low_overlap_triggers(self):
        m = RelativePoseMeasurement.identity()
        assert should_create_keyframe(m, overlap=0.4)

    def test_stationary_does_not_trigger(self):
        m = RelativePoseMeasurement.identity()
        assert not should_create_keyframe(m, overlap=0.95)

    def test_large_translation_triggers(self):
        m = RelativePoseMeasurement.from_transform(np.eye(3), np.array([1.0, 0, 0]))
        assert should_create_keyframe(m, overlap=0.9)

    def test_rotation_scaled_by_scene_depth(self):
        from dvio.so3 import exp_so3
        m = RelativePoseMeasurement.from_transform(
            exp_so3(np.array([0.0, np.deg2rad(4.0), 0.0])), np.zeros(3))
        policy = KeyframePolicy(distance_threshold=0.12)
        assert not should_create_keyframe(m, 0.9, mean_scene_depth=1.0, policy=policy)
        assert should_create_keyframe(m, 0.9, mean_scene_depth=5.0, policy=policy)

    def test_threshold_boundary(self):
        m = RelativePoseMeasurement.from_transform(np.eye(3), np.array([0.11, 0, 0]))
        policy = KeyframePolicy(distance_threshold=0.12)
        assert not should_create_keyframe(m, 0.9, policy=policy)
        m2 = RelativePoseMeasurement.from_transform(np.eye(3), np.array([0.13, 0, 0]))
        assert should_create_keyframe(m2, 0.9, policy=policy)


def _active(pixel, inv_depth, variance):
    return CandidatePoint(np.asarray(pixel, dtype=float), inv_depth, variance,
                          status=PointStatus.ACTIVE)


class TestPropagation:
    def test_identity_preserves_points(self, plane_pair):
        pyr_a, _, _, _ = plane_pair
        old = _keyframe(pyr_a)
        old.points = [_active([100.0, 80.0], 0.5, 0.001),
                      _active([200.0, 150.0], 0.7, 0.002)]
        cfg = EpipolarSearchConfig(propagation_sigma=0.0)
        kf = propagate_to_new_keyframe(old, pyr_a, np.eye(3), np.zeros(3),
                                       1, 1.0, old.state, INTR, config=cfg,
                                       refill_target=0)
        assert len(kf.points) == 2
        got = sorted(kf.points, key=lambda p: p.pixel[0])
        for g, o in zip(got, old.points):
            assert np.allclose(g.pixel, o.pixel, atol=1e-9)
            assert np.isclose(g.inv_depth, o.inv_depth)
            assert np.isclose(g.variance, o.variance)
            assert g.status == PointStatus.ACTIVE

    def test_forward_motion_depth_and_variance(self, plane_pair):
        pyr_a, _, _, _ = plane_pair
        old = _keyframe(pyr_a)
        old.points = [_active([INTR.cx, INTR.cy], 0.5, 0.001)]
        # new camera 0.5 m closer along the optical axis
        cfg = EpipolarSearchConfig(propagation_sigma=0.0)
        kf = propagate_to_new_keyframe(old, pyr_a, np.eye(3),
                                       np.array([0.0, 0.0, -0.5]),
                                       1, 1.0, old.state, INTR, config=cfg,
                                       refill_target=0)
        (p,) = kf.points
        rho_new = 1.0 / 1.5
        assert np.isclose(p.inv_depth, rho_new)
        assert np.isclose(p.variance, 0.001 * (rho_new / 0.5) ** 4)

    def test_propagation_inflates_variance_by_default(self, plane_pair):
        pyr_a, _, _, _ = plane_pair
        old = _keyframe(pyr_a)
        old.points = [_active([INTR.cx, INTR.cy], 0.5, 0.001)]
        cfg = EpipolarSearchConfig()
        kf = propagate_to_new_keyframe(old, pyr_a, np.eye(3), np.zeros(3),
                                       1, 1.0, old.state, INTR, config=cfg,
                                       refill_target=0)
        (p,) = kf.points
        expected = 0.001 + (cfg.propagation_sigma * 0.5) ** 2
        assert np.isclose(p.variance, expected)

    def test_collision_keeps_smaller_variance(self, plane_pair):
        pyr_a, _, _, _ = plane_pair
        old = _keyframe(pyr_a)
        old.points = [_active([100.0, 80.0], 0.5, 0.005),
                      _active([100.2, 80.1], 0.6, 0.001)]
        kf = propagate_to_new_keyframe(old, pyr_a, np.eye(3), np.zeros(3),
                                       1, 1.0, old.state, INTR, refill_target=0)
        assert len(kf.points) == 1
        assert np.isclose(kf.points[0].inv_depth, 0.6)

    def test_behind_camera_dropped(self, plane_pair):
        pyr_a, _, _, _ = plane_pair
        old = _keyframe(pyr_a)
        old.points = [_active([INTR.cx, INTR.cy], 0.5, 0.001)]
        kf = propagate_to_new_keyframe(old, pyr_a, np.eye(3),
                                       np.array([0.0, 0.0, -3.0]),
                                       1, 1.0, old.state, INTR, refill_target=0)
        assert kf.points == []

    def test_candidates_not_propagated(self, plane_pair):
        pyr_a, _, _, _ = plane_pair
        old = _keyframe(pyr_a)
        old.points = [CandidatePoint(np.array([100.0, 80.0]), 0.5, 0.5)]
        kf = propagate_to_new_keyframe(old, pyr_a, np.eye(3), np.zeros(3),
                                       1, 1.0, old.state, INTR, refill_target=0)
        assert kf.points == []

    def test_refill_to_budget(self, plane_pair):
        pyr_a, _, _, _ = plane_pair
        old = _keyframe(pyr_a)
        old.points = [_active([100.0, 80.0], 0.5, 0.001)]
        kf = propagate_to_new_keyframe(old, pyr_a, np.eye(3), np.zeros(3),
                                       1, 1.0, old.state, INTR, refill_target=600)
        assert 200 <= len(kf.points) <= CFG.point_budget
        survivors = [p for p in kf.points if p.status == PointStatus.ACTIVE]
        assert len(survivors) == 1


class TestDepthMap:
    def test_dilation_fills_neighbors(self, plane_pair):
        pyr_a, _, _, _ = plane_pair
        kf = _keyframe(pyr_a)
        kf.points = [_active([100.0, 80.0], 0.5, 0.001)]
        m = kf.depth_map(dilate=True)
        assert m[80, 100] == 0.5
        for v, u in ((80, 101), (80, 99), (81, 100), (79, 100)):
            assert m[v, u] == 0.5
        assert m[82, 100] == 0.0
        assert np.count_nonzero(m) == 5

    def test_no_dilation(self, plane_pair):
        pyr_a, _, _, _ = plane_pair
        kf = _keyframe(pyr_a)
        kf.points = [_active([100.0, 80.0], 0.5, 0.001)]
        assert np.count_nonzero(kf.depth_map(dilate=False)) == 1

    def test_collision_smaller_variance_wins(self, plane_pair):
        pyr_a, _, _, _ = plane_pair
        kf = _keyframe(pyr_a)
        kf.points = [_active([100.2, 80.0], 0.5, 0.01),
                     _active([99.8, 80.0], 0.9, 0.001)]
        assert kf.depth_map(dilate=False)[80, 100] == 0.9

    def test_outliers_excluded(self, plane_pair):
        pyr_a, _, _, _ = plane_pair
        kf = _keyframe(pyr_a)
        kf.points = [CandidatePoint(np.array([100.0, 80.0]), 0.5, 0.001,
                                    status=PointStatus.OUTLIER)]
        assert np.count_nonzero(kf.depth_map()) == 0


class TestMakeKeyframe:
    def test_bootstrap_shared_inverse_depth(self, plane_pair):
        pyr_a, _, _, _ = plane_pair
        state = State(np.zeros(3), np.zeros(3), np.eye(3), Bias())
        rng = np.random.default_rng(11)
        kf = make_keyframe(pyr_a, state, 0, 0.0, 500, bootstrap_rng=rng)
        depths = {p.inv_depth for p in kf.points}
        assert len(depths) == 1
        (rho,) = depths
        assert 0.5 <= rho <= 2.0

    def test_bootstrap_deterministic_under_seed(self, plane_pair):
        pyr_a, _, _, _ = plane_pair
        state = State(np.zeros(3), np.zeros(3), np.eye(3), Bias())
        a = make_keyframe(pyr_a, state, 0, 0.0, 500,
                          bootstrap_rng=np.random.default_rng(3))
        b = make_keyframe(pyr_a, state, 0, 0.0, 500,
                          bootstrap_rng=np.random.default_rng(3))
        assert a.points[0].inv_depth == b.points[0].inv_depth
