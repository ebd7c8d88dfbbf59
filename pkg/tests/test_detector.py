import json
import warnings
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.special import expit

from backdoorlab.detector import (AnchorGrid, Assignment, FeatureExtractor, LossKind, LossName, TrainConfig,
                                  TrainingDiverged, assign_targets, backward, batch_objective,
                                  benchmark_penalty_overhead, build_training_set, class_scores, corner_views,
                                  detection_loss, extract_features, fine_tune, forward, gradient_flow,
                                  init_params, load_checkpoint, nms_classwise, pair_margins, penalty_scaling,
                                  predict, save_checkpoint, train)
from backdoorlab.detector.head import DetectorParams
from backdoorlab.geometry import BoundingBox
from backdoorlab.penalty import HeadMode, PenaltyConfig
from backdoorlab.poisoning import AttackStrategy, apply_attack, generate_dataset

from conftest import gt, pred

LOSSES = [LossKind(LossName.CE), LossKind(LossName.BCE), LossKind(LossName.FOCAL),
          LossKind(LossName.FOCAL, alpha=None, normalize="anchors")]


@pytest.fixture(scope="module")
def manifests():
    clean = generate_dataset(24, 3, image_size=(144, 240), seed=2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        poisoned = apply_attack(clean, AttackStrategy("baddet+oda"), 0.5, seed=2)
    return clean, poisoned


def quick_cfg(**kw):
    base = dict(learning_rate=0.2, epochs=3, batch_size=8, head_depth=1,
                extractor=FeatureExtractor(views=corner_views()), penalty_cfg=PenaltyConfig(lam=0.0))
    base.update(kw)
    return TrainConfig(**base)


# ------------------------------------------------------------------ features


class TestFeatures:
    def test_black_cell(self):
        ext = FeatureExtractor(bins=4)
        f = extract_features(np.zeros((30, 30, 3), np.uint8), BoundingBox(0, 0, 10, 10), ext)
        np.testing.assert_array_equal(f[:3], 0.0)
        np.testing.assert_array_equal(f[3:15].reshape(3, 4), [[1, 0, 0, 0]] * 3)
        assert f[-1] == 1.0 and f.size == ext.output_dim

    def test_pure_blue_histogram(self):
        img = np.zeros((20, 20, 3), np.uint8)
        img[..., 2] = 255
        f = extract_features(img, BoundingBox(0, 0, 20, 20), FeatureExtractor(bins=4))
        np.testing.assert_array_equal(f[11:15], [0, 0, 0, 1])
        np.testing.assert_allclose(f[:3], [0, 0, 1])

    def test_matches_direct_pooling(self, rng):
        img = rng.integers(0, 256, size=(60, 90, 3)).astype(np.uint8)
        ext = FeatureExtractor(bins=3, power=1.0)
        f = ext.extract(img, BoundingBox(30, 20, 60, 40))
        patch = img[20:40, 30:60].reshape(-1, 3).astype(int)
        np.testing.assert_allclose(f[:3], patch.mean(0) / 255)
        for c in range(3):
            hist = np.bincount(patch[:, c] * 3 // 256, minlength=3) / len(patch)
            np.testing.assert_allclose(f[3 + 3 * c:6 + 3 * c], hist)

    def test_equivariance(self, rng):
        patch = rng.integers(0, 256, size=(30, 30, 3)).astype(np.uint8)
        img = np.zeros((90, 90, 3), np.uint8)
        img[0:30, 0:30] = patch
        img[60:90, 30:60] = patch
        ext = FeatureExtractor(views=corner_views())
        feats = ext.extract_grid(img, AnchorGrid(3, 3, 90, 90)).reshape(ext.levels, 9, -1)
        np.testing.assert_array_equal(feats[0, 0], feats[0, 7])

    def test_outside_anchor_rejected(self):
        with pytest.raises(ValueError):
            extract_features(np.zeros((10, 10, 3), np.uint8), BoundingBox(0, 0, 11, 5))

    def test_grid_tiles_image(self):
        g = AnchorGrid(3, 4, 120, 90)
        assert sum(a.area for a in g.anchors) == 120 * 90
        with pytest.raises(ValueError):
            AnchorGrid(3, 3, 100, 90)

    def test_extract_grid_agrees_with_single(self, rng):
        img = rng.integers(0, 256, size=(96, 96, 3)).astype(np.uint8)
        ext = FeatureExtractor(views=corner_views())
        grid = AnchorGrid(3, 3, 96, 96)
        feats = ext.extract_grid(img, grid)
        for level in range(ext.levels):
            for c, anchor in enumerate(grid.anchors):
                np.testing.assert_allclose(feats[level * 9 + c], ext.extract(img, anchor, level))


# ---------------------------------------------------------------- head


class TestForward:
    def test_zero_weights(self):
        p = init_params(3, LossKind(LossName.BCE))
        p.W[:] = 0
        assert not forward(p, np.ones((5, p.extractor.output_dim))).any()

    def test_basis_features_pick_columns(self, rng):
        p = init_params(3, LossKind(LossName.BCE))
        p.W = rng.normal(size=p.W.shape)
        eye = np.eye(p.extractor.output_dim)
        np.testing.assert_allclose(forward(p, eye), p.W.T)

    @pytest.mark.parametrize("depth", [1, 2])
    def test_matches_dot_products(self, rng, depth):
        p = init_params(3, LossKind(LossName.CE), head_depth=depth, hidden=5, seed=1)
        p.W = rng.normal(size=p.W.shape)
        h = rng.normal(size=(4, p.extractor.output_dim))
        z = forward(p, h)
        for a in range(4):
            x = h[a] if depth == 1 else np.append(np.tanh([h[a] @ p.V[:, k] for k in range(5)]), 1.0)
            for c in range(4):
                assert z[a, c] == pytest.approx(sum(x[i] * p.W[c, i] for i in range(len(x))), abs=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            forward(init_params(3, LossKind()), np.ones((2, 3)))


class TestDetectionLoss:
    @pytest.mark.parametrize("kind", LOSSES)
    def test_confident_correct_is_zero(self, kind):
        n = 4 if kind.background_column else 3
        z = np.full((3, n), -40.0)
        t = np.array([1, 2, 0])
        off = int(kind.background_column)
        z[0, 0 + off] = z[1, 1 + off] = 40.0
        if off:
            z[2, 0] = 40.0
        assert detection_loss(z, t, kind)[0] < 1e-12

    def test_ce_uniform(self):
        assert detection_loss(np.zeros((5, 4)), np.array([0, 1, 2, 3, 1]), LossKind())[0] == pytest.approx(np.log(4))

    def test_ignored_anchors(self):
        z = np.random.default_rng(0).normal(size=(3, 4))
        v, g = detection_loss(z, np.array([1, -1, 2]), LossKind())
        assert not g[1].any()
        assert v == pytest.approx(detection_loss(z[[0, 2]], np.array([1, 2]), LossKind())[0])

    def test_focal_normalised_by_positives(self):
        z = np.random.default_rng(1).normal(size=(6, 3))
        t = np.array([1, 0, 0, 2, 0, 0])
        pos = detection_loss(z, t, LossKind(LossName.FOCAL))[0]
        anc = detection_loss(z, t, LossKind(LossName.FOCAL, normalize="anchors"))[0]
        assert pos == pytest.approx(anc * 6 / 2)
        assert LossKind(LossName.BCE).normalizer == "anchors"

    def test_focal_alpha_validation(self):
        with pytest.raises(ValueError):
            LossKind(LossName.FOCAL, alpha=0.0)
        with pytest.raises(ValueError):
            LossKind(LossName.FOCAL, gamma=-1)
        with pytest.raises(ValueError):
            LossKind(normalize="images")


@given(st.lists(st.floats(-6, 6), min_size=12, max_size=12), st.lists(st.integers(0, 3), min_size=4, max_size=4))
def test_focal_gamma_zero_is_bce(z, t):
    z, t = np.array(z).reshape(4, 3), np.array(t)
    f = LossKind(LossName.FOCAL, gamma=0.0, alpha=None, normalize="anchors")
    b = LossKind(LossName.BCE)
    vf, gf = detection_loss(z, t, f)
    vb, gb = detection_loss(z, t, b)
    assert vf == pytest.approx(vb, rel=1e-12)
    np.testing.assert_allclose(gf, gb, atol=1e-14)


@given(st.lists(st.floats(-6, 6), min_size=12, max_size=12), st.lists(st.integers(0, 3), min_size=4, max_size=4))
def test_focal_matches_reference_formula(z, t):
    z, t = np.array(z).reshape(4, 3), np.array(t)
    kind = LossKind(LossName.FOCAL, gamma=2.0, alpha=0.25, normalize="anchors")
    p = expit(z)
    y = np.zeros_like(z)
    for a, c in enumerate(t):
        if c > 0:
            y[a, c - 1] = 1
    pt = np.where(y == 1, p, 1 - p)
    at = np.where(y == 1, 0.25, 0.75)
    ref = -(at * (1 - pt) ** 2 * np.log(pt)).sum() / 4
    assert detection_loss(z, t, kind)[0] == pytest.approx(ref, rel=1e-9, abs=1e-12)


def _fd(f, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f()
        x[idx] = old - h
        dn = f()
        x[idx] = old
        g[idx] = (up - dn) / (2 * h)
    return g


@pytest.mark.parametrize("kind", LOSSES, ids=lambda k: f"{k.name.value}-{k.normalizer}")
@pytest.mark.parametrize("mode", list(HeadMode))
@pytest.mark.parametrize("depth", [1, 2])
def test_total_loss_gradient_matches_fd(manifests, kind, mode, depth):
    _, poisoned = manifests
    cfg = quick_cfg(loss_kind=kind, penalty_cfg=PenaltyConfig(0.2, 0.5, 0.7, mode), head_depth=depth, hidden=4,
                    extractor=FeatureExtractor(bins=2, views=corner_views()))
    data = build_training_set(poisoned, cfg).subset(np.arange(6))
    assert data.n_pairs > 0
    p = init_params(3, kind, cfg.extractor, head_depth=depth, hidden=4, seed=3, scale=0.5)
    idx = np.arange(len(data))
    feats = data.features.reshape(-1, data.features.shape[-1])

    def objective():
        return batch_objective(p, data, idx, kind, cfg.penalty_cfg)[0].total

    bl, _ = batch_objective(p, data, idx, kind, cfg.penalty_cfg)
    dW, dV = backward(p, feats, bl.grad_logits)
    np.testing.assert_allclose(dW, _fd(objective, p.W), rtol=1e-5, atol=1e-8)
    if depth == 2:
        np.testing.assert_allclose(dV, _fd(objective, p.V), rtol=1e-5, atol=1e-8)


# ---------------------------------------------------------------- targets


class TestAssignment:
    def setup_method(self):
        self.anchors = np.array([[0, 0, 10, 10], [0, 0, 9, 10], [20, 20, 30, 30]], float)

    def test_one_to_one(self):
        t = assign_targets(self.anchors, [gt((0, 0, 10, 10), 2)], Assignment.ONE_TO_ONE)
        assert t.tolist() == [2, 0, 0]

    def test_multi(self):
        t = assign_targets(self.anchors, [gt((0, 0, 10, 10), 2)], Assignment.MULTI)
        assert t.tolist() == [2, 2, 0]

    def test_removed_and_degenerate_are_background(self):
        objs = [gt((0, 0, 10, 10), 2, removed=True), gt((25, 25, 25, 25), 1)]
        assert not assign_targets(self.anchors, objs, Assignment.MULTI).any()

    def test_relabelled_target(self):
        o = gt((20, 20, 30, 30), 2)
        o.train_label = 3
        assert assign_targets(self.anchors, [o], Assignment.MULTI).tolist() == [0, 0, 3]


# ---------------------------------------------------------------- training


class TestTrain:
    def test_deterministic(self, manifests):
        clean, _ = manifests
        a = train(clean, quick_cfg())
        b = train(clean, quick_cfg())
        assert np.array_equal(a.params.W, b.params.W)
        assert [r.total for r in a.trace] == [r.total for r in b.trace]

    def test_lambda_zero_equals_no_penalty(self, manifests):
        clean, poisoned = manifests
        cfg = quick_cfg()
        data = build_training_set(poisoned, cfg)
        stripped = replace(data, pair_img=data.pair_img[:0], pair_anchor=data.pair_anchor[:0],
                           pair_col=data.pair_col[:0])
        a, b = train(data, cfg), train(stripped, cfg)
        assert np.array_equal(a.params.W, b.params.W)
        assert all(r.penalty == 0 for r in a.trace)

    def test_clean_loss_decreases(self, manifests):
        clean, _ = manifests
        tr = train(clean, quick_cfg(epochs=12)).trace
        first, last = np.mean([r.total for r in tr[:3]]), np.mean([r.total for r in tr[-3:]])
        assert last < first

    def test_penalty_decreases_on_poisoned(self, manifests):
        _, poisoned = manifests
        tr = train(poisoned, quick_cfg(epochs=12, penalty_cfg=PenaltyConfig(lam=1.0))).trace
        assert tr[-1].penalty < tr[0].penalty

    def test_divergence_reported(self, manifests):
        clean, _ = manifests
        with pytest.raises(TrainingDiverged) as err:
            with np.errstate(all="ignore"):
                train(clean, quick_cfg(learning_rate=1e308, momentum=0.9, epochs=5))
        assert np.all(np.isfinite(err.value.last_params.W))

    @pytest.mark.parametrize("kw", [{"learning_rate": 0}, {"batch_size": 0}, {"momentum": 1.0},
                                    {"epochs": -1}, {"clip_norm": 0.0}])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            quick_cfg(**kw)

    def test_config_round_trip(self):
        cfg = quick_cfg(loss_kind=LossKind(LossName.FOCAL), clip_norm=1.0)
        assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg

    def test_clipping_bounds_step(self, manifests):
        clean, _ = manifests
        cfg = quick_cfg(epochs=1, batch_size=24, momentum=0.0, learning_rate=1.0, clip_norm=1e-3)
        init = init_params(3, cfg.loss_kind, cfg.extractor)
        out = train(clean, cfg, init=init)
        assert np.linalg.norm(out.params.W - init.W) <= 1e-3 + 1e-12


class TestFineTune:
    def test_zero_epochs(self, manifests):
        clean, _ = manifests
        p = train(clean, quick_cfg()).params
        assert np.array_equal(fine_tune(p, clean, quick_cfg(epochs=0)).params.W, p.W)

    def test_rejects_poisoned(self, manifests):
        clean, poisoned = manifests
        p = train(clean, quick_cfg()).params
        with pytest.raises(ValueError):
            fine_tune(p, poisoned, quick_cfg())

    def test_forces_lambda_zero(self, manifests):
        clean, _ = manifests
        p = train(clean, quick_cfg()).params
        tr = fine_tune(p, clean, quick_cfg(epochs=2, penalty_cfg=PenaltyConfig(lam=5.0))).trace
        assert all(r.penalty == 0 for r in tr)


class TestGradientFlow:
    def _setup(self, manifests, mode=HeadMode.INDEPENDENT):
        _, poisoned = manifests
        kind = LossKind(LossName.CE) if mode is HeadMode.SOFTMAX else LossKind(LossName.BCE)
        cfg = quick_cfg(loss_kind=kind, penalty_cfg=PenaltyConfig(lam=1.0, head_mode=mode))
        data = build_training_set(poisoned, cfg).subset(np.arange(4))
        return init_params(3, kind, cfg.extractor, seed=5, scale=0.3), data, cfg

    def test_zero_field_constant(self, manifests):
        p, data, cfg = self._setup(manifests)
        cfg = replace(cfg, penalty_cfg=PenaltyConfig(lam=0.0))
        tr = gradient_flow(p, data, cfg, dt=1e-2, steps=5)
        assert all(np.array_equal(w, p.W) for w in tr.weights)

    @pytest.mark.parametrize("mode", list(HeadMode))
    def test_attack_flow_lowers_margins(self, manifests, mode):
        p, data, cfg = self._setup(manifests, mode)
        tr = gradient_flow(p, data, cfg, dt=1e-2, steps=20)
        mean = tr.margins.mean(axis=1)
        assert np.all(np.diff(mean) < 0)

    def test_first_order_in_dt(self, manifests):
        p, data, cfg = self._setup(manifests)
        a = gradient_flow(p, data, cfg, dt=2e-3, steps=1).margins[1] - pair_margins(p, data, HeadMode.INDEPENDENT)[0]
        b = gradient_flow(p, data, cfg, dt=1e-3, steps=1).margins[1] - pair_margins(p, data, HeadMode.INDEPENDENT)[0]
        np.testing.assert_allclose(a, 2 * b, rtol=1e-9)

    def test_linear_head_only(self, manifests):
        _, data, cfg = self._setup(manifests)
        deep = init_params(3, cfg.loss_kind, cfg.extractor, head_depth=2)
        with pytest.raises(ValueError):
            gradient_flow(deep, data, cfg)


# ---------------------------------------------------------------- inference


class TestInference:
    def test_high_threshold_empty(self):
        p = init_params(3, LossKind(LossName.BCE))
        assert predict(p, np.zeros((90, 90, 3), np.uint8), score_threshold=1.0) == []

    def test_same_class_suppressed(self):
        a = pred((0, 0, 100, 100), (2, 0, 0))
        b = pred((0, 0, 100, 95), (1, 0, 0), label=1)
        assert nms_classwise([a, b], 0.5) == [a]

    def test_different_classes_survive(self):
        a = pred((0, 0, 100, 100), (2, 0, 0))
        b = pred((0, 0, 100, 95), (0, 1, 0))
        assert len(nms_classwise([a, b], 0.5)) == 2

    def test_scores_follow_head_mode(self, rng):
        z = rng.normal(size=(5, 4))
        ce = init_params(3, LossKind(LossName.CE))
        sm = np.exp(z) / np.exp(z).sum(1, keepdims=True)
        np.testing.assert_allclose(class_scores(ce, z), sm[:, 1:])
        bce = init_params(3, LossKind(LossName.BCE))
        np.testing.assert_allclose(class_scores(bce, z[:, 1:]), expit(z[:, 1:]))

    def test_predictions_valid(self, manifests):
        clean, _ = manifests
        p = train(clean, quick_cfg(epochs=2)).params
        for pr in predict(p, clean.scenes[0].image):
            assert 0 <= pr.score <= 1 and 1 <= pr.label <= 3 and np.all(np.isfinite(pr.logits))


def test_checkpoint_round_trip(tmp_path, manifests):
    clean, _ = manifests
    cfg = quick_cfg(head_depth=2, hidden=3)
    p = train(clean, cfg).params
    back, meta = load_checkpoint(save_checkpoint(p, tmp_path / "c.json", cfg.to_dict()))
    assert np.array_equal(back.W, p.W) and np.array_equal(back.V, p.V)
    assert TrainConfig.from_dict(meta) == cfg
    assert back.extractor == p.extractor and back.head_mode == p.head_mode


def test_params_shape_checks():
    with pytest.raises(ValueError):
        DetectorParams(np.zeros((2, 17)), 3)


class TestBench:
    def test_share_bounds_and_skip(self, manifests):
        _, poisoned = manifests
        cfg = quick_cfg(penalty_cfg=PenaltyConfig(lam=1.0))
        data = build_training_set(poisoned, cfg)
        rep = benchmark_penalty_overhead(data, cfg, 5)
        assert 0 < rep.share_mean < 100 and rep.pairs_mean > 0
        off = benchmark_penalty_overhead(data, replace(cfg, penalty_cfg=PenaltyConfig(lam=0.0)), 5)
        assert off.share_mean == 0.0 and off.skipped

    def test_scaling_linear(self):
        rep = penalty_scaling(quick_cfg(penalty_cfg=PenaltyConfig(lam=1.0)), densities=(100, 200, 300, 400, 500))
        assert rep.pairs == sorted(rep.pairs) and rep.slope_ms_per_pair > 0

    def test_batches_validated(self, manifests):
        clean, _ = manifests
        with pytest.raises(ValueError):
            benchmark_penalty_overhead(build_training_set(clean, quick_cfg()), quick_cfg(), 0)
