import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from padalign.autolabel import Recording, backtrack
from padalign.geom import Pose2, camera_extrinsic, make_camera
from padalign.perception import DetectorModel, iou, quality_for_extent
from padalign.render import render_frame
from padalign.rngstream import stream
from padalign.trainer import (
    FEATURE_DIM,
    PATCH_SIZE,
    ClassifierModel,
    HoldoutStats,
    PatchSample,
    TrainerError,
    apply_augmentations,
    augment,
    augment_dataset,
    build_dataset,
    classify,
    extract_features,
    features_and_labels,
    fit_logistic,
    holdout_stats,
    loss_and_gradient,
    register_appearance,
    split_dataset,
    train,
)
from padalign.vehicle import OdometrySample, VehicleGeometry
from padalign.world import ChargepadSpec, World

GEO = VehicleGeometry()
CAM = make_camera("front", (200, 156), math.radians(190), camera_extrinsic(3.6, 0.0, 0.6, 0.0, math.radians(-25)))


def _recording(pad=Pose2(6.0, 0.0, 0.0), run=4.0, n=40, dt=0.1, stride=2):
    """Noiseless straight approach ending with the coil on the pad center."""
    world = World(pad=ChargepadSpec(pose=pad))
    end_x = pad.x - GEO.coil_offset[0]
    step = run / n
    frames, odom = [], []
    for k in range(n + 1):
        pose = Pose2(end_x - run + k * step, 0.0, 0.0)
        if k > 0:
            odom.append(OdometrySample(delta=Pose2(step, 0.0, 0.0), dt=dt))
        if k % stride == 0:
            frames.append(render_frame(world, pose, CAM, t=k * dt))
    return Recording(
        frames=tuple(frames),
        odometry=tuple(odom),
        cameras=(CAM,),
        final_pad_pose_vehicle=Pose2(GEO.coil_offset[0], GEO.coil_offset[1], 0.0),
        pad_dims=(world.pad.length, world.pad.width, world.pad.height),
        meta={"dt": dt, "seed": 0},
    )


def _flat(value=0.5):
    return np.full((PATCH_SIZE, PATCH_SIZE, 3), value, dtype=np.float32)


class _FixedRng:
    """Stub generator returning preset draws for transform parameter tests."""

    def __init__(self, uniform=1.0, normal=0.0):
        self._u, self._n = uniform, normal

    def uniform(self, lo, hi, size=None):
        v = min(max(self._u, lo), hi)
        return v if size is None else np.full(size, v)

    def normal(self, loc, scale, size=None):
        return self._n if size is None else np.full(size, self._n)


# ---------------------------------------------------------------------------
# dataset


def test_build_dataset_counts_and_negative_separation():
    rec = _recording()
    ann = backtrack(rec)
    kept = ann.kept()
    rng = stream(5, "neg")
    samples = build_dataset(ann, rec, negatives_per_frame=2, rng=rng)
    pos = [s for s in samples if s.label == "pad"]
    neg = [s for s in samples if s.label == "background"]
    assert len(pos) == len(kept)
    assert len(neg) == 2 * len({(e.t, e.camera_id) for e in kept})
    for s in pos:
        assert s.pixels.shape == (PATCH_SIZE, PATCH_SIZE, 3)
        assert s.pixels.dtype == np.float32


def test_negatives_never_overlap_kept_boxes():
    rec = _recording()
    ann = backtrack(rec)
    boxes = {}
    for e in ann.kept():
        boxes.setdefault((e.t, e.camera_id), []).append(e.box)
    samples = build_dataset(ann, rec, negatives_per_frame=3, rng=stream(6, "neg"))
    for s in samples:
        if s.label != "background":
            continue
        for kept_box in boxes[(s.source[0], s.source[1])]:
            assert iou(s.box, kept_box) == 0.0


def test_pad_patches_differ_from_ground_in_mean_color():
    rec = _recording()
    ann = backtrack(rec)
    samples = build_dataset(ann, rec, negatives_per_frame=3, rng=stream(6, "neg"))
    pos_mean = np.mean([s.pixels.mean() for s in samples if s.label == "pad"])
    neg_mean = np.mean([s.pixels.mean() for s in samples if s.label == "background"])
    assert abs(pos_mean - neg_mean) > 0.05


def test_build_dataset_requires_annotations():
    rec = _recording()
    from padalign.autolabel import AnnotationSet

    with pytest.raises(TrainerError, match="empty-annotations"):
        build_dataset(AnnotationSet([]), rec)


# ---------------------------------------------------------------------------
# augmentation


def test_augment_produces_exactly_factor_variants():
    s = PatchSample(_flat(), "pad", (0.0, "front", "test"))
    out = augment(s, stream(1, "aug"), factor=30)
    assert len(out) == 30
    assert all(v.label == "pad" for v in out)
    assert all(v.pixels.shape == (PATCH_SIZE, PATCH_SIZE, 3) for v in out)


def test_augment_dataset_multiplies_by_factor():
    sset = [PatchSample(_flat(0.3), "pad", (0.0, "front", "t")) for _ in range(4)]
    out = augment_dataset(sset, stream(2, "aug"), factor=30)
    assert len(out) == 120


def test_empty_transform_list_is_identity():
    x = stream(3, "aug").uniform(0.1, 0.9, size=(PATCH_SIZE, PATCH_SIZE, 3)).astype(np.float32)
    y = apply_augmentations(x, [], stream(4, "aug"))
    assert np.array_equal(x, y)


def test_brightness_scales_mean_intensity():
    x = _flat(0.4)
    y = apply_augmentations(x, ["brightness"], _FixedRng(uniform=1.3))
    assert float(y.mean()) == pytest.approx(0.4 * 1.3, rel=1e-5)


def test_noise_augmentation_bounded_and_clipped():
    x = _flat(0.98)
    y = apply_augmentations(x, ["noise"], _FixedRng(uniform=0.05, normal=0.4))
    assert float(y.max()) <= 1.0
    assert float(y.min()) >= 0.0


def test_augment_deterministic_for_seed():
    s = PatchSample(stream(9, "p").uniform(0, 1, size=(PATCH_SIZE, PATCH_SIZE, 3)).astype(np.float32), "pad", (0, "front", "t"))
    a = augment(s, stream(7, "aug"), factor=10)
    b = augment(s, stream(7, "aug"), factor=10)
    assert all(np.array_equal(x.pixels, y.pixels) for x, y in zip(a, b))


# ---------------------------------------------------------------------------
# features


def test_features_dim_and_block_normalization():
    rng = stream(11, "feat")
    f = extract_features(rng.uniform(0, 1, size=(PATCH_SIZE, PATCH_SIZE, 3)))
    assert f.shape == (FEATURE_DIM,)
    for lo, hi in ((0, 8), (8, 16), (16, 24), (24, 32), (32, 48)):
        assert float(f[lo:hi].sum()) == pytest.approx(1.0, abs=1e-9)


def test_uniform_patch_feature_spikes():
    f = extract_features(_flat(0.5))
    for lo in (0, 8, 16):
        block = f[lo : lo + 8]
        assert block[4] == 1.0 and block.sum() == 1.0
    grad = f[24:32]
    assert grad[0] == 1.0  # zero-magnitude convention bin


def test_color_histogram_rotation_invariant():
    rng = stream(13, "feat")
    x = rng.uniform(0, 1, size=(PATCH_SIZE, PATCH_SIZE, 3))
    fa = extract_features(x)
    fb = extract_features(np.rot90(x, axes=(0, 1)).copy())
    assert np.allclose(fa[:24], fb[:24])


def test_checkerboard_gradient_orientations():
    tile = np.kron(np.indices((4, 4)).sum(axis=0) % 2, np.ones((6, 6)))
    x = np.repeat(tile[:, :, None], 3, axis=2).astype(np.float32)
    grad = extract_features(x)[24:32]
    # flat interiors and horizontal edges share bin 0, vertical edges fill
    # bin 4, tile corners leak into the two diagonal bins, nothing else
    assert grad[0] == pytest.approx(0.75)
    assert grad[4] == pytest.approx(0.1875)
    assert grad[2] + grad[6] == pytest.approx(0.0625)
    assert grad[1] + grad[3] + grad[5] + grad[7] == 0.0


# ---------------------------------------------------------------------------
# training


def test_separable_toy_set_fits_perfectly():
    rng = stream(17, "toy")
    n = 60
    X = np.vstack([rng.normal((2.0, -2.0), 0.2, size=(n, 2)), rng.normal((-2.0, 2.0), 0.2, size=(n, 2))])
    y = np.concatenate([np.ones(n), np.zeros(n)])
    model = fit_logistic(X, y)
    assert model.train_accuracy == 1.0
    assert model.train_loss_history[-1] < 0.05


def test_gradient_matches_finite_differences():
    rng = stream(19, "fd")
    eps = 1e-5
    for _ in range(100):
        n = int(rng.integers(5, 20))
        X = rng.normal(size=(n, FEATURE_DIM))
        y = (rng.uniform(size=n) > 0.5).astype(float)
        if len(np.unique(y)) < 2:
            continue
        w = rng.normal(scale=0.5, size=FEATURE_DIM + 1)
        _, g = loss_and_gradient(w, X, y, l2=1e-3)
        for a in rng.choice(FEATURE_DIM + 1, size=6, replace=False):
            dw = np.zeros_like(w)
            dw[a] = eps
            lp, _ = loss_and_gradient(w + dw, X, y, l2=1e-3)
            lm, _ = loss_and_gradient(w - dw, X, y, l2=1e-3)
            fd = (lp - lm) / (2 * eps)
            assert abs(g[a] - fd) / max(abs(fd), 1e-8) < 1e-5


def test_shuffled_labels_give_chance_accuracy():
    rng = stream(23, "null")
    X = rng.normal(size=(2000, 6))
    y = (rng.uniform(size=2000) > 0.5).astype(float)
    model = fit_logistic(X, y)
    assert abs(model.train_accuracy - 0.5) < 0.05


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 1000))
def test_loss_history_non_increasing(seed):
    rng = stream(seed, "mono")
    X = rng.normal(size=(40, 6))
    w_true = rng.normal(size=6)
    y = (X @ w_true + rng.normal(scale=0.5, size=40) > 0).astype(float)
    if len(np.unique(y)) < 2:
        return
    model = fit_logistic(X, y)
    h = np.array(model.train_loss_history)
    assert np.all(np.diff(h) <= 1e-6)
    assert np.all(np.isfinite(model.weights))


def test_single_class_dataset_rejected():
    X = np.ones((10, 3))
    with pytest.raises(TrainerError, match="single-class"):
        fit_logistic(X, np.ones(10))


def test_training_deterministic():
    rec = _recording()
    ann = backtrack(rec)

    def run():
        base = build_dataset(ann, rec, 2, stream(31, "neg"))
        data = augment_dataset(base, stream(31, "aug"), factor=5)
        return train(data)

    a, b = run(), run()
    assert np.array_equal(a.weights, b.weights)
    assert a.train_loss_history == b.train_loss_history


def test_end_to_end_patch_training_separates_pad_from_ground():
    rec = _recording()
    ann = backtrack(rec)
    base = build_dataset(ann, rec, 2, stream(37, "neg"))
    data = augment_dataset(base, stream(37, "aug"), factor=8)
    tr, hold = split_dataset(data, stream(37, "split"))
    model = train(tr)
    stats = holdout_stats(model, hold, "aruco_a", iou_proxy=0.9)
    assert stats.count >= 20
    assert stats.accuracy > 0.9
    probs = [classify(model, s.pixels) for s in hold if s.label == "pad"]
    assert float(np.mean(probs)) > 0.5


# ---------------------------------------------------------------------------
# registration


def _model():
    return ClassifierModel(weights=np.zeros(FEATURE_DIM + 1))


def test_register_quality_formula():
    det = DetectorModel()
    out = register_appearance(det, _model(), HoldoutStats("logo_b", 1.0, 40, 0.9))
    assert dict(out.learned)["logo_b"] == pytest.approx(0.9)
    out2 = register_appearance(det, _model(), HoldoutStats("logo_b", 0.5, 40, 0.9))
    assert dict(out2.learned)["logo_b"] == 0.0


def test_register_requires_holdout_size():
    with pytest.raises(TrainerError, match="insufficient-holdout"):
        register_appearance(DetectorModel(), _model(), HoldoutStats("x", 1.0, 19, 1.0))


def test_register_leaves_other_entries_untouched():
    det = DetectorModel(learned=(("aruco_a", 0.8), ("logo_b", 0.3)))
    out = register_appearance(det, _model(), HoldoutStats("qr_c", 0.95, 30, 0.8))
    assert out.learned[:2] == det.learned
    assert out.learned[2][0] == "qr_c"
    # re-registering an existing id replaces it in place
    out2 = register_appearance(out, _model(), HoldoutStats("logo_b", 1.0, 30, 0.5))
    assert dict(out2.learned)["logo_b"] == pytest.approx(0.5)
    assert out2.learned[0] == ("aruco_a", 0.8)


def test_registered_appearance_extends_detection_reach():
    det = DetectorModel()
    out = register_appearance(det, _model(), HoldoutStats("aruco_a", 1.0, 40, 0.85))
    # an extent the factory model rejects now clears the quality threshold
    assert quality_for_extent(det, 12.5) < det.quality_threshold
    assert quality_for_extent(out, 12.5, "aruco_a") >= det.quality_threshold
