"""Online self-supervised training from auto-annotated recordings.

Kept annotations become positive patches, ground regions become negatives,
photometric/geometric augmentation multiplies the set, and a small logistic
classifier over hand-crafted features is fit by batch gradient descent. A
holdout-scored quality couples the result back into the detector registry,
so the next maneuver can see the pad that this one had to be driven onto
manually.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .autolabel import AnnotationSet, Recording
from .perception import DetectorModel, iou
from .rngstream import stream
from .world import SEG_GROUND

PATCH_SIZE = 24
FEATURE_DIM = 48


class TrainerError(ValueError):
    pass


@dataclass(frozen=True)
class PatchSample:
    """One training patch: a small color raster plus its provenance."""

    pixels: np.ndarray  # (PATCH_SIZE, PATCH_SIZE, 3) float32 in [0, 1]
    label: str  # "pad" or "background"
    source: tuple  # (t, camera_id, stage)
    box: tuple[float, float, float, float] | None = None


@dataclass
class ClassifierModel:
    weights: np.ndarray  # (feature_dim + 1,), bias last
    feature_dim: int = FEATURE_DIM
    train_loss_history: list = field(default_factory=list)
    train_accuracy: float = 0.0


@dataclass(frozen=True)
class HoldoutStats:
    appearance_id: str
    accuracy: float
    count: int
    iou_proxy: float


# ---------------------------------------------------------------------------
# dataset construction


def _resample_patch(appearance: np.ndarray, box, size: int = PATCH_SIZE) -> np.ndarray:
    x0, y0, x1, y1 = box
    us = x0 + (np.arange(size) + 0.5) * (x1 - x0) / size - 0.5
    vs = y0 + (np.arange(size) + 0.5) * (y1 - y0) / size - 0.5
    cols, rows = np.meshgrid(us, vs)
    out = np.empty((size, size, 3), dtype=np.float32)
    for c in range(3):
        out[:, :, c] = ndimage.map_coordinates(appearance[:, :, c], [rows, cols], order=1, mode="nearest")
    return out


def _ground_fraction(seg: np.ndarray, box) -> float:
    h, w = seg.shape
    c0 = int(max(0, math.floor(box[0])))
    r0 = int(max(0, math.floor(box[1])))
    c1 = int(min(w, math.ceil(box[2])))
    r1 = int(min(h, math.ceil(box[3])))
    if c1 <= c0 or r1 <= r0:
        return 0.0
    win = seg[r0:r1, c0:c1]
    return float(np.mean(win == SEG_GROUND))


# below this box short side the raster carries no appearance signal to learn
MIN_PATCH_EXTENT_PX = 6.0


def trainable(entries) -> list:
    """Kept annotations large enough in the recorded raster to train on."""
    return [e for e in entries if min(e.box[2] - e.box[0], e.box[3] - e.box[1]) >= MIN_PATCH_EXTENT_PX]


def build_dataset(
    ann: AnnotationSet,
    rec: Recording,
    negatives_per_frame: int = 2,
    rng: np.random.Generator | None = None,
) -> list[PatchSample]:
    """One positive patch per trainable kept annotation plus ground negatives.

    Sub-MIN_PATCH_EXTENT_PX boxes are annotation-correct but appearance-empty
    (the pad resolves below the raster's pixel pitch), so they are excluded
    here rather than at annotation time. Negatives are size-matched boxes
    dropped uniformly at random, accepted only when they miss every kept box
    entirely and land mostly on ground.
    """
    kept = trainable(ann.kept())
    if not kept:
        raise TrainerError("empty-annotations: nothing to train on")
    rng = rng or stream(0, "trainer", "negatives")
    frames = {(fr.t, fr.camera_id): fr for fr in rec.frames}
    by_frame: dict[tuple, list] = {}
    for e in kept:
        by_frame.setdefault((e.t, e.camera_id), []).append(e)
    samples: list[PatchSample] = []
    for key in sorted(by_frame, key=lambda k: (k[0], k[1])):
        fr = frames[key]
        if fr.appearance is None:
            raise TrainerError("modality-missing: appearance")
        if fr.seg is None:
            raise TrainerError("modality-missing: seg")
        entries = by_frame[key]
        for e in entries:
            samples.append(PatchSample(_resample_patch(fr.appearance, e.box), "pad", (e.t, e.camera_id, e.stage), e.box))
        W, H = fr.resolution
        placed = 0
        for _ in range(100 * negatives_per_frame):
            if placed >= negatives_per_frame:
                break
            side = rng.uniform(10.0, min(W, H) / 3.0)
            aspect = rng.uniform(0.6, 1.6)
            bw, bh = side * aspect, side
            x0 = rng.uniform(0.0, max(W - bw, 1.0))
            y0 = rng.uniform(0.0, max(H - bh, 1.0))
            cand = (x0, y0, x0 + bw, y0 + bh)
            if any(iou(cand, e.box) > 0.0 for e in entries):
                continue
            if _ground_fraction(fr.seg, cand) < 0.7:
                continue
            samples.append(PatchSample(_resample_patch(fr.appearance, cand), "background", (key[0], key[1], "negative"), cand))
            placed += 1
    return samples


# ---------------------------------------------------------------------------
# augmentation


def _affine2d(pixels: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    # rotate/shear about the patch center, channels untouched
    center = (np.asarray(pixels.shape[:2], dtype=float) - 1.0) / 2.0
    offset = center - matrix @ center
    out = np.empty_like(pixels)
    for c in range(pixels.shape[2]):
        out[:, :, c] = ndimage.affine_transform(pixels[:, :, c], matrix, offset=offset, order=1, mode="nearest")
    return out


def _aug_brightness(x, rng):
    return x * rng.uniform(0.7, 1.3)


def _aug_gamma(x, rng):
    return np.clip(x, 0.0, 1.0) ** rng.uniform(0.7, 1.4)


def _aug_contrast(x, rng):
    m = x.mean()
    return m + (x - m) * rng.uniform(0.7, 1.3)


def _aug_channel_shift(x, rng):
    return x + rng.uniform(-0.08, 0.08, size=(1, 1, 3))


def _aug_rotation(x, rng):
    a = math.radians(rng.uniform(-25.0, 25.0))
    m = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    return _affine2d(x, m)


def _aug_shear(x, rng):
    m = np.array([[1.0, rng.uniform(-0.2, 0.2)], [0.0, 1.0]])
    return _affine2d(x, m)


def _aug_blur(x, rng):
    return ndimage.gaussian_filter(x, sigma=(rng.uniform(0.2, 1.0),) * 2 + (0.0,))


def _aug_noise(x, rng):
    return x + rng.normal(0.0, rng.uniform(0.01, 0.05), size=x.shape)


AUGMENTATIONS = {
    "brightness": _aug_brightness,
    "gamma": _aug_gamma,
    "contrast": _aug_contrast,
    "channel_shift": _aug_channel_shift,
    "rotation": _aug_rotation,
    "shear": _aug_shear,
    "blur": _aug_blur,
    "noise": _aug_noise,
}
_AUG_NAMES = tuple(AUGMENTATIONS)


def apply_augmentations(pixels: np.ndarray, names, rng: np.random.Generator) -> np.ndarray:
    out = pixels.astype(np.float32)
    for name in names:
        out = AUGMENTATIONS[name](out, rng)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def augment(sample: PatchSample, rng: np.random.Generator, factor: int = 30) -> list[PatchSample]:
    """Exactly factor augmented variants, each from 1-3 random transforms."""
    if factor < 1:
        raise TrainerError("augmentation factor must be >= 1")
    out = []
    for _ in range(factor):
        n = int(rng.integers(1, 4))
        names = rng.choice(_AUG_NAMES, size=n, replace=False)
        out.append(replace(sample, pixels=apply_augmentations(sample.pixels, names, rng)))
    return out


def augment_dataset(samples, rng: np.random.Generator, factor: int = 30) -> list[PatchSample]:
    """Originals plus factor-1 variants each: an exactly factor-times dataset."""
    out = []
    for s in samples:
        out.append(s)
        if factor > 1:
            out.extend(augment(s, rng, factor - 1))
    return out


# ---------------------------------------------------------------------------
# features


def extract_features(pixels: np.ndarray) -> np.ndarray:
    """48-dim descriptor: 3x8 color histograms, 8-bin gradient orientation
    histogram, and a 4x4 grid of mean intensities, each block L1-normalized.

    Zero-magnitude gradients land in bin 0 by convention, so a flat patch
    yields a spike there rather than an empty block.
    """
    px = np.asarray(pixels, dtype=np.float64)
    blocks = []
    for c in range(3):
        hist, _ = np.histogram(px[:, :, c], bins=8, range=(0.0, 1.0))
        blocks.append(hist.astype(float))
    gray = px.mean(axis=2)
    gy, gx = np.gradient(gray)
    mag = np.hypot(gx, gy)
    ori = np.mod(np.arctan2(gy, gx), math.pi)
    idx = np.minimum((ori / (math.pi / 8.0)).astype(int), 7)
    idx[mag < 1e-12] = 0
    ghist = np.bincount(idx.ravel(), minlength=8).astype(float)
    blocks.append(ghist)
    n = gray.shape[0] // 4
    cells = gray[: 4 * n, : 4 * n].reshape(4, n, 4, n).mean(axis=(1, 3)).ravel()
    blocks.append(cells)
    out = []
    for b in blocks:
        s = b.sum()
        out.append(b / s if s > 0 else b)
    return np.concatenate(out)


def features_and_labels(samples) -> tuple[np.ndarray, np.ndarray]:
    X = np.stack([extract_features(s.pixels) for s in samples])
    y = np.array([1.0 if s.label == "pad" else 0.0 for s in samples])
    return X, y


# ---------------------------------------------------------------------------
# logistic regression by batch gradient descent


def loss_and_gradient(w: np.ndarray, X: np.ndarray, y: np.ndarray, l2: float) -> tuple[float, np.ndarray]:
    """Mean logistic loss with L2 on the non-bias weights, and its gradient."""
    z = X @ w[:-1] + w[-1]
    # stable: log(1 + e^-|z|) + max(z, 0) - z*y
    loss = float(np.mean(np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))))
    loss += 0.5 * l2 * float(w[:-1] @ w[:-1])
    p = 1.0 / (1.0 + np.exp(-z))
    g = np.empty_like(w)
    g[:-1] = X.T @ (p - y) / len(y) + l2 * w[:-1]
    g[-1] = float(np.mean(p - y))
    return loss, g


def fit_logistic(X: np.ndarray, y: np.ndarray, lr: float = 0.1, epochs: int = 50, l2: float = 1e-3) -> ClassifierModel:
    if len(set(np.unique(y))) < 2:
        raise TrainerError("single-class-dataset: need both labels to train")
    w = np.zeros(X.shape[1] + 1)
    loss, _ = loss_and_gradient(w, X, y, l2)
    history = [loss]
    halvings = 0
    for _ in range(epochs):
        _, g = loss_and_gradient(w, X, y, l2)
        while True:
            cand = w - lr * g
            cand_loss, _ = loss_and_gradient(cand, X, y, l2)
            if cand_loss <= loss or halvings >= 3:
                break
            lr *= 0.5
            halvings += 1
        if cand_loss > loss:
            break
        w, loss = cand, cand_loss
        history.append(loss)
    acc = float(np.mean(((X @ w[:-1] + w[-1]) > 0) == (y > 0.5)))
    return ClassifierModel(weights=w, feature_dim=X.shape[1], train_loss_history=history, train_accuracy=acc)


def train(dataset, lr: float = 0.1, epochs: int = 50, l2: float = 1e-3) -> ClassifierModel:
    """Fit the patch classifier. Deterministic given the dataset."""
    if not dataset:
        raise TrainerError("empty-annotations: nothing to train on")
    X, y = features_and_labels(dataset)
    return fit_logistic(X, y, lr=lr, epochs=epochs, l2=l2)


def classify(model: ClassifierModel, pixels: np.ndarray) -> float:
    """Probability that a patch shows the pad."""
    f = extract_features(pixels)
    z = float(f @ model.weights[:-1] + model.weights[-1])
    return 1.0 / (1.0 + math.exp(-z))


def split_dataset(samples, rng: np.random.Generator, holdout_frac: float = 0.25) -> tuple[list, list]:
    """Shuffle and split; the holdout must never feed back into training."""
    order = rng.permutation(len(samples))
    n_hold = int(round(holdout_frac * len(samples)))
    hold = [samples[i] for i in order[:n_hold]]
    tr = [samples[i] for i in order[n_hold:]]
    return tr, hold


def holdout_stats(model: ClassifierModel, samples, appearance_id: str, iou_proxy: float) -> HoldoutStats:
    correct = 0
    for s in samples:
        pred = classify(model, s.pixels) > 0.5
        correct += int(pred == (s.label == "pad"))
    acc = correct / len(samples) if samples else 0.0
    return HoldoutStats(appearance_id=appearance_id, accuracy=acc, count=len(samples), iou_proxy=iou_proxy)


# ---------------------------------------------------------------------------
# detector registration


def register_appearance(detector: DetectorModel, model: ClassifierModel, stats: HoldoutStats) -> DetectorModel:
    """Couple a trained appearance into the detector with quality
    q = clamp(2*(holdout_accuracy - 0.5), 0, 1) * annotation IoU proxy.

    A chance-level classifier registers at q = 0: present but undetectable.
    """
    if stats.count < 20:
        raise TrainerError(f"insufficient-holdout: {stats.count} samples, need 20")
    if not np.all(np.isfinite(model.weights)):
        raise TrainerError("classifier weights are not finite")
    q = float(np.clip(2.0 * (stats.accuracy - 0.5), 0.0, 1.0)) * stats.iou_proxy
    entry = (stats.appearance_id, q)
    learned = list(detector.learned)
    for i, (aid, _) in enumerate(learned):
        if aid == stats.appearance_id:
            learned[i] = entry
            break
    else:
        learned.append(entry)
    return replace(detector, learned=tuple(learned))
