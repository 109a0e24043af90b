"""Generalized zero-shot evaluation: compatibility scoring, calibrated
stacking, per-class top-1 accuracy, harmonic mean, and the seen/unseen
trade-off curve with its area."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .spaces import ClassEmbedding, l2_normalize

SETTINGS = ("U->U", "U->T", "S->T")


@dataclass
class ScoreMatrix:
    """Compatibility scores: one row per image, one column per candidate class."""

    scores: np.ndarray
    candidate_ids: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.candidate_ids = np.asarray(self.candidate_ids, dtype=np.int64)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.scores.ndim != 2:
            raise ValueError("scores must be a 2-D matrix")
        if self.scores.shape[1] != self.candidate_ids.shape[0]:
            raise ValueError("one candidate id required per score column")
        if len(set(self.candidate_ids.tolist())) != len(self.candidate_ids):
            raise ValueError("candidate ids must be unique")
        if self.labels is not None and self.labels.shape[0] != self.scores.shape[0]:
            raise ValueError("one label required per score row")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")


@dataclass
class MetricsReport:
    """Headline metrics for one trained embedder on one split."""

    acc_uu: float
    acc_ut: float
    acc_st: float
    h: float
    suc_points: list[tuple[float, float]] = field(default_factory=list)
    ausuc: float = 0.0


def _embed(embedder, images: np.ndarray) -> np.ndarray:
    if callable(embedder) and not hasattr(embedder, "embed_for_classification"):
        out = embedder(images)
    else:
        out = embedder.embed_for_classification(images)
    return np.asarray(out, dtype=np.float64)


def score(
    embedder,
    images: np.ndarray,
    candidates: list[ClassEmbedding],
    labels: np.ndarray | None = None,
) -> ScoreMatrix:
    """Dot-product compatibility of embedded images with unit-norm candidates.

    ``embedder`` is either an object exposing ``embed_for_classification`` or a
    plain callable mapping ``(N, H, W, 3)`` arrays to ``(N, d)`` embeddings.
    """
    if len(candidates) == 0:
        raise ValueError("score requires at least one candidate class")
    matrix = np.stack([np.asarray(c.vector, dtype=np.float64) for c in candidates])
    norms = np.linalg.norm(matrix, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        bad = [candidates[i].class_id for i in np.nonzero(np.abs(norms - 1.0) > 1e-6)[0]]
        raise ValueError(f"candidate embeddings must be unit-norm (classes {bad})")
    emb = _embed(embedder, np.asarray(images))
    if emb.ndim != 2 or emb.shape[1] != matrix.shape[1]:
        raise ValueError(
            f"embeddings of shape {emb.shape} do not match candidate dimension {matrix.shape[1]}"
        )
    ids = np.asarray([c.class_id for c in candidates], dtype=np.int64)
    return ScoreMatrix(scores=emb @ matrix.T, candidate_ids=ids, labels=labels)


def _argmax_smallest_id(scores: np.ndarray, candidate_ids: np.ndarray) -> np.ndarray:
    # Reorder columns by ascending class id; np.argmax returns the first
    # maximum, which then is the smallest id among exact ties.
    order = np.argsort(candidate_ids, kind="stable")
    ordered_ids = candidate_ids[order]
    best = np.argmax(scores[:, order], axis=1)
    return ordered_ids[best]


def predict(sm: ScoreMatrix) -> np.ndarray:
    """Arg-max prediction per row; exact ties resolve to the smallest class id."""
    return _argmax_smallest_id(sm.scores, sm.candidate_ids)


def predict_calibrated(
    sm: ScoreMatrix, seen_class_ids: set[int] | list[int], gamma_cal: float
) -> np.ndarray:
    """Arg-max after subtracting ``gamma_cal`` from every seen-class score."""
    seen = set(int(c) for c in seen_class_ids)
    is_seen = np.asarray([int(c) in seen for c in sm.candidate_ids])
    if np.all(is_seen):
        raise ValueError("calibrated prediction requires at least one unseen candidate")
    adjusted = sm.scores - gamma_cal * is_seen[None, :].astype(np.float64)
    return _argmax_smallest_id(adjusted, sm.candidate_ids)


def per_class_top1(
    predictions: np.ndarray,
    ground_truth: np.ndarray,
    classes: list[int] | None = None,
) -> float:
    """Macro-averaged top-1 accuracy: mean over classes of within-class accuracy."""
    predictions = np.asarray(predictions)
    ground_truth = np.asarray(ground_truth)
    if predictions.shape != ground_truth.shape:
        raise ValueError("predictions and ground truth must align")
    if classes is None:
        classes = sorted(set(int(c) for c in ground_truth))
    if not classes:
        raise ValueError("per-class accuracy needs at least one class")
    accs = []
    for c in classes:
        mask = ground_truth == c
        if not np.any(mask):
            raise ValueError(f"class {c} has no images to average over")
        accs.append(float(np.mean(predictions[mask] == c)))
    return float(np.mean(accs))


def harmonic_mean(a: float, b: float) -> float:
    """Harmonic mean of two accuracies; zero if either is zero."""
    if a < 0 or b < 0:
        raise ValueError(f"accuracies must be >= 0, got {a}, {b}")
    if a == 0.0 or b == 0.0:
        return 0.0
    return 2.0 * a * b / (a + b)


def _setting_ids(splits, setting: str) -> tuple[list[int], list[int]]:
    if setting == "U->U":
        return splits.unseen_test_ids, sorted(splits.unseen_classes)
    if setting == "U->T":
        return splits.unseen_test_ids, sorted(splits.seen_classes + splits.unseen_classes)
    if setting == "S->T":
        return splits.seen_test_ids, sorted(splits.seen_classes + splits.unseen_classes)
    raise ValueError(f"unknown setting {setting!r}; expected one of {SETTINGS}")


def evaluate(bundle, dataset, splits, setting: str) -> float:
    """Per-class top-1 accuracy of ``bundle`` under one evaluation setting.

    ``U->U`` scores unseen test images against unseen classes only; ``U->T``
    and ``S->T`` score unseen/seen test images against all classes.
    """
    image_ids, candidate_ids = _setting_ids(splits, setting)
    if not image_ids:
        raise ValueError(f"setting {setting} has no test images")
    if not candidate_ids:
        raise ValueError(f"setting {setting} has no candidate classes")
    candidates = [
        ClassEmbedding(c, l2_normalize(dataset.attribute_row(c))) for c in candidate_ids
    ]
    images = np.stack([dataset.image(i) for i in image_ids])
    labels = np.asarray([dataset.label(i) for i in image_ids])
    sm = score(bundle, images, candidates, labels=labels)
    return per_class_top1(predict(sm), labels)


def default_gamma_grid(sm: ScoreMatrix, n_points: int = 201) -> np.ndarray:
    """Uniform calibration grid spanning slightly more than +/- the score spread,
    so the extreme points force pure-unseen and pure-seen predictions."""
    if n_points < 2:
        raise ValueError(f"gamma grid needs >= 2 points, got {n_points}")
    spread = float(sm.scores.max() - sm.scores.min())
    if spread == 0.0:
        spread = 1.0
    limit = spread * (1.0 + 1e-9) + 1e-12
    return np.linspace(-limit, limit, n_points)


def suc_curve(
    sm: ScoreMatrix, seen_class_ids: list[int], gamma_grid: np.ndarray
) -> list[tuple[float, float]]:
    """Seen/unseen accuracy trade-off over a calibration grid.

    ``sm`` must stack seen and unseen test rows with labels; each grid point
    yields ``(acc_UT, acc_ST)`` measured with calibrated predictions.
    """
    gamma_grid = np.asarray(gamma_grid, dtype=np.float64)
    if gamma_grid.size == 0:
        raise ValueError("gamma grid must be non-empty")
    if sm.labels is None:
        raise ValueError("suc_curve requires a ScoreMatrix with labels")
    seen = set(int(c) for c in seen_class_ids)
    gt_seen = np.asarray([int(l) in seen for l in sm.labels])
    if not np.any(gt_seen) or np.all(gt_seen):
        raise ValueError("suc_curve needs both seen-class and unseen-class rows")
    unseen_classes = sorted(set(int(l) for l in sm.labels[~gt_seen]))
    seen_classes = sorted(set(int(l) for l in sm.labels[gt_seen]))
    points = []
    for gamma in gamma_grid:
        preds = predict_calibrated(sm, seen, float(gamma))
        acc_ut = per_class_top1(preds[~gt_seen], sm.labels[~gt_seen], unseen_classes)
        acc_st = per_class_top1(preds[gt_seen], sm.labels[gt_seen], seen_classes)
        points.append((acc_ut, acc_st))
    return points


def ausuc(points: list[tuple[float, float]]) -> float:
    """Trapezoidal area under a seen/unseen trade-off curve."""
    if len(points) < 2:
        raise ValueError(f"area needs >= 2 curve points, got {len(points)}")
    unique = sorted(set((float(x), float(y)) for x, y in points))
    xs = np.asarray([p[0] for p in unique])
    ys = np.asarray([p[1] for p in unique])
    return float(np.trapezoid(ys, xs))


def full_report(bundle, dataset, splits, n_gamma: int = 201) -> MetricsReport:
    """All headline metrics for one bundle: the three settings, their harmonic
    mean, and the calibrated trade-off curve with its area."""
    acc_uu = evaluate(bundle, dataset, splits, "U->U")
    image_ids = list(splits.seen_test_ids) + list(splits.unseen_test_ids)
    candidate_ids = sorted(splits.seen_classes + splits.unseen_classes)
    candidates = [
        ClassEmbedding(c, l2_normalize(dataset.attribute_row(c))) for c in candidate_ids
    ]
    images = np.stack([dataset.image(i) for i in image_ids])
    labels = np.asarray([dataset.label(i) for i in image_ids])
    sm = score(bundle, images, candidates, labels=labels)
    preds = predict(sm)
    seen = set(splits.seen_classes)
    gt_seen = np.asarray([int(l) in seen for l in labels])
    acc_ut = per_class_top1(preds[~gt_seen], labels[~gt_seen])
    acc_st = per_class_top1(preds[gt_seen], labels[gt_seen])
    h = harmonic_mean(acc_ut, acc_st)
    grid = default_gamma_grid(sm, n_gamma)
    points = suc_curve(sm, splits.seen_classes, grid)
    return MetricsReport(
        acc_uu=acc_uu,
        acc_ut=acc_ut,
        acc_st=acc_st,
        h=h,
        suc_points=points,
        ausuc=ausuc(points),
    )
