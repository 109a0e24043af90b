"""Loss functions: margin ranking classification, pixel + perceptual
reconstruction, the adversarial critic/embedder pair, and their weighted
combination.

The wiring enforces the gradient partition the architecture is built around:
the classification term only touches the discriminative embedder, the
reconstruction term only touches the reconstructive embedder and decoder, and
the adversarial term is the sole bridge between the two routes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .nets import ModelBundle, ParamMap, image_batch
from .spaces import ClassEmbedding

ADV_FORMS = ("wgan", "log")
CLS_MODES = ("full_sum", "sampled")


@dataclass
class HyperParams:
    """Training hyperparameters with validated defaults."""

    margin: float = 0.1
    lambda_p: float = 1.0
    alpha: float = 10.0
    beta: float = 5.0
    clip_c: float = 0.01
    n_critic: int = 5
    learning_rate: float = 1e-4
    batch_size: int = 32
    adv_form: str = "wgan"
    cls_mode: str = "sampled"
    patience: int = 10
    min_lr: float = 1e-6

    def __post_init__(self) -> None:
        if self.margin <= 0:
            raise ValueError(f"margin must be > 0, got {self.margin}")
        if self.lambda_p < 0:
            raise ValueError(f"lambda_p must be >= 0, got {self.lambda_p}")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"alpha and beta must be >= 0, got {self.alpha}, {self.beta}")
        if self.clip_c <= 0:
            raise ValueError(f"clip_c must be > 0, got {self.clip_c}")
        if self.n_critic < 0:
            raise ValueError(f"n_critic must be >= 0, got {self.n_critic}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.adv_form not in ADV_FORMS:
            raise ValueError(f"adv_form must be one of {ADV_FORMS}, got {self.adv_form!r}")
        if self.cls_mode not in CLS_MODES:
            raise ValueError(f"cls_mode must be one of {CLS_MODES}, got {self.cls_mode!r}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.min_lr <= 0:
            raise ValueError(f"min_lr must be > 0, got {self.min_lr}")


@dataclass
class LossBreakdown:
    """Unweighted loss terms plus the weighted total for one batch."""

    cls: float
    feat: float
    pixel: float
    rec: float
    adv_e: float
    adv_d: float
    total: float


def _as_vector(v, like: torch.Tensor | None = None) -> torch.Tensor:
    dtype = like.dtype if like is not None else torch.float64
    if torch.is_tensor(v):
        return v.to(dtype)
    return torch.as_tensor(np.asarray(v), dtype=dtype)


def cls_loss(
    embedding: torch.Tensor | np.ndarray,
    correct: ClassEmbedding,
    wrong: list[ClassEmbedding],
    margin: float,
    mode: str = "full_sum",
    rng: np.random.Generator | None = None,
) -> torch.Tensor:
    """Margin ranking loss for one embedded image.

    ``full_sum`` sums the hinge over every wrong class; ``sampled`` uses a
    single wrong class drawn from ``rng``, so over all draws it averages to
    ``full_sum / len(wrong)``.
    """
    if not wrong:
        raise ValueError("cls_loss requires at least one wrong class")
    if mode not in CLS_MODES:
        raise ValueError(f"mode must be one of {CLS_MODES}, got {mode!r}")
    e = _as_vector(embedding) if not torch.is_tensor(embedding) else embedding
    correct_score = torch.dot(e, _as_vector(correct.vector, e))
    if mode == "sampled":
        if rng is None:
            raise ValueError("sampled mode requires an rng")
        wrong = [wrong[int(rng.integers(len(wrong)))]]
    total = e.new_zeros(())
    for cand in wrong:
        wrong_score = torch.dot(e, _as_vector(cand.vector, e))
        total = total + torch.clamp(margin - correct_score + wrong_score, min=0.0)
    return total


def pixel_loss(recon, target) -> torch.Tensor:
    """Squared L2 distance between two images (sum over all pixels/channels)."""
    r = _as_vector(recon) if not torch.is_tensor(recon) else recon
    t = _as_vector(target, r if torch.is_tensor(r) else None)
    if r.shape != t.shape:
        raise ValueError(f"image shapes differ: {tuple(r.shape)} vs {tuple(t.shape)}")
    diff = r - t
    return (diff * diff).sum()


def feat_loss(recon, target, perceptual: ParamMap) -> torch.Tensor:
    """Squared L2 distance between perceptual features of two images."""
    fr = perceptual(_coerce_image(recon, perceptual))
    ft = perceptual(_coerce_image(target, perceptual))
    diff = fr - ft
    return (diff * diff).sum()


def rec_loss(recon, target, perceptual: ParamMap, lambda_p: float) -> torch.Tensor:
    """Perceptual term plus ``lambda_p`` times the pixel term."""
    if lambda_p < 0:
        raise ValueError(f"lambda_p must be >= 0, got {lambda_p}")
    return feat_loss(recon, target, perceptual) + lambda_p * pixel_loss(
        _coerce_image(recon, perceptual), _coerce_image(target, perceptual)
    )


def _coerce_image(img, pmap: ParamMap) -> torch.Tensor:
    """Accept (H, W, 3) numpy or (3, H, W) tensors for single-image losses."""
    if torch.is_tensor(img):
        return img.to(pmap.dtype)
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 3 and arr.shape[0] != 3:
        arr = arr.transpose(2, 0, 1)
    return torch.as_tensor(arr, dtype=pmap.dtype)


def _critic_scores(critic: ParamMap, batch) -> torch.Tensor:
    z = batch if torch.is_tensor(batch) else _as_vector(batch)
    if z.dim() == 1:
        z = z.unsqueeze(0)
    if z.shape[0] == 0:
        raise ValueError("adversarial loss requires a non-empty batch")
    return critic(z).reshape(-1)


def adv_critic_loss(critic: ParamMap, real, fake, form: str = "wgan") -> torch.Tensor:
    """Critic objective (to minimise): Wasserstein form is
    mean(D(fake)) - mean(D(real)); log form is the standard cross-entropy."""
    if form not in ADV_FORMS:
        raise ValueError(f"form must be one of {ADV_FORMS}, got {form!r}")
    d_real = _critic_scores(critic, real)
    d_fake = _critic_scores(critic, fake)
    if form == "wgan":
        return d_fake.mean() - d_real.mean()
    logsig = torch.nn.functional.logsigmoid
    return -(logsig(d_real).mean() + logsig(-d_fake).mean())


def adv_embedder_loss(critic: ParamMap, fake, form: str = "wgan") -> torch.Tensor:
    """Embedder-side adversarial objective (to minimise): drive the critic's
    score of embedder outputs up."""
    if form not in ADV_FORMS:
        raise ValueError(f"form must be one of {ADV_FORMS}, got {form!r}")
    d_fake = _critic_scores(critic, fake)
    if form == "wgan":
        return -d_fake.mean()
    return torch.nn.functional.logsigmoid(-d_fake).mean()


def batch_cls_loss(
    embeddings: torch.Tensor,
    label_rows: np.ndarray,
    class_matrix: torch.Tensor,
    margin: float,
    mode: str,
    rng: np.random.Generator | None,
) -> torch.Tensor:
    """Mean ranking loss over a batch against a (n_classes, d) embedding matrix."""
    n, k = embeddings.shape[0], class_matrix.shape[0]
    if k < 2:
        raise ValueError("ranking loss needs at least two candidate classes")
    scores = embeddings @ class_matrix.T
    idx = torch.as_tensor(label_rows, dtype=torch.long)
    rows = torch.arange(n)
    correct = scores[rows, idx]
    if mode == "full_sum":
        hinge = torch.clamp(margin - correct.unsqueeze(1) + scores, min=0.0)
        mask = torch.ones_like(hinge)
        mask[rows, idx] = 0.0
        per_example = (hinge * mask).sum(dim=1)
    elif mode == "sampled":
        if rng is None:
            raise ValueError("sampled mode requires an rng")
        draws = rng.integers(0, k - 1, size=n)
        draws = draws + (draws >= label_rows)  # skip the correct class
        wrong = scores[rows, torch.as_tensor(draws, dtype=torch.long)]
        per_example = torch.clamp(margin - correct + wrong, min=0.0)
    else:
        raise ValueError(f"mode must be one of {CLS_MODES}, got {mode!r}")
    return per_example.mean()


def objective_terms(
    bundle: ModelBundle,
    images: torch.Tensor,
    labels: np.ndarray,
    class_matrix: torch.Tensor,
    class_ids: np.ndarray,
    hyper: HyperParams,
    rng: np.random.Generator | None = None,
    compute_all: bool = False,
) -> dict[str, torch.Tensor]:
    """All loss terms for one batch as scalar tensors.

    ``class_matrix`` holds unit-norm embeddings for ``class_ids`` only; a label
    outside that set is a contract violation (unseen material must never reach
    training).  Zero-weight terms are skipped (reported as 0) unless
    ``compute_all`` is set.
    """
    labels = np.asarray(labels)
    id_to_row = {int(c): i for i, c in enumerate(class_ids)}
    try:
        label_rows = np.asarray([id_to_row[int(l)] for l in labels])
    except KeyError as exc:
        raise ValueError(
            f"label {exc.args[0]} is not in the training class set (zero-shot contract)"
        ) from exc

    zero = images.new_zeros(())
    e = bundle.cls_embedder(images)
    terms: dict[str, torch.Tensor] = {}
    terms["cls"] = batch_cls_loss(e, label_rows, class_matrix, hyper.margin, hyper.cls_mode, rng)

    want_rec = compute_all or hyper.alpha > 0
    want_adv = compute_all or hyper.beta > 0
    f = None
    if want_rec:
        f = bundle.rec_embedder(images)
        recon = bundle.decoder(f)
        diff = recon - images
        terms["pixel"] = (diff * diff).sum(dim=(1, 2, 3)).mean()
        feat_diff = bundle.perceptual(recon) - bundle.perceptual(images)
        terms["feat"] = (feat_diff * feat_diff).sum(dim=1).mean()
        terms["rec"] = terms["feat"] + hyper.lambda_p * terms["pixel"]
    else:
        terms["pixel"] = zero
        terms["feat"] = zero
        terms["rec"] = zero
    if want_adv:
        terms["adv_e"] = adv_embedder_loss(bundle.critic, e, hyper.adv_form)
        if f is None:
            with torch.no_grad():
                f = bundle.rec_embedder(images)
        terms["adv_d"] = adv_critic_loss(
            bundle.critic, f.detach(), e.detach(), hyper.adv_form
        )
    else:
        terms["adv_e"] = zero
        terms["adv_d"] = zero
    terms["total"] = terms["cls"] + hyper.alpha * terms["rec"] + hyper.beta * terms["adv_e"]
    return terms


def full_objective(
    bundle: ModelBundle,
    batch: tuple[np.ndarray, np.ndarray],
    class_embeddings: list[ClassEmbedding],
    hyper: HyperParams,
    rng: np.random.Generator | None = None,
) -> LossBreakdown:
    """Evaluate every loss term on a batch and return the weighted breakdown.

    All terms are computed regardless of the weights; the weights only shape
    ``total``.
    """
    images, labels = batch
    x = image_batch(np.asarray(images), bundle.config)
    class_ids = np.asarray([c.class_id for c in class_embeddings])
    matrix = torch.stack(
        [torch.as_tensor(c.vector, dtype=x.dtype) for c in class_embeddings]
    )
    terms = objective_terms(
        bundle, x, np.asarray(labels), matrix, class_ids, hyper, rng=rng, compute_all=True
    )
    breakdown = LossBreakdown(
        cls=float(terms["cls"].detach()),
        feat=float(terms["feat"].detach()),
        pixel=float(terms["pixel"].detach()),
        rec=float(terms["rec"].detach()),
        adv_e=float(terms["adv_e"].detach()),
        adv_d=float(terms["adv_d"].detach()),
        total=float(terms["total"].detach()),
    )
    if not math.isfinite(breakdown.total):
        raise RuntimeError(f"non-finite objective: {breakdown}")
    return breakdown
