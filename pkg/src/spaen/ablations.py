"""Architecture ablations sharing one training engine and batch schedule.

Variants:

* ``spaen``        -- full adversarial model (two embedding routes + critic).
* ``cls_only``     -- ranking loss alone; the reconstruction route stays idle.
* ``direct_map``   -- phase 1 trains the discriminative embedder on the
                      ranking loss; phase 2 freezes it and trains the decoder
                      to reconstruct from the frozen embedding.
* ``sae``          -- a single embedder trained jointly on ranking +
                      reconstruction (the objectives pull on the same weights).
* ``split_branch`` -- one double-width embedder whose first half feeds the
                      ranking loss; both halves pass through per-branch affine
                      layers and a merge layer before decoding.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from . import evaluation, nets, trainer
from .data import SplitSpec, write_ppm
from .nets import (
    AffineHead,
    ConvTrunk,
    Decoder,
    Embedder,
    ModelBundle,
    NetConfig,
    ParamMap,
    Perceptual,
    apply_init,
    batch_to_images,
    image_batch,
)
from .objectives import HyperParams, LossBreakdown, batch_cls_loss
from .trainer import TrainContext, TrainReport, classification_val_h

VARIANTS = ("spaen", "cls_only", "direct_map", "sae", "split_branch")


@dataclass
class AblationSpec:
    """One ablation run: which variant, with which knobs and budget.

    ``direct_map`` spends ``epochs`` on each of its two phases so its
    classification budget matches the other variants.
    """

    variant: str
    hyper: HyperParams
    net_config: NetConfig
    seed: int = 0
    epochs: int = 50

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")


class VariantBundle:
    """Uniform wrapper over a trained variant's maps.

    Exposes classification embedding for evaluation and, when the variant has
    a decoder route, image reconstruction.
    """

    def __init__(self, variant: str, config: NetConfig, maps: dict[str, ParamMap]):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        self.variant = variant
        self.config = config
        self._maps = dict(maps)

    def maps(self) -> dict[str, ParamMap]:
        return dict(self._maps)

    def map(self, name: str) -> ParamMap:
        return self._maps[name]

    @property
    def has_decoder(self) -> bool:
        return self.variant != "cls_only"

    def embed_for_classification(self, images: np.ndarray) -> np.ndarray:
        x = image_batch(images, self.config)
        outs = []
        with torch.no_grad():
            for start in range(0, x.shape[0], 256):
                outs.append(self._embed(x[start : start + 256]))
        return torch.cat(outs).cpu().numpy().astype(np.float64)

    def _embed(self, x: torch.Tensor) -> torch.Tensor:
        if self.variant == "split_branch":
            return self._maps["wide_embedder"](x)[:, : self.config.embed_dim]
        return self._maps["cls_embedder"](x)

    def reconstruct(self, images: np.ndarray) -> np.ndarray:
        if not self.has_decoder:
            raise ValueError(f"variant {self.variant!r} has no decoder route")
        x = image_batch(images, self.config)
        with torch.no_grad():
            out = self._maps["decoder"](self._decode_input(x))
        return batch_to_images(out)

    def _decode_input(self, x: torch.Tensor) -> torch.Tensor:
        if self.variant == "spaen":
            return self._maps["rec_embedder"](x)
        if self.variant in ("sae", "direct_map"):
            return self._maps["cls_embedder"](x)
        wide = self._maps["wide_embedder"](x)
        d = self.config.embed_dim
        merged = torch.cat(
            [self._maps["cls_branch"](wide[:, :d]), self._maps["rec_branch"](wide[:, d:])],
            dim=1,
        )
        return self._maps["merge"](merged)


def build_variant(config: NetConfig, variant: str) -> VariantBundle:
    """Seed-initialise the maps a variant trains and evaluates with."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if variant != "split_branch":
        bundle = nets.build_models(config)
        return VariantBundle(variant, config, bundle.maps())

    config.validate()
    dtype = config.torch_dtype()
    gen = torch.Generator().manual_seed(config.seed)
    s, d = config.image_size, config.embed_dim
    img_shape = (3, s, s)

    def finish(module):
        module.to(dtype)
        apply_init(module, config.init_scheme, gen)
        return module

    with torch.random.fork_rng(devices=[]):
        trunk = finish(ConvTrunk(config.conv_channels, s))
        head = finish(AffineHead(trunk.out_dim, config.hidden_width, 2 * d))
        cls_branch = finish(torch.nn.Linear(d, d))
        rec_branch = finish(torch.nn.Linear(d, d))
        merge = finish(torch.nn.Linear(2 * d, d))
        decoder = finish(Decoder(config))
        perceptual = finish(Perceptual(s))
    for p in trunk.parameters():
        p.requires_grad_(False)
    for p in perceptual.parameters():
        p.requires_grad_(False)

    maps = {
        "wide_embedder": ParamMap("wide_embedder", Embedder(trunk, head), img_shape, (2 * d,)),
        "cls_branch": ParamMap("cls_branch", cls_branch, (d,), (d,)),
        "rec_branch": ParamMap("rec_branch", rec_branch, (d,), (d,)),
        "merge": ParamMap("merge", merge, (2 * d,), (d,)),
        "decoder": ParamMap("decoder", decoder, (d,), img_shape),
        "perceptual": ParamMap(
            "perceptual", perceptual, img_shape, (perceptual.out_dim,), trainable=False
        ),
    }
    return VariantBundle(variant, config, maps)


def _rec_terms(
    recon: torch.Tensor, target: torch.Tensor, perceptual: ParamMap, lambda_p: float
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    diff = recon - target
    pixel = (diff * diff).sum(dim=(1, 2, 3)).mean()
    fdiff = perceptual(recon) - perceptual(target)
    feat = (fdiff * fdiff).sum(dim=1).mean()
    return feat, pixel, feat + lambda_p * pixel


def _label_rows(labels: np.ndarray, class_ids: np.ndarray) -> np.ndarray:
    lookup = {int(c): i for i, c in enumerate(class_ids)}
    try:
        return np.asarray([lookup[int(l)] for l in labels])
    except KeyError as exc:
        raise ValueError(
            f"label {exc.args[0]} is not in the training class set (zero-shot contract)"
        ) from exc


class JointTask:
    """Single-optimizer training for ``sae`` and ``split_branch``."""

    def __init__(self, vb: VariantBundle):
        if vb.variant not in ("sae", "split_branch"):
            raise ValueError(f"JointTask does not handle variant {vb.variant!r}")
        self.vb = vb
        self.variant = vb.variant

    @property
    def config(self) -> NetConfig:
        return self.vb.config

    def maps(self) -> dict[str, ParamMap]:
        return self.vb.maps()

    def parameter_groups(self) -> dict[str, list[torch.Tensor]]:
        params: list[torch.Tensor] = []
        for pm in self.vb.maps().values():
            params.extend(pm.trainable_parameters())
        return {"generator": params}

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        return self.vb._embed(x)

    def train_step(self, optimizers, images, labels, ctx: TrainContext, hyper) -> LossBreakdown:
        vb = self.vb
        rows = _label_rows(labels, ctx.train_class_ids)
        if vb.variant == "sae":
            e = vb.map("cls_embedder")(images)
            z = e
        else:
            wide = vb.map("wide_embedder")(images)
            d = vb.config.embed_dim
            e = wide[:, :d]
            merged = torch.cat(
                [vb.map("cls_branch")(e), vb.map("rec_branch")(wide[:, d:])], dim=1
            )
            z = vb.map("merge")(merged)
        cls = batch_cls_loss(e, rows, ctx.class_matrix, hyper.margin, hyper.cls_mode, ctx.label_rng)
        recon = vb.map("decoder")(z)
        feat, pixel, rec = _rec_terms(recon, images, vb.map("perceptual"), hyper.lambda_p)
        total = cls + hyper.alpha * rec
        opt = optimizers["generator"]
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
        return trainer._breakdown_from_terms(
            {
                "cls": cls, "feat": feat, "pixel": pixel, "rec": rec,
                "adv_e": total.new_zeros(()), "adv_d": total.new_zeros(()), "total": total,
            }
        )

    def validation_metric(self, dataset, splits: SplitSpec, ctx: TrainContext) -> float:
        return classification_val_h(self.embed, self.config, dataset, splits, ctx)


class DecoderOnlyTask:
    """Phase 2 of ``direct_map``: train the decoder against a frozen embedder.

    The monitored validation metric is the negated reconstruction objective on
    validation-class training images (higher is better), since classification
    H cannot move while the embedder is frozen.
    """

    def __init__(self, bundle: ModelBundle):
        self.bundle = bundle
        self.variant = "direct_map"

    @property
    def config(self) -> NetConfig:
        return self.bundle.config

    def maps(self) -> dict[str, ParamMap]:
        return self.bundle.maps()

    def parameter_groups(self) -> dict[str, list[torch.Tensor]]:
        return {"generator": self.bundle.decoder.trainable_parameters()}

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        return self.bundle.cls_embedder(x)

    def train_step(self, optimizers, images, labels, ctx: TrainContext, hyper) -> LossBreakdown:
        b = self.bundle
        with torch.no_grad():
            z = b.cls_embedder(images)
        recon = b.decoder(z)
        feat, pixel, rec = _rec_terms(recon, images, b.perceptual, hyper.lambda_p)
        total = hyper.alpha * rec
        opt = optimizers["generator"]
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
        zero = total.new_zeros(())
        return trainer._breakdown_from_terms(
            {
                "cls": zero, "feat": feat, "pixel": pixel, "rec": rec,
                "adv_e": zero, "adv_d": zero, "total": total,
            }
        )

    def validation_metric(self, dataset, splits: SplitSpec, ctx: TrainContext) -> float:
        val_set = set(int(c) for c in ctx.val_class_ids)
        ids = [i for i in splits.train_ids if dataset.label(i) in val_set]
        if not ids:
            return float("nan")
        images = np.stack([dataset.image(i) for i in ids])
        x = image_batch(images, self.config)
        with torch.no_grad():
            recon = self.bundle.decoder(self.bundle.cls_embedder(x))
            _, _, rec = _rec_terms(recon, x, self.bundle.perceptual, 1.0)
        return -float(rec)


def train_variant(
    variant: str,
    dataset,
    splits: SplitSpec,
    hyper: HyperParams,
    epochs: int,
    seed: int,
    net_config: NetConfig | None = None,
    out_dir: Path | str | None = None,
) -> tuple[VariantBundle, TrainReport]:
    """Train one variant and return its wrapped maps plus the training report."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    cfg = net_config or NetConfig(
        embed_dim=dataset.n_attributes, image_size=dataset.image_size, seed=seed
    )

    if variant in ("spaen", "cls_only"):
        report = trainer.train(
            dataset, splits, hyper, epochs, seed,
            variant=variant, net_config=cfg, out_dir=out_dir,
        )
        vb = VariantBundle(variant, cfg, report.bundle.maps())
        report.bundle = vb
        return vb, report

    if variant == "direct_map":
        cls_hyper = replace(hyper, alpha=0.0, beta=0.0, n_critic=0)
        bundle = nets.build_models(cfg, attribute_count=dataset.n_attributes)
        phase1 = trainer.fit(
            trainer.AdversarialTask(bundle, variant="direct_map"),
            dataset, splits, cls_hyper, epochs, seed,
        )
        for p in bundle.cls_embedder.parameters():
            p.requires_grad_(False)
        phase2 = trainer.fit(
            DecoderOnlyTask(bundle), dataset, splits, hyper, epochs, seed,
            out_dir=out_dir, log_prefix=phase1.rows, epoch_offset=len(phase1.rows),
        )
        report = TrainReport(
            rows=phase1.rows + phase2.rows,
            wall_clock=phase1.wall_clock + phase2.wall_clock,
            checkpoint_path=phase2.checkpoint_path,
            best_val_h=phase1.best_val_h,
            best_epoch=phase1.best_epoch,
        )
        vb = VariantBundle(variant, cfg, bundle.maps())
        report.bundle = vb
        return vb, report

    vb = build_variant(cfg, variant)
    task = JointTask(vb)
    report = trainer.fit(task, dataset, splits, hyper, epochs, seed, out_dir=out_dir)
    report.bundle = vb
    return vb, report


def run_variant(
    spec: AblationSpec,
    dataset,
    splits: SplitSpec,
    out_dir: Path | str | None = None,
) -> tuple[VariantBundle, dict]:
    """Train one variant and measure the standard report row.

    The row carries the three setting accuracies, their harmonic mean, and the
    unseen-test reconstruction MSE (None for variants without a decoder).
    """
    spec.validate()
    vb, report = train_variant(
        spec.variant, dataset, splits, spec.hyper, spec.epochs, spec.seed,
        net_config=spec.net_config, out_dir=out_dir,
    )
    metrics = evaluation.full_report(vb, dataset, splits)
    row = {
        "variant": spec.variant,
        "acc_UU": metrics.acc_uu,
        "acc_UT": metrics.acc_ut,
        "acc_ST": metrics.acc_st,
        "H": metrics.h,
        "recon_mse": None,
        "ausuc": metrics.ausuc,
        "wall_clock": report.wall_clock,
    }
    if vb.has_decoder:
        images = np.stack([dataset.image(i) for i in splits.unseen_test_ids])
        row["recon_mse"] = reconstruction_mse(vb, images)
    return vb, row


def reconstruction_mse(vb: VariantBundle, images: np.ndarray) -> float:
    """Mean squared pixel error of the variant's reconstruction route."""
    recon = vb.reconstruct(images)
    return float(np.mean((recon - np.asarray(images, dtype=np.float64)) ** 2))


def compare_reconstruction(
    bundles: Mapping[str, VariantBundle], images: np.ndarray
) -> dict[str, float]:
    """Reconstruction MSE per variant on one shared image set.

    Variants without a decoder route are skipped with a warning.
    """
    out: dict[str, float] = {}
    for name, vb in bundles.items():
        if not vb.has_decoder:
            warnings.warn(f"variant {name!r} has no decoder route; skipping", stacklevel=2)
            continue
        out[name] = reconstruction_mse(vb, images)
    return out


def splitbranch_merge_weights(vb: VariantBundle) -> dict[str, float]:
    """Frobenius norms of the two branch affines feeding the merge layer."""
    if vb.variant != "split_branch":
        raise ValueError(f"merge weights are only defined for split_branch, not {vb.variant!r}")
    return {
        "cls_branch": float(torch.linalg.norm(vb.map("cls_branch").module.weight.detach())),
        "rec_branch": float(torch.linalg.norm(vb.map("rec_branch").module.weight.detach())),
    }


def save_contact_sheet(
    path: Path | str, originals: np.ndarray, recons: np.ndarray, max_items: int = 8
) -> None:
    """Write originals (top row) above reconstructions (bottom row) as one image."""
    originals = np.asarray(originals, dtype=np.float64)[:max_items]
    recons = np.asarray(recons, dtype=np.float64)[:max_items]
    if originals.shape != recons.shape:
        raise ValueError(
            f"original and reconstruction stacks differ: {originals.shape} vs {recons.shape}"
        )
    if originals.ndim != 4:
        raise ValueError("contact sheet expects (N, H, W, 3) stacks")
    top = np.concatenate(list(originals), axis=1)
    bottom = np.concatenate(list(recons), axis=1)
    write_ppm(path, np.concatenate([top, bottom], axis=0))


def save_bundle(vb: VariantBundle, out_dir: Path | str, seed: int = 0) -> Path:
    """Persist a variant's maps with enough metadata to rebuild them."""
    return nets.save_checkpoint(out_dir, vb.maps(), vb.config, seed, vb.variant)


def load_bundle(checkpoint_dir: Path | str) -> VariantBundle:
    """Rebuild a variant from :func:`save_bundle` output."""
    manifest, vectors = nets.load_checkpoint(checkpoint_dir)
    config = NetConfig.from_dict(manifest["config"])
    vb = build_variant(config, manifest["variant"])
    expected = set(vb.maps())
    if set(vectors) != expected:
        raise ValueError(
            f"checkpoint maps {sorted(vectors)} do not match variant "
            f"{manifest['variant']!r} maps {sorted(expected)}"
        )
    for name, pm in vb.maps().items():
        pm.set_flat_params(vectors[name])
    return vb


def write_ablation_report(path: Path | str, rows: list[dict]) -> None:
    """Write the comparison table (one row per variant)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "acc_UU", "acc_UT", "acc_ST", "H", "recon_mse"])
        for row in rows:
            mse = row["recon_mse"]
            writer.writerow(
                [
                    row["variant"],
                    repr(float(row["acc_UU"])),
                    repr(float(row["acc_UT"])),
                    repr(float(row["acc_ST"])),
                    repr(float(row["H"])),
                    "" if mse is None else repr(float(mse)),
                ]
            )
