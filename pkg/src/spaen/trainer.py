"""Alternating min-max training with plain SGD + momentum, a validation-driven
plateau LR schedule, and deterministic seeded batching.

The engine is task-based: a task owns its maps, names its optimizer parameter
groups, and performs one optimisation step per batch.  The standard task wires
the full adversarial objective (and degenerates to classification-only when
alpha = beta = 0 and n_critic = 0); the ablation variants plug in their own
tasks and inherit identical batch schedules for the same seed, so outcome
differences are attributable to wiring alone.

Two independent seeded streams drive (1) epoch shuffling and (2) wrong-class
sampling inside the ranking loss; training never reads unseen-class images or
attribute rows.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import evaluation, nets, spaces
from .data import Dataset, SplitSpec
from .nets import ModelBundle, NetConfig, ParamMap
from .objectives import (
    HyperParams,
    LossBreakdown,
    adv_critic_loss,
    objective_terms,
)

MOMENTUM = 0.9
LOG_COLUMNS = ("epoch", "cls", "feat", "pixel", "rec", "adv_E", "adv_D", "total", "val_H", "lr")
TRAIN_STATE_FORMAT = "spaen-train-state-v1"


@dataclass
class EpochRow:
    """One training-log row: epoch-mean loss terms plus validation H and LR."""

    epoch: int
    cls: float
    feat: float
    pixel: float
    rec: float
    adv_e: float
    adv_d: float
    total: float
    val_h: float
    lr: float

    def as_list(self) -> list:
        return [
            self.epoch, self.cls, self.feat, self.pixel, self.rec,
            self.adv_e, self.adv_d, self.total, self.val_h, self.lr,
        ]


@dataclass
class TrainReport:
    """Outcome of a training run."""

    rows: list[EpochRow]
    wall_clock: float
    checkpoint_path: str | None
    best_val_h: float
    best_epoch: int
    bundle: object | None = None


@dataclass
class TrainContext:
    """Immutable per-run context: class embeddings and sampling streams."""

    train_class_ids: np.ndarray
    class_matrix: torch.Tensor
    val_class_ids: np.ndarray
    label_rng: np.random.Generator
    on_critic_update: Callable | None = None


class AdversarialTask:
    """Standard training wiring around a :class:`ModelBundle`.

    One step runs ``n_critic`` critic updates (each followed by weight
    clipping) on detached embeddings, then a single generator-side update of
    the discriminative head, the reconstructive embedder, and the decoder.
    """

    def __init__(self, bundle: ModelBundle, variant: str = "spaen"):
        self.bundle = bundle
        self.variant = variant

    @property
    def config(self) -> NetConfig:
        return self.bundle.config

    def maps(self) -> dict[str, ParamMap]:
        return self.bundle.maps()

    def parameter_groups(self) -> dict[str, list[torch.Tensor]]:
        return {
            "generator": self.bundle.generator_parameters(),
            "critic": self.bundle.critic.trainable_parameters(),
        }

    def embed(self, images: torch.Tensor) -> torch.Tensor:
        return self.bundle.cls_embedder(images)

    def train_step(
        self,
        optimizers: dict[str, torch.optim.Optimizer],
        images: torch.Tensor,
        labels: np.ndarray,
        ctx: TrainContext,
        hyper: HyperParams,
    ) -> LossBreakdown:
        b = self.bundle
        if hyper.n_critic > 0:
            with torch.no_grad():
                real = b.rec_embedder(images)
                fake = b.cls_embedder(images)
            opt = optimizers["critic"]
            for _ in range(hyper.n_critic):
                loss_d = adv_critic_loss(b.critic, real, fake, hyper.adv_form)
                opt.zero_grad(set_to_none=True)
                loss_d.backward()
                opt.step()
                with torch.no_grad():
                    for p in b.critic.parameters():
                        p.clamp_(-hyper.clip_c, hyper.clip_c)
                if ctx.on_critic_update is not None:
                    ctx.on_critic_update(b.critic)

        terms = objective_terms(
            b, images, labels, ctx.class_matrix, ctx.train_class_ids, hyper,
            rng=ctx.label_rng,
        )
        opt_g = optimizers["generator"]
        opt_g.zero_grad(set_to_none=True)
        terms["total"].backward()
        opt_g.step()
        # the embedder-side adversarial term also leaves gradients on the
        # critic; discard them so the next critic phase starts clean
        optimizers["critic"].zero_grad(set_to_none=True)
        return _breakdown_from_terms(terms)

    def validation_metric(self, dataset, splits: SplitSpec, ctx: TrainContext) -> float:
        return classification_val_h(self.embed, self.config, dataset, splits, ctx)


def _breakdown_from_terms(terms: dict[str, torch.Tensor]) -> LossBreakdown:
    val = lambda name: float(terms[name].detach())
    bd = LossBreakdown(
        cls=val("cls"),
        feat=val("feat"),
        pixel=val("pixel"),
        rec=val("rec"),
        adv_e=val("adv_e"),
        adv_d=val("adv_d"),
        total=val("total"),
    )
    for name in ("cls", "feat", "pixel", "rec", "adv_e", "adv_d", "total"):
        value = getattr(bd, name)
        if not math.isfinite(value):
            raise RuntimeError(
                f"training diverged: loss component {name!r} is non-finite "
                f"({value}); full breakdown: {bd}"
            )
    return bd


@dataclass
class TrainState:
    """Everything that evolves during a run (resumable)."""

    task: object
    dataset: object
    splits: SplitSpec
    hyper: HyperParams
    seed: int
    optimizers: dict[str, torch.optim.Optimizer]
    ctx: TrainContext
    batch_rng: np.random.Generator
    train_ids: list[int]
    lr: float
    epoch: int = 0
    step: int = 0
    best_val_h: float = -math.inf
    best_epoch: int = -1
    epochs_since_improve: int = 0
    best_snapshot: dict[str, np.ndarray] | None = None
    prior_rows: list[EpochRow] = field(default_factory=list)


def batch_schedule(
    train_ids: list[int], batch_size: int, rng: np.random.Generator
) -> list[np.ndarray]:
    """One epoch of batches: a seeded permutation chunked to ``batch_size``
    (final partial batch kept)."""
    ids = np.asarray(train_ids)
    perm = rng.permutation(len(ids))
    shuffled = ids[perm]
    return [shuffled[i : i + batch_size] for i in range(0, len(ids), batch_size)]


def _class_matrix(dataset, class_ids: list[int], dtype: torch.dtype) -> torch.Tensor:
    rows = [spaces.l2_normalize(dataset.attribute_row(c)) for c in class_ids]
    return torch.as_tensor(np.stack(rows), dtype=dtype)


def init_train_state(
    dataset,
    splits: SplitSpec,
    hyper: HyperParams,
    seed: int,
    task=None,
    bundle: ModelBundle | None = None,
    net_config: NetConfig | None = None,
    variant: str = "spaen",
    on_critic_update: Callable | None = None,
) -> TrainState:
    """Build a ready-to-step training state.

    Classes used for the ranking loss are the seen classes minus the
    validation classes; their images in the train split form the batch pool.
    """
    if task is None:
        if bundle is None:
            cfg = net_config or NetConfig(
                embed_dim=dataset.n_attributes,
                image_size=dataset.image_size,
                seed=seed,
            )
            bundle = nets.build_models(cfg, attribute_count=dataset.n_attributes)
        task = AdversarialTask(bundle, variant=variant)

    val_set = set(splits.val_classes)
    train_classes = sorted(set(splits.seen_classes) - val_set)
    if not train_classes:
        raise ValueError("no seen training classes left after removing validation classes")
    train_class_set = set(train_classes)
    train_ids = [i for i in splits.train_ids if dataset.label(i) in train_class_set]
    if not train_ids:
        raise ValueError("train split is empty")

    dtype = task.config.torch_dtype()
    ss = np.random.SeedSequence(seed)
    batch_seq, label_seq = ss.spawn(2)
    ctx = TrainContext(
        train_class_ids=np.asarray(train_classes),
        class_matrix=_class_matrix(dataset, train_classes, dtype),
        val_class_ids=np.asarray(sorted(val_set)),
        label_rng=np.random.default_rng(label_seq),
        on_critic_update=on_critic_update,
    )
    optimizers = {
        name: torch.optim.SGD(params, lr=hyper.learning_rate, momentum=MOMENTUM)
        for name, params in task.parameter_groups().items()
        if params
    }
    return TrainState(
        task=task,
        dataset=dataset,
        splits=splits,
        hyper=hyper,
        seed=seed,
        optimizers=optimizers,
        ctx=ctx,
        batch_rng=np.random.default_rng(batch_seq),
        train_ids=train_ids,
        lr=hyper.learning_rate,
    )


def train_step(
    state: TrainState, batch: tuple[np.ndarray, np.ndarray], hyper: HyperParams | None = None
) -> tuple[TrainState, LossBreakdown]:
    """Run one optimisation step on an explicit batch of seen-class images."""
    hyper = hyper or state.hyper
    images, labels = batch
    x = nets.image_batch(np.asarray(images), state.task.config)
    breakdown = state.task.train_step(state.optimizers, x, np.asarray(labels), state.ctx, hyper)
    state.step += 1
    return state, breakdown


def classification_val_h(
    embed, config: NetConfig, dataset, splits: SplitSpec, ctx: TrainContext
) -> float:
    """Validation H: the validation classes act as pseudo-unseen against the
    remaining seen classes, all measured over seen-class images only.

    Returns NaN when the split has no validation classes (or no images on one
    side), in which case the plateau schedule stays inactive.
    """
    val_classes = [int(c) for c in ctx.val_class_ids]
    train_classes = [int(c) for c in ctx.train_class_ids]
    if not val_classes:
        return float("nan")
    val_set = set(val_classes)
    train_set = set(train_classes)
    pseudo_unseen_ids = [i for i in splits.train_ids if dataset.label(i) in val_set]
    pseudo_seen_ids = [i for i in splits.seen_test_ids if dataset.label(i) in train_set]
    if not pseudo_unseen_ids or not pseudo_seen_ids:
        return float("nan")

    candidate_ids = sorted(train_set | val_set)
    candidates = [
        spaces.ClassEmbedding(c, spaces.l2_normalize(dataset.attribute_row(c)))
        for c in candidate_ids
    ]

    def embed_np(images: np.ndarray) -> np.ndarray:
        x = nets.image_batch(images, config)
        outs = []
        with torch.no_grad():
            for start in range(0, x.shape[0], 256):
                outs.append(embed(x[start : start + 256]))
        return torch.cat(outs).cpu().numpy().astype(np.float64)

    accs = []
    for ids, classes in ((pseudo_unseen_ids, val_classes), (pseudo_seen_ids, train_classes)):
        images = np.stack([dataset.image(i) for i in ids])
        labels = np.asarray([dataset.label(i) for i in ids])
        sm = evaluation.score(embed_np, images, candidates, labels=labels)
        accs.append(evaluation.per_class_top1(evaluation.predict(sm), labels, sorted(classes)))
    return evaluation.harmonic_mean(accs[0], accs[1])


def _snapshot(task) -> dict[str, np.ndarray]:
    return {name: pm.flat_params() for name, pm in task.maps().items()}


def _restore(task, snapshot: dict[str, np.ndarray]) -> None:
    for name, pm in task.maps().items():
        pm.set_flat_params(snapshot[name])


def _set_lr(optimizers: dict[str, torch.optim.Optimizer], lr: float) -> None:
    for opt in optimizers.values():
        for group in opt.param_groups:
            group["lr"] = lr


def fit(
    task,
    dataset,
    splits: SplitSpec,
    hyper: HyperParams,
    epochs: int,
    seed: int,
    out_dir: Path | str | None = None,
    on_critic_update: Callable | None = None,
    resume_from: Path | str | None = None,
    save_state_to: Path | str | None = None,
    log_prefix: list[EpochRow] | None = None,
    epoch_offset: int = 0,
) -> TrainReport:
    """Train ``task`` for ``epochs`` epochs and keep the best-validation maps.

    ``resume_from`` restores a saved state (parameters, momentum, RNG streams,
    schedule counters) and continues for ``epochs`` further epochs.  The
    returned rows cover only this call; epoch numbering continues across
    resumes.
    """
    if epochs < 0:
        raise ValueError(f"epochs must be >= 0, got {epochs}")
    state = init_train_state(
        dataset, splits, hyper, seed, task=task, on_critic_update=on_critic_update
    )
    state.epoch = epoch_offset
    if resume_from is not None:
        _load_train_state(state, resume_from)
    if log_prefix:
        state.prior_rows = list(log_prefix) + state.prior_rows

    start = time.perf_counter()
    rows: list[EpochRow] = []
    for _ in range(epochs):
        batches = batch_schedule(state.train_ids, hyper.batch_size, state.batch_rng)
        sums = np.zeros(7)
        for batch_ids in batches:
            images = np.stack([dataset.image(i) for i in batch_ids])
            labels = np.asarray([dataset.label(i) for i in batch_ids])
            state, bd = train_step(state, (images, labels))
            sums += [bd.cls, bd.feat, bd.pixel, bd.rec, bd.adv_e, bd.adv_d, bd.total]
        means = sums / max(1, len(batches))
        val_h = state.task.validation_metric(dataset, splits, state.ctx)

        if math.isfinite(val_h):
            if val_h > state.best_val_h:
                state.best_val_h = val_h
                state.best_epoch = state.epoch
                state.best_snapshot = _snapshot(state.task)
                state.epochs_since_improve = 0
            else:
                state.epochs_since_improve += 1
                if state.epochs_since_improve >= hyper.patience and state.lr > hyper.min_lr:
                    state.lr = max(state.lr * 0.1, hyper.min_lr)
                    _set_lr(state.optimizers, state.lr)
                    state.epochs_since_improve = 0

        rows.append(EpochRow(state.epoch, *means, val_h=val_h, lr=state.lr))
        state.epoch += 1
    wall = time.perf_counter() - start

    full_log = state.prior_rows + rows
    if save_state_to is not None:
        # carry the full log forward so a later resume keeps every epoch row
        state.prior_rows = full_log
        _save_train_state(state, save_state_to)
    if state.best_snapshot is not None:
        _restore(state.task, state.best_snapshot)

    checkpoint_path = None
    if out_dir is not None:
        out = Path(out_dir)
        nets.save_checkpoint(
            out / "checkpoint",
            state.task.maps(),
            state.task.config,
            seed,
            getattr(state.task, "variant", "spaen"),
            extra={"best_epoch": state.best_epoch},
        )
        checkpoint_path = str(out / "checkpoint")
        write_train_log(out / "train_log.csv", full_log)
    return TrainReport(
        rows=rows,
        wall_clock=wall,
        checkpoint_path=checkpoint_path,
        best_val_h=state.best_val_h,
        best_epoch=state.best_epoch,
        bundle=getattr(state.task, "bundle", None),
    )


def train(
    dataset,
    splits: SplitSpec,
    hyper: HyperParams,
    epochs: int,
    seed: int,
    variant: str = "spaen",
    net_config: NetConfig | None = None,
    out_dir: Path | str | None = None,
    on_critic_update: Callable | None = None,
    resume_from: Path | str | None = None,
    save_state_to: Path | str | None = None,
) -> TrainReport:
    """Train the standard model (or its classification-only degenerate)."""
    if variant == "cls_only":
        hyper = replace(hyper, alpha=0.0, beta=0.0, n_critic=0)
    elif variant != "spaen":
        raise ValueError(
            f"train handles variants 'spaen' and 'cls_only'; use ablations for {variant!r}"
        )
    cfg = net_config or NetConfig(
        embed_dim=dataset.n_attributes, image_size=dataset.image_size, seed=seed
    )
    bundle = nets.build_models(cfg, attribute_count=dataset.n_attributes)
    task = AdversarialTask(bundle, variant=variant)
    return fit(
        task, dataset, splits, hyper, epochs, seed,
        out_dir=out_dir,
        on_critic_update=on_critic_update,
        resume_from=resume_from,
        save_state_to=save_state_to,
    )


def write_train_log(path: Path | str, rows: list[EpochRow]) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, float) else str(v) for v in row.as_list()])


def read_train_log(path: Path | str) -> list[EpochRow]:
    import csv

    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != list(LOG_COLUMNS):
            raise ValueError(f"{path}: unexpected train-log header {header}")
        for raw in reader:
            rows.append(EpochRow(int(raw[0]), *[float(v) for v in raw[1:]]))
    return rows


# ---------------------------------------------------------------------------
# Resumable state: parameters, momentum buffers, RNG streams, schedule
# counters, and the best-validation snapshot.
# ---------------------------------------------------------------------------


def _momentum_arrays(state: TrainState) -> tuple[dict[str, np.ndarray], dict[str, list[int]]]:
    arrays: dict[str, np.ndarray] = {}
    flags: dict[str, list[int]] = {}
    for gname, opt in state.optimizers.items():
        group_flags = []
        for i, p in enumerate(opt.param_groups[0]["params"]):
            buf = opt.state.get(p, {}).get("momentum_buffer")
            group_flags.append(1 if buf is not None else 0)
            if buf is not None:
                arrays[f"mom::{gname}::{i}"] = buf.detach().cpu().numpy().copy()
        flags[gname] = group_flags
    return arrays, flags


def _save_train_state(state: TrainState, out_dir: Path | str) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mom_arrays, mom_flags = _momentum_arrays(state)
    arrays = {f"map::{name}": vec for name, vec in _snapshot(state.task).items()}
    arrays.update(mom_arrays)
    if state.best_snapshot is not None:
        arrays.update({f"best::{name}": vec for name, vec in state.best_snapshot.items()})
    np.savez(out / "arrays.npz", **arrays)
    payload = {
        "format": TRAIN_STATE_FORMAT,
        "variant": getattr(state.task, "variant", "spaen"),
        "seed": state.seed,
        "hyper": asdict(state.hyper),
        "net_config": asdict(state.task.config),
        "epoch": state.epoch,
        "step": state.step,
        "lr": state.lr,
        "best_val_h": state.best_val_h if math.isfinite(state.best_val_h) else None,
        "best_epoch": state.best_epoch,
        "epochs_since_improve": state.epochs_since_improve,
        "has_best": state.best_snapshot is not None,
        "momentum_flags": mom_flags,
        "batch_rng_state": state.batch_rng.bit_generator.state,
        "label_rng_state": state.ctx.label_rng.bit_generator.state,
        "rows": [row.as_list() for row in state.prior_rows],
    }
    with open(out / "state.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_train_state(state: TrainState, in_dir: Path | str) -> None:
    root = Path(in_dir)
    state_path = root / "state.json"
    if not state_path.exists():
        raise FileNotFoundError(f"missing training state: {state_path}")
    payload = json.loads(state_path.read_text())
    if payload.get("format") != TRAIN_STATE_FORMAT:
        raise ValueError(f"{state_path}: unknown state format {payload.get('format')!r}")
    if payload["variant"] != getattr(state.task, "variant", "spaen"):
        raise ValueError(
            f"{state_path}: state is for variant {payload['variant']!r}, "
            f"not {getattr(state.task, 'variant', 'spaen')!r}"
        )
    saved_cfg = json.dumps(payload["net_config"], sort_keys=True)
    this_cfg = json.dumps(json.loads(json.dumps(asdict(state.task.config))), sort_keys=True)
    if saved_cfg != this_cfg:
        raise ValueError(f"{state_path}: saved architecture does not match this run")
    arrays = np.load(root / "arrays.npz")

    for name, pm in state.task.maps().items():
        pm.set_flat_params(arrays[f"map::{name}"])
    state.lr = float(payload["lr"])
    _set_lr(state.optimizers, state.lr)
    for gname, opt in state.optimizers.items():
        flags = payload["momentum_flags"][gname]
        for i, p in enumerate(opt.param_groups[0]["params"]):
            if flags[i]:
                buf = torch.as_tensor(arrays[f"mom::{gname}::{i}"], dtype=p.dtype)
                opt.state[p] = {"momentum_buffer": buf.view_as(p).clone()}
    if payload["has_best"]:
        state.best_snapshot = {
            name: arrays[f"best::{name}"] for name in state.task.maps()
        }
    state.epoch = int(payload["epoch"])
    state.step = int(payload["step"])
    state.best_val_h = (
        float(payload["best_val_h"]) if payload["best_val_h"] is not None else -math.inf
    )
    state.best_epoch = int(payload["best_epoch"])
    state.epochs_since_improve = int(payload["epochs_since_improve"])
    state.batch_rng.bit_generator.state = payload["batch_rng_state"]
    state.ctx.label_rng.bit_generator.state = payload["label_rng_state"]
    state.prior_rows = [EpochRow(int(r[0]), *[float(v) for v in r[1:]]) for r in payload["rows"]]


@dataclass
class GridCell:
    alpha: float
    beta: float
    val_h: float | None
    error: str | None = None


@dataclass
class GridSearchResult:
    alpha: float
    beta: float
    cells: list[GridCell]


def grid_search(
    dataset,
    splits: SplitSpec,
    alpha_grid: list[float],
    beta_grid: list[float],
    seed: int,
    hyper: HyperParams | None = None,
    epochs: int = 30,
    net_config: NetConfig | None = None,
) -> GridSearchResult:
    """Exhaustive search over (alpha, beta) by best validation H.

    Cells whose runs diverge are excluded; exact ties resolve to the smaller
    (alpha, beta) in lexicographic order.
    """
    if not alpha_grid or not beta_grid:
        raise ValueError("alpha and beta grids must be non-empty")
    base = hyper or HyperParams()
    cells: list[GridCell] = []
    best: tuple[float, float] | None = None
    best_h = -math.inf
    for alpha in sorted(alpha_grid):
        for beta in sorted(beta_grid):
            trial = replace(base, alpha=alpha, beta=beta)
            try:
                report = train(
                    dataset, splits, trial, epochs, seed, net_config=net_config
                )
            except RuntimeError as exc:
                cells.append(GridCell(alpha, beta, None, error=str(exc)))
                continue
            finite = [r.val_h for r in report.rows if math.isfinite(r.val_h)]
            if not finite:
                cells.append(GridCell(alpha, beta, None, error="no finite validation H"))
                continue
            cell_h = max(finite)
            cells.append(GridCell(alpha, beta, cell_h))
            if cell_h > best_h:
                best_h = cell_h
                best = (alpha, beta)
    if best is None:
        raise RuntimeError("every grid cell diverged or produced no validation signal")
    return GridSearchResult(alpha=best[0], beta=best[1], cells=cells)
