"""Synthetic attribute-rendered image datasets with an engineered seen/unseen shift.

Images are rendered directly from per-class attribute vectors: attribute ``j``
controls the intensity of colour channel ``j % 3`` inside a fixed rectangle on a
coarse spatial grid (cell ``j // 3``), plus i.i.d. Gaussian pixel noise.  Pixel
content is therefore an explicit function of the attributes, which makes
reconstruction quality measurable and lets us engineer a semantic-loss regime:
a configurable fraction of attributes is held near-constant across the classes
that will remain "seen" while spreading widely across the classes designated
"unseen".  A discriminatively trained embedder has no incentive to keep those
attributes, yet unseen-class recognition still needs them.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

SPLIT_NAMES = ("train", "seen_test", "unseen_test")
CLASS_ROLES = ("seen", "unseen", "val")


@dataclass
class GenConfig:
    """Settings for the synthetic dataset generator."""

    n_classes: int = 20
    n_attributes: int = 24
    n_per_class: int = 60
    image_size: int = 32
    noise_std: float = 0.05
    low_variance_fraction: float = 0.25
    unseen_count: int = 5
    seed: int = 0

    def validate(self) -> None:
        if self.n_classes < 2:
            raise ValueError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.n_attributes < 1:
            raise ValueError(f"n_attributes must be >= 1, got {self.n_attributes}")
        if self.n_per_class < 1:
            raise ValueError(f"n_per_class must be >= 1, got {self.n_per_class}")
        if self.image_size < 1:
            raise ValueError(f"image_size must be >= 1, got {self.image_size}")
        if self.noise_std < 0:
            raise ValueError(f"noise_std must be >= 0, got {self.noise_std}")
        if not 0.0 <= self.low_variance_fraction <= 1.0:
            raise ValueError(
                f"low_variance_fraction must lie in [0, 1], got {self.low_variance_fraction}"
            )
        if not 0 <= self.unseen_count < self.n_classes:
            raise ValueError(
                f"unseen_count must lie in [0, n_classes), got {self.unseen_count}"
            )


@dataclass
class Dataset:
    """An in-memory image dataset with per-class attribute vectors.

    ``images`` are float64 ``(H, W, 3)`` arrays with values in ``[0, 1]``;
    ``class_attributes`` is the ``(n_classes, n_attributes)`` matrix of attribute
    values in ``[0, 1]``.  ``designated_unseen`` records which classes the
    generator gave spread-out values on the low-variance attributes (``None``
    for datasets loaded without that information).  Arrays returned by the
    accessors are live views and must be treated as read-only.
    """

    images: list[np.ndarray]
    labels: list[int]
    class_attributes: np.ndarray
    class_names: list[str]
    designated_unseen: list[int] | None = None
    config: GenConfig | None = None

    def __post_init__(self) -> None:
        self.class_attributes = np.asarray(self.class_attributes, dtype=np.float64)
        if self.class_attributes.ndim != 2:
            raise ValueError("class_attributes must be a 2-D matrix")
        k, _ = self.class_attributes.shape
        if len(self.class_names) != k:
            raise ValueError("one class name required per attribute row")
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels must have equal length")
        if any(not 0 <= l < k for l in self.labels):
            raise ValueError("labels must reference valid class ids")
        if np.any(np.all(self.class_attributes == 0.0, axis=1)):
            raise ValueError("attribute matrix contains an all-zero row")
        if self.images:
            shape = self.images[0].shape
            if len(shape) != 3 or shape[2] != 3:
                raise ValueError(f"images must be (H, W, 3) arrays, got {shape}")
            if any(img.shape != shape for img in self.images):
                raise ValueError("all images must share one shape")

    @property
    def n_images(self) -> int:
        return len(self.images)

    @property
    def n_classes(self) -> int:
        return self.class_attributes.shape[0]

    @property
    def n_attributes(self) -> int:
        return self.class_attributes.shape[1]

    @property
    def image_size(self) -> int:
        return self.images[0].shape[0]

    def image(self, image_id: int) -> np.ndarray:
        return self.images[image_id]

    def label(self, image_id: int) -> int:
        return self.labels[image_id]

    def attribute_row(self, class_id: int) -> np.ndarray:
        return self.class_attributes[class_id]


class LoggedDataset:
    """Read-through proxy that records every image and attribute-row access.

    Used to audit that training touches only seen-class material.  Reading the
    whole attribute matrix counts as reading every row.
    """

    def __init__(self, base: Dataset):
        self.base = base
        self.image_reads: set[int] = set()
        self.image_read_order: list[int] = []
        self.attribute_reads: set[int] = set()

    @property
    def n_images(self) -> int:
        return self.base.n_images

    @property
    def n_classes(self) -> int:
        return self.base.n_classes

    @property
    def n_attributes(self) -> int:
        return self.base.n_attributes

    @property
    def image_size(self) -> int:
        return self.base.image_size

    @property
    def labels(self) -> list[int]:
        return self.base.labels

    @property
    def designated_unseen(self) -> list[int] | None:
        return self.base.designated_unseen

    @property
    def config(self) -> GenConfig | None:
        return self.base.config

    @property
    def class_attributes(self) -> np.ndarray:
        self.attribute_reads.update(range(self.base.n_classes))
        return self.base.class_attributes

    def image(self, image_id: int) -> np.ndarray:
        self.image_reads.add(image_id)
        self.image_read_order.append(image_id)
        return self.base.image(image_id)

    def label(self, image_id: int) -> int:
        return self.base.label(image_id)

    def attribute_row(self, class_id: int) -> np.ndarray:
        self.attribute_reads.add(class_id)
        return self.base.attribute_row(class_id)


@dataclass
class SplitSpec:
    """Class roles and image-id lists for one train/test split."""

    seen_classes: list[int]
    unseen_classes: list[int]
    val_classes: list[int]
    train_ids: list[int]
    seen_test_ids: list[int]
    unseen_test_ids: list[int]

    def validate(self, dataset: Dataset | None = None) -> None:
        seen, unseen, val = map(set, (self.seen_classes, self.unseen_classes, self.val_classes))
        if seen & unseen:
            raise ValueError("seen and unseen classes overlap")
        if not val <= seen:
            raise ValueError("validation classes must be seen classes")
        id_lists = (self.train_ids, self.seen_test_ids, self.unseen_test_ids)
        all_ids = [i for ids in id_lists for i in ids]
        if len(all_ids) != len(set(all_ids)):
            raise ValueError("split image-id lists overlap")
        if dataset is not None:
            if seen | unseen != set(range(dataset.n_classes)):
                raise ValueError("split classes must partition the dataset classes")
            for i in self.train_ids + self.seen_test_ids:
                if dataset.label(i) not in seen:
                    raise ValueError(f"image {i} in a seen split has an unseen label")
            for i in self.unseen_test_ids:
                if dataset.label(i) not in unseen:
                    raise ValueError(f"image {i} in the unseen split has a seen label")


def _cell_bounds(image_size: int, n_cells: int) -> list[tuple[int, int, int, int]]:
    """Row/column pixel bounds for each cell of a near-square grid."""
    grid = math.ceil(math.sqrt(n_cells))
    edges = [i * image_size // grid for i in range(grid + 1)]
    bounds = []
    for cell in range(n_cells):
        r, c = divmod(cell, grid)
        bounds.append((edges[r], edges[r + 1], edges[c], edges[c + 1]))
    return bounds


def render_class_image(attributes: np.ndarray, image_size: int) -> np.ndarray:
    """Noise-free image for one attribute vector: one rectangle per attribute."""
    attributes = np.asarray(attributes, dtype=np.float64)
    n_cells = math.ceil(len(attributes) / 3)
    bounds = _cell_bounds(image_size, n_cells)
    img = np.zeros((image_size, image_size, 3), dtype=np.float64)
    for j, value in enumerate(attributes):
        r0, r1, c0, c1 = bounds[j // 3]
        img[r0:r1, c0:c1, j % 3] = value
    return img


def _make_class_attributes(
    config: GenConfig, rng: np.random.Generator
) -> tuple[np.ndarray, list[int]]:
    k, d = config.n_classes, config.n_attributes
    matrix = rng.uniform(0.0, 1.0, size=(k, d))
    n_low = int(round(config.low_variance_fraction * d))
    designated = list(range(k - config.unseen_count, k))
    for j in range(d - n_low, d):
        centre = rng.uniform(0.3, 0.7)
        # The +/-0.05 jitter keeps these attributes weakly informative on the
        # seen side (an embedder still gets a gradient anchoring their scale)
        # while staying an order of magnitude under the low-variance bound.
        matrix[:, j] = np.clip(centre + rng.uniform(-0.05, 0.05, size=k), 0.0, 1.0)
        if designated:
            # Equally spaced values guarantee the unseen-side variance dominates
            # the jitter left on the seen side, for any unseen_count >= 2.
            spread = np.linspace(0.05, 0.95, num=len(designated))
            matrix[designated, j] = rng.permutation(spread)
    return matrix, designated


def generate_synthetic(config: GenConfig) -> Dataset:
    """Render a deterministic synthetic dataset from ``config``.

    The seed is partitioned into one substream for the attribute matrix and one
    substream per image id, so generation is reproducible and could be
    parallelised per image without changing any pixel.
    """
    config.validate()
    root = np.random.SeedSequence(config.seed)
    attr_seq, image_seq = root.spawn(2)
    attributes, designated = _make_class_attributes(config, np.random.default_rng(attr_seq))
    per_image = image_seq.spawn(config.n_classes * config.n_per_class)

    images: list[np.ndarray] = []
    labels: list[int] = []
    image_id = 0
    for class_id in range(config.n_classes):
        base = render_class_image(attributes[class_id], config.image_size)
        for _ in range(config.n_per_class):
            if config.noise_std > 0:
                rng_i = np.random.default_rng(per_image[image_id])
                noise = rng_i.normal(0.0, config.noise_std, size=base.shape)
                img = np.clip(base + noise, 0.0, 1.0)
            else:
                img = base.copy()
            images.append(img)
            labels.append(class_id)
            image_id += 1

    names = [f"class_{k:02d}" for k in range(config.n_classes)]
    return Dataset(
        images=images,
        labels=labels,
        class_attributes=attributes,
        class_names=names,
        designated_unseen=designated,
        config=replace(config),
    )


def make_splits(
    dataset: Dataset,
    unseen_count: int = 5,
    val_count: int = 3,
    seed: int = 0,
    test_fraction: float = 0.2,
) -> SplitSpec:
    """Partition classes into seen/unseen (plus seen validation classes) and
    split seen-class images into train and test.

    When the generator designated exactly ``unseen_count`` attribute-spread
    classes those become the unseen classes; otherwise unseen classes are
    sampled with the given seed.  Every unseen-class image lands in the unseen
    test split.
    """
    k = dataset.n_classes
    if unseen_count < 0 or unseen_count >= k:
        raise ValueError(f"unseen_count must lie in [0, n_classes), got {unseen_count}")
    if val_count < 0:
        raise ValueError(f"val_count must be >= 0, got {val_count}")
    if k - unseen_count - val_count < 1:
        raise ValueError(
            "split leaves zero seen training classes "
            f"(n_classes={k}, unseen_count={unseen_count}, val_count={val_count})"
        )
    if not 0.0 <= test_fraction < 1.0:
        raise ValueError(f"test_fraction must lie in [0, 1), got {test_fraction}")

    rng = np.random.default_rng(seed)
    designated = dataset.designated_unseen
    if designated is not None and len(designated) == unseen_count:
        unseen = sorted(designated)
    else:
        unseen = sorted(rng.choice(k, size=unseen_count, replace=False).tolist())
    unseen_set = set(unseen)
    seen = [c for c in range(k) if c not in unseen_set]
    if val_count:
        val = sorted(rng.choice(np.asarray(seen), size=val_count, replace=False).tolist())
    else:
        val = []

    by_class: dict[int, list[int]] = {c: [] for c in range(k)}
    for image_id, label in enumerate(dataset.labels):
        by_class[label].append(image_id)

    train_ids: list[int] = []
    seen_test_ids: list[int] = []
    for c in seen:
        ids = np.asarray(by_class[c])
        if len(ids) > 1:
            n_test = min(max(1, round(test_fraction * len(ids))), len(ids) - 1)
        else:
            n_test = 0
        order = rng.permutation(len(ids))
        seen_test_ids.extend(ids[order[:n_test]].tolist())
        train_ids.extend(ids[order[n_test:]].tolist())
    unseen_test_ids = [i for c in unseen for i in by_class[c]]

    split = SplitSpec(
        seen_classes=seen,
        unseen_classes=unseen,
        val_classes=val,
        train_ids=sorted(train_ids),
        seen_test_ids=sorted(seen_test_ids),
        unseen_test_ids=sorted(unseen_test_ids),
    )
    split.validate(dataset)
    return split


# ---------------------------------------------------------------------------
# On-disk format: images/<id>.ppm (binary P6), classes.csv, splits.csv,
# gen_config.json.  Everything is deterministic, text files carry no
# timestamps, and attribute floats round-trip bit-exactly via repr().
# ---------------------------------------------------------------------------


def write_ppm(path: Path | str, image: np.ndarray) -> None:
    """Write one ``(H, W, 3)`` float image in ``[0, 1]`` as a binary P6 file."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {image.shape}")
    h, w, _ = image.shape
    pixels = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_ppm(path: Path | str) -> np.ndarray:
    """Read a binary P6 file written by :func:`write_ppm` back to float64."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing image file: {path}")
    raw = path.read_bytes()
    if not raw.startswith(b"P6"):
        raise ValueError(f"{path}: not a binary P6 file")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        token = raw[start:pos]
        if not token:
            raise ValueError(f"{path}: truncated header")
        try:
            fields.append(int(token))
        except ValueError as exc:
            raise ValueError(f"{path}: bad header token {token!r}") from exc
    pos += 1  # single whitespace byte after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    body = raw[pos:]
    if len(body) != w * h * 3:
        raise ValueError(f"{path}: expected {w * h * 3} pixel bytes, got {len(body)}")
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    return pixels.astype(np.float64) / 255.0


def _attribute_header(n_attributes: int) -> list[str]:
    return ["class_id", "name"] + [f"a_{j + 1}" for j in range(n_attributes)]


def save_dataset(dataset: Dataset, splits: SplitSpec, out_dir: Path | str) -> None:
    """Persist a dataset and its split to ``out_dir`` (created if needed)."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)

    with open(out / "classes.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_attribute_header(dataset.n_attributes))
        for class_id in range(dataset.n_classes):
            row = [str(class_id), dataset.class_names[class_id]]
            row += [repr(float(v)) for v in dataset.class_attributes[class_id]]
            writer.writerow(row)

    membership: list[tuple[int, str, int]] = []
    for split_name, ids in zip(SPLIT_NAMES, (splits.train_ids, splits.seen_test_ids, splits.unseen_test_ids)):
        membership += [(i, split_name, dataset.label(i)) for i in ids]
    membership.sort()
    with open(out / "splits.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "split", "class_id"])
        for image_id, split_name, class_id in membership:
            writer.writerow([str(image_id), split_name, str(class_id)])

    meta = {
        "gen_config": asdict(dataset.config) if dataset.config else None,
        "designated_unseen": dataset.designated_unseen,
        "seen_classes": splits.seen_classes,
        "unseen_classes": splits.unseen_classes,
        "val_classes": splits.val_classes,
    }
    with open(out / "gen_config.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")

    for image_id in sorted(i for i, _, _ in membership):
        write_ppm(out / "images" / f"{image_id}.ppm", dataset.image(image_id))


def _read_attribute_csv(path: Path) -> tuple[list[int], list[str], np.ndarray]:
    if not path.exists():
        raise FileNotFoundError(f"missing dataset file: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}:1: empty file")
        if len(header) < 3:
            raise ValueError(f"{path}:1: expected class_id,name,a_1,... header")
        width = len(header)
        ids: list[int] = []
        names: list[str] = []
        rows: list[list[float]] = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != width:
                raise ValueError(
                    f"{path}:{lineno}: expected {width} columns, got {len(row)}"
                )
            try:
                ids.append(int(row[0]))
                rows.append([float(v) for v in row[2:]])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
            names.append(row[1])
    return ids, names, np.asarray(rows, dtype=np.float64)


def load_dataset(dataset_dir: Path | str) -> tuple[Dataset, SplitSpec]:
    """Load a dataset directory written by :func:`save_dataset`."""
    root = Path(dataset_dir)
    ids, names, matrix = _read_attribute_csv(root / "classes.csv")
    order = np.argsort(ids)
    if sorted(ids) != list(range(len(ids))):
        raise ValueError(f"{root / 'classes.csv'}: class ids must be 0..{len(ids) - 1}")
    matrix = matrix[order]
    names = [names[i] for i in order]

    splits_path = root / "splits.csv"
    if not splits_path.exists():
        raise FileNotFoundError(f"missing dataset file: {splits_path}")
    split_ids: dict[str, list[int]] = {name: [] for name in SPLIT_NAMES}
    labels_by_id: dict[int, int] = {}
    with open(splits_path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise ValueError(f"{splits_path}:{lineno}: expected 3 columns, got {len(row)}")
            try:
                image_id, class_id = int(row[0]), int(row[2])
            except ValueError as exc:
                raise ValueError(f"{splits_path}:{lineno}: {exc}") from exc
            if row[1] not in split_ids:
                raise ValueError(f"{splits_path}:{lineno}: unknown split {row[1]!r}")
            split_ids[row[1]].append(image_id)
            labels_by_id[image_id] = class_id
    if sorted(labels_by_id) != list(range(len(labels_by_id))):
        raise ValueError(f"{splits_path}: image ids must be contiguous from 0")

    meta_path = root / "gen_config.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"missing dataset file: {meta_path}")
    meta = json.loads(meta_path.read_text())

    images = [read_ppm(root / "images" / f"{i}.ppm") for i in range(len(labels_by_id))]
    labels = [labels_by_id[i] for i in range(len(labels_by_id))]
    cfg = GenConfig(**meta["gen_config"]) if meta.get("gen_config") else None
    dataset = Dataset(
        images=images,
        labels=labels,
        class_attributes=matrix,
        class_names=names,
        designated_unseen=meta.get("designated_unseen"),
        config=cfg,
    )
    splits = SplitSpec(
        seen_classes=meta["seen_classes"],
        unseen_classes=meta["unseen_classes"],
        val_classes=meta["val_classes"],
        train_ids=sorted(split_ids["train"]),
        seen_test_ids=sorted(split_ids["seen_test"]),
        unseen_test_ids=sorted(split_ids["unseen_test"]),
    )
    splits.validate(dataset)
    return dataset, splits


def save_class_roles(path: Path | str, splits: SplitSpec) -> None:
    """Write the class-role table (``class_id,role``) for an attribute-only export."""
    roles = {c: "seen" for c in splits.seen_classes}
    roles.update({c: "unseen" for c in splits.unseen_classes})
    roles.update({c: "val" for c in splits.val_classes})
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class_id", "role"])
        for class_id in sorted(roles):
            writer.writerow([str(class_id), roles[class_id]])


def load_external_attributes(
    classes_file: Path | str, roles_file: Path | str | None = None
) -> tuple[np.ndarray, SplitSpec]:
    """Load a class-attribute matrix (and optional class roles) from CSV files.

    Returns the ``(n_classes, n_attributes)`` matrix ordered by class id and a
    :class:`SplitSpec` with empty image-id lists.  ``val`` classes count as
    seen.  With no roles file every class is marked seen.
    """
    ids, _, matrix = _read_attribute_csv(Path(classes_file))
    order = np.argsort(ids)
    matrix = matrix[order]
    sorted_ids = sorted(ids)
    if len(set(sorted_ids)) != len(sorted_ids):
        raise ValueError(f"{classes_file}: duplicate class ids")

    seen: list[int] = []
    unseen: list[int] = []
    val: list[int] = []
    if roles_file is None:
        seen = sorted_ids
    else:
        roles_path = Path(roles_file)
        if not roles_path.exists():
            raise FileNotFoundError(f"missing dataset file: {roles_path}")
        with open(roles_path, newline="") as fh:
            reader = csv.reader(fh)
            next(reader, None)
            for lineno, row in enumerate(reader, start=2):
                if len(row) != 2:
                    raise ValueError(f"{roles_path}:{lineno}: expected 2 columns, got {len(row)}")
                try:
                    class_id = int(row[0])
                except ValueError as exc:
                    raise ValueError(f"{roles_path}:{lineno}: {exc}") from exc
                role = row[1].strip()
                if role not in CLASS_ROLES:
                    raise ValueError(f"{roles_path}:{lineno}: unknown role {role!r}")
                if role == "unseen":
                    unseen.append(class_id)
                else:
                    seen.append(class_id)
                    if role == "val":
                        val.append(class_id)
    splits = SplitSpec(
        seen_classes=sorted(seen),
        unseen_classes=sorted(unseen),
        val_classes=sorted(val),
        train_ids=[],
        seen_test_ids=[],
        unseen_test_ids=[],
    )
    splits.validate()
    return matrix, splits


def load_image_attribute_table(path: Path | str) -> tuple[np.ndarray, np.ndarray]:
    """Load a per-image attribute CSV (``image_id,a_1,...``) as (ids, matrix)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing dataset file: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}:1: empty file")
        width = len(header)
        ids: list[int] = []
        rows: list[list[float]] = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != width:
                raise ValueError(f"{path}:{lineno}: expected {width} columns, got {len(row)}")
            try:
                ids.append(int(row[0]))
                rows.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return np.asarray(ids, dtype=np.int64), np.asarray(rows, dtype=np.float64)


def load_image_splits_table(path: Path | str) -> dict[str, list[int]]:
    """Load an image-level split CSV (``image_id,split,class_id``) as id lists."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing dataset file: {path}")
    out: dict[str, list[int]] = {name: [] for name in SPLIT_NAMES}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
            if row[1] not in out:
                raise ValueError(f"{path}:{lineno}: unknown split {row[1]!r}")
            try:
                out[row[1]].append(int(row[0]))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return out


def image_stack(dataset: Dataset | LoggedDataset, image_ids: list[int]) -> np.ndarray:
    """Stack images by id into one ``(N, H, W, 3)`` array via the logged accessor."""
    if not image_ids:
        raise ValueError("image_stack requires at least one image id")
    return np.stack([dataset.image(i) for i in image_ids])
