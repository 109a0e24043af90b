"""Desk-scale differentiable maps: a discriminative embedder with a frozen
convolutional trunk, a fully trainable reconstructive embedder, an image
decoder, an embedding-space critic, and a frozen random perceptual extractor.

All maps are wrapped in :class:`ParamMap`, which pins the per-sample input and
output shapes, exposes flat parameter vectors for checkpointing and numeric
gradient checks, and names itself in every shape error.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

_DTYPES = {"float64": torch.float64, "float32": torch.float32}
_PHI_CHANNELS = (8, 16, 32)
INIT_SCHEMES = ("msra", "xavier")


@dataclass
class NetConfig:
    """Architecture settings shared by all maps."""

    embed_dim: int = 24
    image_size: int = 32
    conv_channels: tuple[int, int] = (16, 32)
    hidden_width: int = 64
    decoder_channels: tuple[int, int, int] = (32, 16, 8)
    leaky_slope: float = 0.2
    init_scheme: str = "msra"
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self) -> None:
        self.conv_channels = tuple(self.conv_channels)
        self.decoder_channels = tuple(self.decoder_channels)

    def validate(self) -> None:
        if self.embed_dim < 1:
            raise ValueError(f"embed_dim must be >= 1, got {self.embed_dim}")
        if self.image_size < 8 or self.image_size % 8 != 0:
            raise ValueError(
                f"image_size must be a positive multiple of 8, got {self.image_size}"
            )
        if len(self.conv_channels) != 2 or any(c < 1 for c in self.conv_channels):
            raise ValueError(f"conv_channels must be two positive ints, got {self.conv_channels}")
        if len(self.decoder_channels) != 3 or any(c < 1 for c in self.decoder_channels):
            raise ValueError(
                f"decoder_channels must be three positive ints, got {self.decoder_channels}"
            )
        if self.hidden_width < 1:
            raise ValueError(f"hidden_width must be >= 1, got {self.hidden_width}")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ValueError(f"leaky_slope must lie in (0, 1), got {self.leaky_slope}")
        if self.init_scheme not in INIT_SCHEMES:
            raise ValueError(f"unknown init_scheme {self.init_scheme!r}")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}, got {self.dtype!r}")

    def torch_dtype(self) -> torch.dtype:
        return _DTYPES[self.dtype]

    @classmethod
    def from_dict(cls, payload: dict) -> "NetConfig":
        cfg = cls(**payload)
        cfg.validate()
        return cfg


def _fan_in_out(module: nn.Module) -> tuple[int, int]:
    w = module.weight
    if isinstance(module, nn.Linear):
        return w.shape[1], w.shape[0]
    if isinstance(module, nn.Conv2d):
        receptive = w.shape[2] * w.shape[3]
        return w.shape[1] * receptive, w.shape[0] * receptive
    if isinstance(module, nn.ConvTranspose2d):
        # transposed-conv weights are stored (in, out, kh, kw)
        receptive = w.shape[2] * w.shape[3]
        return w.shape[0] * receptive, w.shape[1] * receptive
    raise TypeError(f"no fan rule for {type(module).__name__}")


def apply_init(module: nn.Module, scheme: str, generator: torch.Generator) -> None:
    """Seeded weight init: zero biases, fan-scaled normal weights.

    ``msra`` uses std = sqrt(2 / fan_in); ``xavier`` uses
    std = sqrt(2 / (fan_in + fan_out)).  Layers are visited in registration
    order so identical seeds give identical parameters.
    """
    if scheme not in INIT_SCHEMES:
        raise ValueError(f"unknown init scheme {scheme!r}")
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv2d, nn.ConvTranspose2d)):
            fan_in, fan_out = _fan_in_out(m)
            if scheme == "msra":
                std = math.sqrt(2.0 / fan_in)
            else:
                std = math.sqrt(2.0 / (fan_in + fan_out))
            with torch.no_grad():
                m.weight.normal_(0.0, std, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()


class ConvTrunk(nn.Module):
    """Two stride-2 conv+ReLU blocks followed by flattening."""

    def __init__(self, channels: tuple[int, int], image_size: int):
        super().__init__()
        c1, c2 = channels
        self.conv1 = nn.Conv2d(3, c1, kernel_size=3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(c1, c2, kernel_size=3, stride=2, padding=1)
        self.out_dim = c2 * (image_size // 4) ** 2

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = torch.relu(self.conv1(x))
        x = torch.relu(self.conv2(x))
        return x.flatten(1)


class AffineHead(nn.Module):
    """Two affine layers with a ReLU between them."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.relu(self.fc1(x)))


class Embedder(nn.Module):
    """Conv trunk + affine head producing an embedding vector."""

    def __init__(self, trunk: ConvTrunk, head: AffineHead):
        super().__init__()
        self.trunk = trunk
        self.head = head

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.trunk(x))


class Decoder(nn.Module):
    """Affine head + three stride-2 up-conv blocks mapping an embedding back to
    an image; the final sigmoid keeps pixels in [0, 1]."""

    def __init__(self, config: NetConfig):
        super().__init__()
        c0, c1, c2 = config.decoder_channels
        self.start = config.image_size // 8
        self.c0 = c0
        self.fc1 = nn.Linear(config.embed_dim, config.hidden_width)
        self.fc2 = nn.Linear(config.hidden_width, c0 * self.start * self.start)
        self.up1 = nn.ConvTranspose2d(c0, c1, kernel_size=4, stride=2, padding=1)
        self.up2 = nn.ConvTranspose2d(c1, c2, kernel_size=4, stride=2, padding=1)
        self.up3 = nn.ConvTranspose2d(c2, 3, kernel_size=4, stride=2, padding=1)
        self.slope = config.leaky_slope

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        act = lambda t: torch.nn.functional.leaky_relu(t, self.slope)
        h = act(self.fc1(z))
        h = act(self.fc2(h))
        h = h.view(h.shape[0], self.c0, self.start, self.start)
        h = act(self.up1(h))
        h = act(self.up2(h))
        return torch.sigmoid(self.up3(h))


class Critic(nn.Module):
    """Embedding-space critic: affine to a hidden layer, ReLU, affine to a scalar."""

    def __init__(self, embed_dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(embed_dim, hidden)
        self.fc2 = nn.Linear(hidden, 1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.relu(self.fc1(z)))


class Perceptual(nn.Module):
    """Frozen random three-block conv stack used as a fixed feature space."""

    def __init__(self, image_size: int):
        super().__init__()
        p1, p2, p3 = _PHI_CHANNELS
        self.conv1 = nn.Conv2d(3, p1, kernel_size=3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(p1, p2, kernel_size=3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(p2, p3, kernel_size=3, stride=2, padding=1)
        self.out_dim = p3 * (image_size // 8) ** 2

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = torch.relu(self.conv1(x))
        x = torch.relu(self.conv2(x))
        x = torch.relu(self.conv3(x))
        return x.flatten(1)


class ParamMap:
    """A named differentiable map with a fixed per-sample shape contract.

    ``in_shape``/``out_shape`` exclude the batch dimension; ``__call__`` accepts
    either a single sample or a batch and reports the map's name on any shape
    mismatch.  ``trainable=False`` force-freezes every parameter; with
    ``trainable=True`` the per-parameter ``requires_grad`` flags are respected,
    which is how the discriminative embedder keeps a frozen trunk under a
    trainable head.
    """

    def __init__(
        self,
        name: str,
        module: nn.Module,
        in_shape: tuple[int, ...],
        out_shape: tuple[int, ...],
        trainable: bool = True,
    ):
        self.name = name
        self.module = module
        self.in_shape = tuple(in_shape)
        self.out_shape = tuple(out_shape)
        self.trainable = bool(trainable)
        if not self.trainable:
            for p in module.parameters():
                p.requires_grad_(False)
        params = list(module.parameters())
        self._dtype = params[0].dtype if params else torch.float64

    def __call__(self, x: torch.Tensor | np.ndarray) -> torch.Tensor:
        if not torch.is_tensor(x):
            x = torch.as_tensor(np.asarray(x))
        x = x.to(self._dtype)
        single = x.dim() == len(self.in_shape)
        if single:
            x = x.unsqueeze(0)
        if x.shape[1:] != torch.Size(self.in_shape):
            raise ValueError(
                f"{self.name}: expected input of shape {self.in_shape} "
                f"(optionally batched), got {tuple(x.shape)}"
            )
        out = self.module(x)
        expected = torch.Size((x.shape[0],) + self.out_shape)
        if out.shape != expected:
            raise ValueError(
                f"{self.name}: produced shape {tuple(out.shape)}, expected {tuple(expected)}"
            )
        return out.squeeze(0) if single else out

    @property
    def dtype(self) -> torch.dtype:
        return self._dtype

    def parameters(self) -> list[torch.Tensor]:
        return list(self.module.parameters())

    def trainable_parameters(self) -> list[torch.Tensor]:
        return [p for p in self.module.parameters() if p.requires_grad]

    @property
    def n_params(self) -> int:
        return sum(p.numel() for p in self.module.parameters())

    def flat_params(self) -> np.ndarray:
        """All parameters (frozen included) as one flat numpy vector."""
        parts = [p.detach().reshape(-1) for p in self.module.parameters()]
        if not parts:
            return np.zeros(0, dtype=np.float64)
        return torch.cat(parts).cpu().numpy().copy()

    def set_flat_params(self, vector: np.ndarray) -> None:
        vector = np.asarray(vector)
        if vector.size != self.n_params:
            raise ValueError(
                f"{self.name}: expected {self.n_params} parameters, got {vector.size}"
            )
        offset = 0
        with torch.no_grad():
            for p in self.module.parameters():
                n = p.numel()
                chunk = torch.as_tensor(vector[offset : offset + n], dtype=p.dtype)
                p.copy_(chunk.view_as(p))
                offset += n


@dataclass
class ModelBundle:
    """The five maps trained and probed together."""

    cls_embedder: ParamMap
    rec_embedder: ParamMap
    decoder: ParamMap
    critic: ParamMap
    perceptual: ParamMap
    config: NetConfig

    def maps(self) -> dict[str, ParamMap]:
        return {
            "cls_embedder": self.cls_embedder,
            "rec_embedder": self.rec_embedder,
            "decoder": self.decoder,
            "critic": self.critic,
            "perceptual": self.perceptual,
        }

    def cls_head_parameters(self) -> list[torch.Tensor]:
        return self.cls_embedder.trainable_parameters()

    def cls_trunk_vector(self) -> np.ndarray:
        parts = [p.detach().reshape(-1) for p in self.cls_embedder.module.trunk.parameters()]
        return torch.cat(parts).cpu().numpy().copy()

    def generator_parameters(self) -> list[torch.Tensor]:
        """Everything updated in the generator-side step: the discriminative
        head plus the reconstructive embedder and decoder."""
        return (
            self.cls_embedder.trainable_parameters()
            + self.rec_embedder.trainable_parameters()
            + self.decoder.trainable_parameters()
        )

    def embed_for_classification(self, images: np.ndarray) -> np.ndarray:
        """Embed ``(N, H, W, 3)`` images with the discriminative embedder."""
        return _embed_numpy(self.cls_embedder, images, self.config)

    def reconstruct(self, images: np.ndarray) -> np.ndarray:
        """Decode the reconstructive embedding back to images."""
        x = image_batch(images, self.config)
        with torch.no_grad():
            out = self.decoder(self.rec_embedder(x))
        return batch_to_images(out)


def _embed_numpy(embedder: ParamMap, images: np.ndarray, config: NetConfig) -> np.ndarray:
    x = image_batch(images, config)
    chunks = []
    with torch.no_grad():
        for start in range(0, x.shape[0], 256):
            chunks.append(embedder(x[start : start + 256]))
    return torch.cat(chunks).cpu().numpy().astype(np.float64)


def image_batch(images: np.ndarray | list[np.ndarray], config: NetConfig) -> torch.Tensor:
    """Convert ``(N, H, W, 3)`` (or a list of ``(H, W, 3)``) images to a
    channels-first tensor in the bundle's dtype."""
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[3] != 3:
        raise ValueError(f"expected (N, H, W, 3) images, got shape {arr.shape}")
    tensor = torch.as_tensor(arr.transpose(0, 3, 1, 2), dtype=config.torch_dtype())
    return tensor.contiguous()


def batch_to_images(tensor: torch.Tensor) -> np.ndarray:
    """Convert a channels-first image tensor back to ``(N, H, W, 3)`` float64."""
    return tensor.detach().cpu().numpy().transpose(0, 2, 3, 1).astype(np.float64)


def build_models(config: NetConfig, attribute_count: int | None = None) -> ModelBundle:
    """Construct and seed-initialise all five maps.

    ``attribute_count`` cross-checks the embedding width against the dataset's
    attribute dimension at construction time.
    """
    config.validate()
    if attribute_count is not None and attribute_count != config.embed_dim:
        raise ValueError(
            f"embed_dim {config.embed_dim} does not match dataset attribute "
            f"count {attribute_count}"
        )
    dtype = config.torch_dtype()
    gen = torch.Generator().manual_seed(config.seed)
    s, d = config.image_size, config.embed_dim
    img_shape = (3, s, s)

    def finish(module: nn.Module) -> nn.Module:
        module.to(dtype)
        apply_init(module, config.init_scheme, gen)
        return module

    # fork_rng keeps torch's global stream untouched: module constructors draw
    # placeholder weights from it before apply_init overwrites them
    with torch.random.fork_rng(devices=[]):
        cls_trunk = finish(ConvTrunk(config.conv_channels, s))
        cls_head = finish(AffineHead(cls_trunk.out_dim, config.hidden_width, d))
        rec_trunk = finish(ConvTrunk(config.conv_channels, s))
        rec_head = finish(AffineHead(rec_trunk.out_dim, config.hidden_width, d))
        decoder = finish(Decoder(config))
        critic = finish(Critic(d, config.hidden_width))
        perceptual = finish(Perceptual(s))

    for p in cls_trunk.parameters():
        p.requires_grad_(False)

    bundle = ModelBundle(
        cls_embedder=ParamMap("cls_embedder", Embedder(cls_trunk, cls_head), img_shape, (d,)),
        rec_embedder=ParamMap("rec_embedder", Embedder(rec_trunk, rec_head), img_shape, (d,)),
        decoder=ParamMap("decoder", decoder, (d,), img_shape),
        critic=ParamMap("critic", critic, (d,), (1,)),
        perceptual=ParamMap(
            "perceptual", perceptual, img_shape, (perceptual.out_dim,), trainable=False
        ),
        config=config,
    )
    return bundle


def grad_check(
    pmap: ParamMap,
    loss_fn: Callable[[ParamMap, torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    eps: float,
    n_coords: int = 20,
    seed: int = 0,
) -> float:
    """Maximum relative error between autograd and central finite differences.

    ``loss_fn(pmap, x)`` must return a scalar tensor and be deterministic.
    Trainable maps are checked in parameter space over a seeded random
    coordinate subset; frozen maps are checked with respect to the input.
    Relative error is ``|a - n| / max(|a| + |n|, 1e-8)``.
    """
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    if not torch.is_tensor(x):
        x = torch.as_tensor(np.asarray(x), dtype=pmap.dtype)
    params = pmap.trainable_parameters()
    check_input = not params

    if check_input:
        x = x.clone().detach().requires_grad_(True)
        loss = loss_fn(pmap, x)
        _require_finite_scalar(pmap.name, loss)
        (grad,) = torch.autograd.grad(loss, [x])
        targets = [x]
        grads = [grad]
    else:
        loss = loss_fn(pmap, x)
        _require_finite_scalar(pmap.name, loss)
        raw = torch.autograd.grad(loss, params, allow_unused=True)
        targets = params
        grads = [g if g is not None else torch.zeros_like(p) for g, p in zip(raw, params)]

    sizes = [t.numel() for t in targets]
    total = sum(sizes)
    rng = np.random.default_rng(seed)
    coords = rng.choice(total, size=min(n_coords, total), replace=False)

    worst = 0.0
    for flat_idx in sorted(int(c) for c in coords):
        t_idx = 0
        offset = flat_idx
        while offset >= sizes[t_idx]:
            offset -= sizes[t_idx]
            t_idx += 1
        tensor = targets[t_idx]
        flat = tensor.detach().reshape(-1)
        original = flat[offset].item()

        def eval_at(value: float) -> float:
            with torch.no_grad():
                flat[offset] = value
            out = loss_fn(pmap, x)
            _require_finite_scalar(pmap.name, out)
            return float(out.detach())

        plus = eval_at(original + eps)
        minus = eval_at(original - eps)
        with torch.no_grad():
            flat[offset] = original
        numeric = (plus - minus) / (2.0 * eps)
        analytic = float(grads[t_idx].reshape(-1)[offset])
        rel = abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-8)
        worst = max(worst, rel)
    return worst


def _require_finite_scalar(name: str, loss: torch.Tensor) -> None:
    if loss.dim() != 0:
        raise ValueError(f"{name}: loss_fn must return a scalar, got shape {tuple(loss.shape)}")
    if not torch.isfinite(loss):
        raise ValueError(f"{name}: loss is non-finite ({float(loss.detach())})")


# ---------------------------------------------------------------------------
# Checkpoint format: manifest.json plus one flat .npy vector per map.
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = "spaen-checkpoint-v1"


def save_checkpoint(
    out_dir: Path | str,
    maps: dict[str, ParamMap],
    config: NetConfig,
    seed: int,
    variant: str,
    extra: dict | None = None,
) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "variant": variant,
        "seed": seed,
        "config": asdict(config),
        "maps": {
            name: {
                "file": f"{name}.npy",
                "n_params": pm.n_params,
                "in_shape": list(pm.in_shape),
                "out_shape": list(pm.out_shape),
                "trainable": pm.trainable,
            }
            for name, pm in sorted(maps.items())
        },
        "extra": extra or {},
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for name, pm in maps.items():
        np.save(out / f"{name}.npy", pm.flat_params())
    return out


def load_checkpoint(checkpoint_dir: Path | str) -> tuple[dict, dict[str, np.ndarray]]:
    root = Path(checkpoint_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"missing checkpoint manifest: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{manifest_path}: unknown checkpoint format {manifest.get('format')!r}")
    vectors = {}
    for name, entry in manifest["maps"].items():
        vec_path = root / entry["file"]
        if not vec_path.exists():
            raise FileNotFoundError(f"missing checkpoint file: {vec_path}")
        vec = np.load(vec_path)
        if vec.size != entry["n_params"]:
            raise ValueError(
                f"{vec_path}: expected {entry['n_params']} parameters, got {vec.size}"
            )
        vectors[name] = vec
    return manifest, vectors
