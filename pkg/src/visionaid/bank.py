"""Registry of frozen feature extractors and the shared preprocessing path.

Every extractor is an ``nn.Module`` whose ``forward`` maps a preprocessed
image batch to a list of feature tensors, one per declared output shape.
Registration freezes the module (``requires_grad=False``, eval mode) and
records a content checksum so training code can prove it never moved.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import torch
import torch.nn.functional as F
from torch import nn

HEAD_KINDS = ("single_scale", "multi_scale")
MODEL_DIR_ENV = "VISIONAID_MODEL_DIR"


class BankError(Exception):
    pass


class RegistrationError(BankError):
    pass


class ValidationError(BankError):
    pass


@dataclass(frozen=True)
class FeatureExtractorSpec:
    model_id: str
    input_resolution: int
    input_channels: int = 3
    output_shapes: tuple[tuple[int, ...], ...] = ()
    normalization: tuple[tuple[float, ...], tuple[float, ...]] = ((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))
    tap_points: tuple[str, ...] = ()
    head_kind: str = "single_scale"

    def __post_init__(self):
        # normalise list inputs (e.g. from JSON) into hashable tuples
        object.__setattr__(self, "output_shapes", tuple(tuple(int(d) for d in s) for s in self.output_shapes))
        mean, std = self.normalization
        object.__setattr__(self, "normalization", (tuple(float(m) for m in mean), tuple(float(s) for s in std)))
        taps = tuple(self.tap_points) or tuple(f"out{i}" for i in range(len(self.output_shapes)))
        object.__setattr__(self, "tap_points", taps)
        self.validate()

    @property
    def spatial_shapes(self) -> list[tuple[int, int, int]]:
        return [s for s in self.output_shapes if len(s) == 3]

    @property
    def token_shapes(self) -> list[tuple[int]]:
        return [s for s in self.output_shapes if len(s) == 1]

    def validate(self) -> None:
        if not self.model_id:
            raise ValidationError("model_id must be a non-empty string")
        if self.input_resolution < 1 or self.input_channels < 1:
            raise ValidationError(f"{self.model_id}: resolution and channels must be positive")
        if not self.output_shapes:
            raise ValidationError(f"{self.model_id}: output_shapes must be non-empty")
        for s in self.output_shapes:
            if len(s) not in (1, 3) or any(d < 1 for d in s):
                raise ValidationError(f"{self.model_id}: bad output shape {s}")
        if len(self.tap_points) != len(self.output_shapes):
            raise ValidationError(f"{self.model_id}: tap_points must match output_shapes")
        mean, std = self.normalization
        if len(mean) != self.input_channels or len(std) != self.input_channels:
            raise ValidationError(f"{self.model_id}: normalization needs one mean/std per channel")
        if any(s <= 0 for s in std):
            raise ValidationError(f"{self.model_id}: normalization std must be positive")
        if self.head_kind not in HEAD_KINDS:
            raise ValidationError(f"{self.model_id}: unknown head_kind {self.head_kind!r}")
        n_spatial, n_token = len(self.spatial_shapes), len(self.token_shapes)
        if self.head_kind == "single_scale" and (n_spatial != 1 or n_token != 0):
            raise ValidationError(f"{self.model_id}: single_scale needs exactly one spatial output")
        if self.head_kind == "multi_scale" and (n_spatial < 2 or n_token != 1):
            raise ValidationError(
                f"{self.model_id}: multi_scale needs >= 2 spatial outputs and exactly one token output")

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "input_resolution": self.input_resolution,
            "input_channels": self.input_channels,
            "normalization": {"mean": list(self.normalization[0]), "std": list(self.normalization[1])},
            "output_shapes": [list(s) for s in self.output_shapes],
            "tap_points": list(self.tap_points),
            "head_kind": self.head_kind,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureExtractorSpec":
        norm = d.get("normalization")
        kwargs = {k: d[k] for k in ("model_id", "input_resolution", "input_channels", "output_shapes",
                                    "tap_points", "head_kind") if k in d}
        if norm is not None:
            kwargs["normalization"] = (norm["mean"], norm["std"])
        return cls(**kwargs)


@dataclass
class FeatureOutput:
    model_id: str
    features: list[torch.Tensor]
    batch_size: int

    def __post_init__(self):
        for f in self.features:
            if f.shape[0] != self.batch_size:
                raise ValidationError(f"{self.model_id}: feature batch {f.shape[0]} != {self.batch_size}")
            if not torch.isfinite(f).all():
                raise ValidationError(f"{self.model_id}: non-finite features")

    def flatten(self) -> torch.Tensor:
        """Concatenate every declared output into one (batch, dim) matrix."""
        return torch.cat([f.reshape(self.batch_size, -1) for f in self.features], dim=1)


def weights_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        t = t.detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


@dataclass
class BankEntry:
    spec: FeatureExtractorSpec
    module: nn.Module
    checksum: str
    builder: str | None = None
    builder_kwargs: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# preprocessing


def resize(x: torch.Tensor, size: int) -> torch.Tensor:
    """Area-average when shrinking, bilinear when enlarging; both pass gradients."""
    h, w = x.shape[-2:]
    if (h, w) == (size, size):
        return x
    if h >= size and w >= size:
        return F.interpolate(x, size=(size, size), mode="area")
    return F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)


def preprocess(images: torch.Tensor, spec: FeatureExtractorSpec) -> torch.Tensor:
    """Map a [-1, 1] image batch onto the extractor's resolution and normalization."""
    if images.dim() != 4:
        raise ValidationError(f"expected a 4-D image batch, got shape {tuple(images.shape)}")
    if not torch.isfinite(images).all():
        raise ValidationError("non-finite values in image batch")
    c = images.shape[1]
    if c != spec.input_channels:
        if c == 1 and spec.input_channels == 3:
            images = images.expand(-1, 3, -1, -1)
        else:
            raise ValidationError(f"{spec.model_id}: got {c} channels, extractor expects {spec.input_channels}")
    x = resize(images, spec.input_resolution)
    x = (x + 1) / 2
    mean, std = spec.normalization
    if any(m != 0.0 for m in mean) or any(s != 1.0 for s in std):
        m = torch.tensor(mean, dtype=x.dtype, device=x.device).view(1, -1, 1, 1)
        s = torch.tensor(std, dtype=x.dtype, device=x.device).view(1, -1, 1, 1)
        x = (x - m) / s
    return x


# ---------------------------------------------------------------------------
# desk-scale surrogate extractors


class ZeroExtractor(nn.Module):
    def __init__(self, output_shapes: Sequence[Sequence[int]]):
        super().__init__()
        self.output_shapes = [tuple(s) for s in output_shapes]

    def forward(self, x):
        return [x.new_zeros((x.shape[0], *s)) for s in self.output_shapes]


class PoolExtractor(nn.Module):
    """Features are the input itself, area-pooled to ``out_size``."""

    def __init__(self, out_size: int, channels: Sequence[int] | None = None):
        super().__init__()
        self.out_size = out_size
        self.channels = list(channels) if channels is not None else None

    def forward(self, x):
        if self.channels is not None:
            x = x[:, self.channels]
        return [F.adaptive_avg_pool2d(x, self.out_size)]


class EdgeExtractor(nn.Module):
    """Fixed oriented-derivative filter bank on luminance, rectified and pooled."""

    def __init__(self, n_orientations: int = 8, out_size: int = 8, ksize: int = 5):
        super().__init__()
        r = ksize // 2
        yy, xx = torch.meshgrid(torch.arange(-r, r + 1.0), torch.arange(-r, r + 1.0), indexing="ij")
        envelope = torch.exp(-(xx ** 2 + yy ** 2) / (2 * (r / 2) ** 2))
        kernels = []
        for i in range(n_orientations):
            theta = math.pi * i / n_orientations
            u = xx * math.cos(theta) + yy * math.sin(theta)
            for phase in (torch.cos, torch.sin):
                k = envelope * phase(math.pi * u / r)
                k = k - k.mean()
                kernels.append(k / k.abs().sum())
        self.register_buffer("kernels", torch.stack(kernels).unsqueeze(1))
        self.out_size = out_size

    def forward(self, x):
        lum = x.mean(dim=1, keepdim=True)
        resp = F.conv2d(lum, self.kernels.to(x.dtype), padding=self.kernels.shape[-1] // 2)
        return [F.adaptive_avg_pool2d(resp.abs(), self.out_size)]


def _seeded_init_(module: nn.Module, seed: int) -> None:
    g = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=g) * math.sqrt(2.0 / fan_in))
                if m.bias is not None:
                    m.bias.copy_(torch.randn(m.bias.shape, generator=g) * 0.1)


class RandomConvExtractor(nn.Module):
    """Seeded random conv net; stride-2 stages, leaky-ReLU.

    ``taps`` selects which stage outputs are returned (0-based), each
    collapsed to 1x1 when ``global_pool`` is set.  With
    ``token_dim`` set, a global-average-pooled projection of the last stage
    is appended as a token feature.
    """

    def __init__(self, in_channels: int = 3, widths: Sequence[int] = (16, 32), taps: Sequence[int] | None = None,
                 token_dim: int | None = None, seed: int = 0, global_pool: bool = False):
        super().__init__()
        chans = [in_channels, *widths]
        self.stages = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1) for i in range(len(widths)))
        self.taps = list(taps) if taps is not None else [len(widths) - 1]
        self.global_pool = global_pool
        self.token = nn.Linear(widths[-1], token_dim) if token_dim else None
        _seeded_init_(self, seed)

    def forward(self, x):
        outs = []
        for i, stage in enumerate(self.stages):
            x = F.leaky_relu(stage(x), 0.2)
            if i in self.taps:
                outs.append(x.mean(dim=(2, 3), keepdim=True) if self.global_pool else x)
        if self.token is not None:
            outs.append(self.token(x.mean(dim=(2, 3))))
        return outs


SURROGATE_BUILDERS: dict[str, Callable[..., nn.Module]] = {
    "zero": ZeroExtractor,
    "pool": PoolExtractor,
    "edges": EdgeExtractor,
    "random_conv": RandomConvExtractor,
}


# ---------------------------------------------------------------------------
# the bank


class ModelBank:
    def __init__(self):
        self._entries: dict[str, BankEntry] = {}
        self._lock = threading.Lock()

    def __contains__(self, model_id):
        return model_id in self._entries

    def __len__(self):
        return len(self._entries)

    def list_models(self) -> list[str]:
        return list(self._entries)

    def entry(self, model_id: str) -> BankEntry:
        try:
            return self._entries[model_id]
        except KeyError:
            raise BankError(f"unknown model_id {model_id!r}") from None

    def spec(self, model_id: str) -> FeatureExtractorSpec:
        return self.entry(model_id).spec

    def register_model(self, spec: FeatureExtractorSpec, weights: nn.Module, builder: str | None = None,
                       builder_kwargs: dict | None = None) -> str:
        spec.validate()
        weights.eval()
        for p in weights.parameters():
            p.requires_grad_(False)
        _check_output_shapes(spec, weights)
        with self._lock:
            if spec.model_id in self._entries:
                raise RegistrationError(f"model_id {spec.model_id!r} already registered")
            self._entries[spec.model_id] = BankEntry(spec, weights, weights_checksum(weights), builder,
                                                     dict(builder_kwargs or {}))
        return spec.model_id

    def register_surrogate(self, spec: FeatureExtractorSpec, builder: str, **kwargs) -> str:
        module = SURROGATE_BUILDERS[builder](**kwargs)
        return self.register_model(spec, module, builder=builder, builder_kwargs=kwargs)

    def extract_features(self, model_id: str, images: torch.Tensor) -> FeatureOutput:
        entry = self.entry(model_id)
        spec = entry.spec
        expected = (spec.input_channels, spec.input_resolution, spec.input_resolution)
        if images.dim() != 4 or tuple(images.shape[1:]) != expected:
            raise ValidationError(f"{model_id}: expected images (*, {expected}), got {tuple(images.shape)}")
        module = entry.module
        param_dtype = next(module.parameters(), images).dtype
        if param_dtype != images.dtype:
            raise ValidationError(f"{model_id}: extractor is {param_dtype}, images are {images.dtype}")
        feats = list(module(images))
        for f, shape in zip(feats, spec.output_shapes):
            if tuple(f.shape[1:]) != shape:
                raise ValidationError(f"{model_id}: feature shape {tuple(f.shape[1:])} != declared {shape}")
        return FeatureOutput(model_id, feats, images.shape[0])

    def features(self, model_id: str, images: torch.Tensor) -> FeatureOutput:
        """preprocess + extract_features in one call."""
        return self.extract_features(model_id, preprocess(images, self.spec(model_id)))

    def checksums(self) -> dict[str, str]:
        return {mid: weights_checksum(e.module) for mid, e in self._entries.items()}

    # -- manifest -----------------------------------------------------------

    def save_manifest(self, path: str | os.PathLike, model_dir: str | os.PathLike | None = None) -> None:
        model_dir = Path(model_dir or os.environ.get(MODEL_DIR_ENV) or Path(path).parent / "weights")
        model_dir.mkdir(parents=True, exist_ok=True)
        models = []
        for mid, e in self._entries.items():
            digest = weights_checksum(e.module)
            torch.save(e.module.state_dict(), model_dir / f"{digest}.pt")
            models.append({**e.spec.to_dict(), "builder": e.builder, "builder_kwargs": e.builder_kwargs,
                           "weights_hash": digest})
        Path(path).write_text(json.dumps({"version": 1, "models": models}, indent=2) + "\n")

    @classmethod
    def from_manifest(cls, path: str | os.PathLike, model_dir: str | os.PathLike | None = None) -> "ModelBank":
        doc = json.loads(Path(path).read_text())
        model_dir = Path(model_dir or os.environ.get(MODEL_DIR_ENV) or Path(path).parent / "weights")
        bank = cls()
        for m in doc["models"]:
            spec = FeatureExtractorSpec.from_dict(m)
            builder = m.get("builder")
            if builder not in SURROGATE_BUILDERS:
                raise RegistrationError(f"{spec.model_id}: no builder {builder!r} available to rebuild weights")
            module = SURROGATE_BUILDERS[builder](**m.get("builder_kwargs", {}))
            blob = model_dir / f"{m['weights_hash']}.pt"
            if blob.exists():
                module.load_state_dict(torch.load(blob, weights_only=True))
            if weights_checksum(module) != m["weights_hash"]:
                raise ValidationError(f"{spec.model_id}: weights do not match manifest hash")
            bank.register_model(spec, module, builder=builder, builder_kwargs=m.get("builder_kwargs", {}))
        return bank


def _check_output_shapes(spec: FeatureExtractorSpec, module: nn.Module) -> None:
    probe = torch.zeros(2, spec.input_channels, spec.input_resolution, spec.input_resolution)
    dtype = next(module.parameters(), probe).dtype
    with torch.no_grad():
        outs = list(module(probe.to(dtype)))
    shapes = [tuple(o.shape[1:]) for o in outs]
    if shapes != list(spec.output_shapes):
        raise ValidationError(f"{spec.model_id}: module produces {shapes}, spec declares {list(spec.output_shapes)}")


def desk_bank(resolution: int = 32, metric_id: str | None = "metric_conv") -> ModelBank:
    """Small bank of surrogate extractors used by the desk-scale experiments.

    Three single-scale extractors, one multi-scale extractor, and (unless
    ``metric_id`` is None) a separately seeded conv net reserved for metrics.
    """
    bank = ModelBank()
    r = resolution
    bank.register_surrogate(
        FeatureExtractorSpec("edges16", r, 3, [(16, 8, 8)], tap_points=["gabor_pool"]), "edges")
    bank.register_surrogate(
        FeatureExtractorSpec("pool8", r, 3, [(3, 8, 8)], tap_points=["area_pool"]), "pool", out_size=8)
    bank.register_surrogate(
        FeatureExtractorSpec("conv_a", r, 3, [(32, r // 4, r // 4)], tap_points=["stage1"],
                             normalization=((0.5, 0.5, 0.5), (0.25, 0.25, 0.25))),
        "random_conv", widths=[16, 32], seed=11)
    bank.register_surrogate(
        FeatureExtractorSpec("conv_ms", r, 3, [(16, r // 2, r // 2), (32, r // 4, r // 4), (64,)],
                             tap_points=["stage0", "stage1", "token"], head_kind="multi_scale",
                             normalization=((0.5, 0.5, 0.5), (0.25, 0.25, 0.25))),
        "random_conv", widths=[16, 32], taps=[0, 1], token_dim=64, seed=23)
    if metric_id:
        bank.register_surrogate(
            FeatureExtractorSpec(metric_id, r, 3, [(64, 1, 1)], tap_points=["gap"],
                                 normalization=((0.5, 0.5, 0.5), (0.25, 0.25, 0.25))),
            "random_conv", widths=[32, 64, 64], seed=1234, global_pool=True)
    return bank
