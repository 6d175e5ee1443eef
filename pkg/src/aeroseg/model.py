"""Two-headed segmentation network over the autodiff engine.

Encoder: four conv+relu stages; the spatial resolution halves (block
averaging) after stages 1-3, so stage outputs live at full, 1/2, 1/4 and
1/8 resolution. Decoder: each stage output is projected by a 1x1 conv,
upsampled back to full resolution, concatenated and fused by a final 1x1
conv into per-pixel class logits. A second head pools the deepest stage
into a feature vector and maps it to per-sample domain logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .tensor import Tensor


@dataclass(frozen=True)
class ArchConfig:
    """Network hyperparameters. Spatial size must be divisible by 8 so the
    three halvings and the matching upsamplings are exact."""

    in_channels: int = 3
    num_classes: int = 6
    num_domains: int = 3
    stage_widths: tuple = (8, 16, 32, 64)
    input_size: tuple = (32, 32)

    def validate(self) -> None:
        if self.in_channels < 1:
            raise ConfigurationError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.num_domains < 2:
            raise ConfigurationError(f"num_domains must be >= 2, got {self.num_domains}")
        if len(self.stage_widths) != 4 or any(w < 1 for w in self.stage_widths):
            raise ConfigurationError(f"stage_widths must be 4 positive ints, got {self.stage_widths}")
        h, w = self.input_size
        if h % 8 or w % 8 or h < 8 or w < 8:
            raise ConfigurationError(f"input_size {self.input_size} must be divisible by 8")

    @property
    def proj_width(self) -> int:
        # decoder projection width shared by all four stage taps
        return self.stage_widths[0]


@dataclass
class ModelParams:
    """Named parameter tensors plus the architecture and init seed.

    The name set is closed: ``forward`` consumes every entry exactly once.
    """

    arch: ArchConfig
    seed: int
    tensors: dict = field(default_factory=dict)

    def named(self):
        return self.tensors.items()

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.grad = None


@dataclass
class ModelOutput:
    seg_logits: Tensor      # [N, K, H, W]
    domain_logits: Tensor   # [N, M]
    latent: Tensor          # [N, C_bottleneck] pooled deepest features


def _uniform_kernel(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = float(np.sqrt(1.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape)


def init_params(arch: ArchConfig, seed: int) -> ModelParams:
    """Deterministic initialization: kernels uniform in +-sqrt(1/fan_in),
    biases zero. The same (arch, seed) always yields bit-identical maps."""
    arch.validate()
    rng = np.random.default_rng(seed)
    params = ModelParams(arch=arch, seed=seed)

    def add_conv(name: str, c_in: int, c_out: int, k: int) -> None:
        params.tensors[f"{name}.kernel"] = Tensor(
            _uniform_kernel(rng, (c_out, c_in, k, k), c_in * k * k), requires_grad=True)
        params.tensors[f"{name}.bias"] = Tensor(np.zeros(c_out), requires_grad=True)

    widths = arch.stage_widths
    c_prev = arch.in_channels
    for i, width in enumerate(widths, start=1):
        add_conv(f"enc.stage{i}", c_prev, width, 3)
        c_prev = width
    for i, width in enumerate(widths, start=1):
        add_conv(f"dec.proj{i}", width, arch.proj_width, 1)
    add_conv("dec.fuse", 4 * arch.proj_width, arch.num_classes, 1)
    params.tensors["dom.head.weight"] = Tensor(
        _uniform_kernel(rng, (arch.num_domains, widths[3]), widths[3]), requires_grad=True)
    params.tensors["dom.head.bias"] = Tensor(np.zeros(arch.num_domains), requires_grad=True)
    return params


def forward(params: ModelParams, images, *, domain_grad_reversed: bool = False) -> ModelOutput:
    """Run the network on a [N,3,H,W] batch.

    ``domain_grad_reversed`` inserts a gradient-reversal step between the
    pooled features and the domain head, so optimizing a domain
    classification loss pushes the shared features the opposite way.
    """
    arch = params.arch
    x = images if isinstance(images, Tensor) else Tensor(images)
    if x.ndim != 4 or x.shape[1] != arch.in_channels:
        raise DimensionError(f"forward: expected [N,{arch.in_channels},H,W], got {x.shape}")
    if (x.shape[2], x.shape[3]) != tuple(arch.input_size):
        raise DimensionError(
            f"forward: input size {x.shape[2]}x{x.shape[3]} does not match "
            f"configured {arch.input_size[0]}x{arch.input_size[1]}")

    p = params.tensors
    stages = []
    h = x
    for i in range(1, 5):
        h = T.relu(T.conv2d(h, p[f"enc.stage{i}.kernel"], p[f"enc.stage{i}.bias"], padding=1))
        stages.append(h)
        if i < 4:
            h = T.downsample_avg(h, 2)

    fused = []
    for i, feat in enumerate(stages, start=1):
        proj = T.conv2d(feat, p[f"dec.proj{i}.kernel"], p[f"dec.proj{i}.bias"])
        factor = 2 ** (i - 1)
        fused.append(T.upsample_nearest(proj, factor) if factor > 1 else proj)
    seg_logits = T.conv2d(T.concat_channels(fused), p["dec.fuse.kernel"], p["dec.fuse.bias"])

    latent = T.global_average_pool(stages[3])
    head_in = T.grad_reverse(latent) if domain_grad_reversed else latent
    domain_logits = T.linear(head_in, p["dom.head.weight"], p["dom.head.bias"])
    return ModelOutput(seg_logits=seg_logits, domain_logits=domain_logits, latent=latent)


def predict_mask(output: ModelOutput) -> np.ndarray:
    """Per-pixel argmax over class logits; ties go to the lowest index."""
    return np.argmax(output.seg_logits.data, axis=1).astype(np.int64)
