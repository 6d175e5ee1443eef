"""Dataset ingestion, color-legend decoding, augmentation and batching.

Masks travel as small unsigned class indices; the reserved value 255 marks
pixels to ignore. On disk masks are PNGs, either color-coded through a
legend or single-channel index images (auto-detected by channel count).
Every dataset directory carries a small manifest: a key-value header (tag,
labelled flag, legend name), a ``---`` separator, then one relative image
path per line with the mask path alongside for labelled datasets.

A synthetic three-domain corpus generator stands in for real aerial data:
domain A is clean, domain B gets a fixed +0.2 brightness shift plus
Gaussian texture noise (sigma 0.05), domain C gets a hue rotation and a
contrast change and its masks are withheld from the sample interface
(stored under ``hidden_truth/`` for evaluation only).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image

from .errors import ConfigurationError, ContractError, DimensionError, LabelError

IGNORE_INDEX = 255

DEFAULT_LEGEND_NAME = "default"


@dataclass(frozen=True)
class ColorLegend:
    """Ordered (class name, RGB triple) pairs; class index = list position."""

    entries: tuple

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def names(self) -> list:
        return [name for name, _ in self.entries]

    @property
    def colors(self) -> np.ndarray:
        return np.array([rgb for _, rgb in self.entries], dtype=np.int64)

    def validate(self, tolerance: int = 0) -> None:
        colors = self.colors
        for i in range(len(colors)):
            for j in range(i + 1, len(colors)):
                if (np.abs(colors[i] - colors[j]) <= 2 * tolerance).all():
                    raise ConfigurationError(
                        f"legend colors {i} and {j} are ambiguous at tolerance {tolerance}")


DEFAULT_LEGEND = ColorLegend(entries=(
    ("Buildings", (0, 0, 255)),
    ("Trees", (0, 255, 0)),
    ("Cars", (255, 255, 0)),
    ("Low vegetation", (0, 255, 255)),
    ("Roads", (255, 255, 255)),
    ("Clutter", (255, 0, 0)),
))


@dataclass(frozen=True)
class DomainTag:
    symbol: str
    index: int


DEFAULT_TAGS = {"A": DomainTag("A", 0), "B": DomainTag("B", 1), "C": DomainTag("C", 2)}


@dataclass
class Sample:
    """One image with an optional ground-truth mask and a mandatory domain.

    ``image`` is [3,H,W] float64 in [0,1]; ``mask`` is [H,W] uint8 class
    indices (None for unlabelled datasets).
    """

    image: np.ndarray
    mask: Optional[np.ndarray]
    domain: DomainTag
    id: str


@dataclass
class DatasetSpec:
    root: Path
    legend_name: str
    tag: DomainTag
    labelled: bool
    count: int


@dataclass
class Dataset:
    spec: DatasetSpec
    samples: list


@dataclass
class Batch:
    """Stacked mixed batch. ``masks`` rows for unlabelled samples are
    filled with the ignore value."""

    images: np.ndarray    # [N,3,H,W] float64
    masks: np.ndarray     # [N,H,W] uint8
    domains: np.ndarray   # [N] int64
    ids: list
    labelled: np.ndarray  # [N] bool


# -- color mapping -------------------------------------------------------------


def color_to_index(rgb_mask: np.ndarray, legend: ColorLegend = DEFAULT_LEGEND,
                   tolerance: int = 8) -> np.ndarray:
    """Map an 8-bit [H,W,3] color mask to class indices.

    A pixel matches the first legend entry within ``tolerance`` per
    channel; unmatched pixels get the ignore value.
    """
    rgb_mask = np.asarray(rgb_mask)
    if rgb_mask.ndim != 3 or rgb_mask.shape[2] != 3:
        raise DimensionError(f"color_to_index: expected [H,W,3] image, got {rgb_mask.shape}")
    legend.validate(tolerance)
    out = np.full(rgb_mask.shape[:2], IGNORE_INDEX, dtype=np.uint8)
    pixels = rgb_mask.astype(np.int64)
    unassigned = np.ones(rgb_mask.shape[:2], dtype=bool)
    for index, (_, rgb) in enumerate(legend.entries):
        hit = (np.abs(pixels - np.array(rgb)) <= tolerance).all(axis=2) & unassigned
        out[hit] = index
        unassigned &= ~hit
    return out


def index_to_color(mask: np.ndarray, legend: ColorLegend = DEFAULT_LEGEND) -> np.ndarray:
    """Render class indices as exact legend colors; ignore pixels go black."""
    mask = np.asarray(mask)
    invalid = (mask != IGNORE_INDEX) & (mask >= len(legend))
    if invalid.any():
        raise LabelError(f"mask value {int(mask[invalid].flat[0])} outside the {len(legend)}-class legend")
    palette = np.zeros((256, 3), dtype=np.uint8)
    palette[:len(legend)] = legend.colors
    return palette[mask]


# -- PNG and manifest IO -------------------------------------------------------


def load_image(path) -> np.ndarray:
    """Read a PNG as [H,W,3] uint8 (RGB) or [H,W] uint8 (single channel)."""
    with Image.open(path) as img:
        if img.mode == "L":
            return np.asarray(img)
        return np.asarray(img.convert("RGB"))


def save_image(path, array: np.ndarray) -> None:
    Image.fromarray(np.asarray(array, dtype=np.uint8)).save(path)


def image_to_chw(rgb: np.ndarray) -> np.ndarray:
    """uint8 [H,W,3] -> float64 [3,H,W] in [0,1]."""
    return np.ascontiguousarray(rgb.astype(np.float64).transpose(2, 0, 1) / 255.0)


def chw_to_image(chw: np.ndarray) -> np.ndarray:
    """float [3,H,W] in [0,1] -> uint8 [H,W,3]."""
    return np.round(np.clip(chw, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def load_mask(path, legend: ColorLegend, tolerance: int = 8) -> np.ndarray:
    raster = load_image(path)
    if raster.ndim == 2:
        return raster.astype(np.uint8)
    return color_to_index(raster, legend, tolerance)


def write_manifest(path, spec: DatasetSpec, entries: Sequence) -> None:
    """Entries are (image_relpath,) or (image_relpath, mask_relpath)."""
    lines = [
        f"tag = {spec.tag.symbol}",
        f"labelled = {'true' if spec.labelled else 'false'}",
        f"legend = {spec.legend_name}",
        "---",
    ]
    for entry in entries:
        lines.append(" ".join(str(p) for p in entry))
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> tuple[DatasetSpec, list]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    header: dict = {}
    entries: list = []
    in_header = True
    for raw in path.read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if in_header:
            if line == "---":
                in_header = False
                continue
            if "=" not in line:
                raise ConfigurationError(f"manifest {path}: bad header line {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            header[key] = value
        else:
            entries.append(tuple(line.split()))
    for key in ("tag", "labelled", "legend"):
        if key not in header:
            raise ConfigurationError(f"manifest {path}: missing header key {key!r}")
    unknown = set(header) - {"tag", "labelled", "legend"}
    if unknown:
        raise ConfigurationError(f"manifest {path}: unknown header key {sorted(unknown)[0]!r}")
    symbol = header["tag"]
    tag = DEFAULT_TAGS.get(symbol, DomainTag(symbol, len(DEFAULT_TAGS)))
    labelled = header["labelled"].lower() == "true"
    spec = DatasetSpec(root=path.parent, legend_name=header["legend"], tag=tag,
                       labelled=labelled, count=len(entries))
    for entry in entries:
        if labelled and len(entry) != 2:
            raise ConfigurationError(f"manifest {path}: labelled entry needs image and mask paths")
        if not labelled and len(entry) != 1:
            raise ConfigurationError(f"manifest {path}: unlabelled entry takes one path")
    return spec, entries


def load_dataset(manifest_path, legend: ColorLegend = DEFAULT_LEGEND,
                 tolerance: int = 8) -> Dataset:
    spec, entries = read_manifest(manifest_path)
    samples = []
    for i, entry in enumerate(entries):
        image = image_to_chw(load_image(spec.root / entry[0]))
        mask = load_mask(spec.root / entry[1], legend, tolerance) if spec.labelled else None
        stem = Path(entry[0]).stem
        samples.append(Sample(image=image, mask=mask, domain=spec.tag,
                              id=f"{spec.tag.symbol}:{stem}"))
    return Dataset(spec=spec, samples=samples)


def load_hidden_truth(spec: DatasetSpec, legend: ColorLegend = DEFAULT_LEGEND) -> dict:
    """Read the withheld masks of a synthetic unlabelled dataset. Kept out
    of Sample/Batch on purpose; evaluation-only."""
    hidden_dir = Path(spec.root) / "hidden_truth"
    truths = {}
    for mask_path in sorted(hidden_dir.glob("*.png")):
        truths[f"{spec.tag.symbol}:{mask_path.stem}"] = load_mask(mask_path, legend)
    return truths


# -- augmentation --------------------------------------------------------------


@dataclass(frozen=True)
class AugmentPolicy:
    horizontal_flip: bool = False
    vertical_flip: bool = False
    rotate90: bool = False
    downsample_factors: tuple = ()

    @property
    def enabled(self) -> bool:
        return (self.horizontal_flip or self.vertical_flip or self.rotate90
                or bool(self.downsample_factors))


def flip_horizontal(sample: Sample) -> Sample:
    mask = None if sample.mask is None else sample.mask[:, ::-1].copy()
    return replace(sample, image=sample.image[:, :, ::-1].copy(), mask=mask)


def flip_vertical(sample: Sample) -> Sample:
    mask = None if sample.mask is None else sample.mask[::-1, :].copy()
    return replace(sample, image=sample.image[:, ::-1, :].copy(), mask=mask)


def rotate90(sample: Sample, quarter_turns: int = 1) -> Sample:
    h, w = sample.image.shape[1:]
    if h != w and quarter_turns % 2:
        raise ConfigurationError("rotate90 on a non-square sample would change its size")
    image = np.ascontiguousarray(np.rot90(sample.image, quarter_turns, axes=(1, 2)))
    mask = None
    if sample.mask is not None:
        mask = np.ascontiguousarray(np.rot90(sample.mask, quarter_turns, axes=(0, 1)))
    return replace(sample, image=image, mask=mask)


def downsample_upsample(sample: Sample, factor: int) -> Sample:
    """Coarsen to 1/factor and blow back up: area averaging for the image,
    nearest for the mask, nearest upsampling for both."""
    c, h, w = sample.image.shape
    if h % factor or w % factor:
        raise DimensionError(f"downsample factor {factor} does not divide {h}x{w}")
    small = sample.image.reshape(c, h // factor, factor, w // factor, factor).mean(axis=(2, 4))
    image = np.repeat(np.repeat(small, factor, axis=1), factor, axis=2)
    mask = None
    if sample.mask is not None:
        small_mask = sample.mask[::factor, ::factor]
        mask = np.repeat(np.repeat(small_mask, factor, axis=0), factor, axis=1)
    return replace(sample, image=np.ascontiguousarray(image), mask=mask)


def augment(sample: Sample, seed: int, policy: AugmentPolicy) -> Sample:
    """Apply the enabled transforms with seeded coin flips; image and mask
    always receive identical geometry."""
    if not policy.enabled:
        return sample
    rng = np.random.default_rng(seed)
    out = sample
    if policy.horizontal_flip and rng.random() < 0.5:
        out = flip_horizontal(out)
    if policy.vertical_flip and rng.random() < 0.5:
        out = flip_vertical(out)
    if policy.rotate90:
        turns = int(rng.integers(0, 4))
        if turns:
            out = rotate90(out, turns)
    if policy.downsample_factors:
        choices = (None,) + tuple(policy.downsample_factors)
        factor = choices[int(rng.integers(0, len(choices)))]
        if factor:
            out = downsample_upsample(out, int(factor))
    return out


# -- synthetic three-domain corpus ---------------------------------------------

# image-space base colors are dimmed so domain B's +0.2 shift stays in gamut
_BASE_DIM = 0.55
_BASE_LIFT = 0.15
_B_BRIGHTNESS = 0.2
_B_NOISE_SIGMA = 0.05
_C_HUE_DEGREES = 60.0
_C_CONTRAST = 1.25


def _scene(rng: np.random.Generator, size: tuple, num_classes: int,
           legend: ColorLegend) -> tuple[np.ndarray, np.ndarray]:
    """One random scene: rectangles, discs and stripes over a background
    class, each painted with its class-correlated base color."""
    h, w = size
    mask = np.full((h, w), int(rng.integers(num_classes)), dtype=np.uint8)
    for _ in range(int(rng.integers(3, 7))):
        cls = int(rng.integers(num_classes))
        kind = int(rng.integers(3))
        if kind == 0:  # rectangle
            rh = int(rng.integers(max(2, h // 8), h // 2 + 1))
            rw = int(rng.integers(max(2, w // 8), w // 2 + 1))
            y = int(rng.integers(0, h - rh + 1))
            x = int(rng.integers(0, w - rw + 1))
            mask[y:y + rh, x:x + rw] = cls
        elif kind == 1:  # disc
            r = int(rng.integers(max(2, h // 10), max(3, h // 4)))
            cy = int(rng.integers(r, h - r + 1))
            cx = int(rng.integers(r, w - r + 1))
            yy, xx = np.ogrid[:h, :w]
            mask[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = cls
        else:  # stripe
            thickness = int(rng.integers(2, max(3, h // 6)))
            if rng.random() < 0.5:
                y = int(rng.integers(0, h - thickness + 1))
                mask[y:y + thickness, :] = cls
            else:
                x = int(rng.integers(0, w - thickness + 1))
                mask[:, x:x + thickness] = cls
    base = _BASE_LIFT + _BASE_DIM * legend.colors.astype(np.float64) / 255.0
    image = base[mask] + rng.normal(0.0, 0.03, size=(h, w, 3))
    return mask, np.clip(image, 0.0, 1.0)


def _hue_rotation_matrix(degrees: float) -> np.ndarray:
    theta = np.deg2rad(degrees)
    c, s = np.cos(theta), np.sin(theta)
    return np.array([
        [0.213 + 0.787 * c - 0.213 * s, 0.715 - 0.715 * c - 0.715 * s, 0.072 - 0.072 * c + 0.928 * s],
        [0.213 - 0.213 * c + 0.143 * s, 0.715 + 0.285 * c + 0.140 * s, 0.072 - 0.072 * c - 0.283 * s],
        [0.213 - 0.213 * c - 0.787 * s, 0.715 - 0.715 * c + 0.715 * s, 0.072 + 0.928 * c + 0.072 * s],
    ])


def _shift_domain(image: np.ndarray, symbol: str, rng: np.random.Generator) -> np.ndarray:
    if symbol == "A":
        return image
    if symbol == "B":
        noisy = image + _B_BRIGHTNESS + rng.normal(0.0, _B_NOISE_SIGMA, size=image.shape)
        return np.clip(noisy, 0.0, 1.0)
    if symbol == "C":
        rotated = image @ _hue_rotation_matrix(_C_HUE_DEGREES).T
        return np.clip(0.5 + _C_CONTRAST * (rotated - 0.5), 0.0, 1.0)
    raise ConfigurationError(f"no synthetic shift defined for domain {symbol!r}")


def synth_generate(seed: int, n_per_domain: int, size: tuple, num_classes: int,
                   out_dir) -> tuple[DatasetSpec, DatasetSpec, DatasetSpec]:
    """Write the synthetic corpus: labelled domains A and B, unlabelled
    domain C whose masks go to ``domain_c/hidden_truth/`` only. Returns the
    three dataset specs; byte-identical files for identical arguments."""
    h, w = size
    if h % 8 or w % 8:
        raise ConfigurationError(f"synthetic size {h}x{w} must be divisible by 8")
    if n_per_domain < 1:
        raise ConfigurationError("n_per_domain must be >= 1")
    if not 2 <= num_classes <= len(DEFAULT_LEGEND):
        raise ConfigurationError(
            f"num_classes must be in [2, {len(DEFAULT_LEGEND)}], got {num_classes}")
    out_dir = Path(out_dir)
    specs = []
    for symbol in ("A", "B", "C"):
        tag = DEFAULT_TAGS[symbol]
        labelled = symbol != "C"
        root = out_dir / f"domain_{symbol.lower()}"
        (root / "images").mkdir(parents=True, exist_ok=True)
        mask_dir = root / ("masks" if labelled else "hidden_truth")
        mask_dir.mkdir(parents=True, exist_ok=True)
        entries = []
        for i in range(n_per_domain):
            rng = np.random.default_rng(np.random.SeedSequence([seed, tag.index, i]))
            mask, image = _scene(rng, (h, w), num_classes, DEFAULT_LEGEND)
            image = _shift_domain(image, symbol, rng)
            name = f"{i:04d}.png"
            save_image(root / "images" / name, np.round(image * 255.0).astype(np.uint8))
            save_image(mask_dir / name, index_to_color(mask, DEFAULT_LEGEND))
            entries.append((f"images/{name}", f"masks/{name}") if labelled
                           else (f"images/{name}",))
        spec = DatasetSpec(root=root, legend_name=DEFAULT_LEGEND_NAME, tag=tag,
                           labelled=labelled, count=n_per_domain)
        write_manifest(root / "manifest.txt", spec, entries)
        specs.append(spec)
    return tuple(specs)


# -- batch mixing ---------------------------------------------------------------


def _stack_batch(samples: Sequence[Sample]) -> Batch:
    images = np.stack([s.image for s in samples])
    h, w = images.shape[2:]
    masks = np.full((len(samples), h, w), IGNORE_INDEX, dtype=np.uint8)
    labelled = np.zeros(len(samples), dtype=bool)
    for i, s in enumerate(samples):
        if s.mask is not None:
            masks[i] = s.mask
            labelled[i] = True
    domains = np.array([s.domain.index for s in samples], dtype=np.int64)
    return Batch(images=images, masks=masks, domains=domains,
                 ids=[s.id for s in samples], labelled=labelled)


def make_batches(datasets: Sequence[Dataset], batch_size: int, labelled_fraction: float,
                 seed: int, augment_policy: Optional[AugmentPolicy] = None) -> list:
    """One epoch of mixed batches.

    Each batch draws round(batch_size * labelled_fraction) labelled samples
    from a seeded permutation of the labelled pool (each labelled sample
    appears once per epoch) and fills the remainder from a seeded
    permutation over the unlabelled pool. The same (datasets, seed) always
    produces the same sample id sequence.
    """
    if not 0.0 < labelled_fraction <= 1.0:
        raise ConfigurationError(f"labelled_fraction must be in (0, 1], got {labelled_fraction}")
    if batch_size < 1:
        raise ConfigurationError(f"batch_size must be >= 1, got {batch_size}")
    labelled_pool = [s for d in datasets if d.spec.labelled for s in d.samples]
    unlabelled_pool = [s for d in datasets if not d.spec.labelled for s in d.samples]
    per_batch_labelled = round(batch_size * labelled_fraction)
    per_batch_unlabelled = batch_size - per_batch_labelled
    if per_batch_labelled == 0:
        raise ConfigurationError("labelled_fraction rounds to zero labelled samples per batch")
    if not labelled_pool:
        raise ConfigurationError("no labelled dataset available")
    if per_batch_unlabelled > 0 and not unlabelled_pool:
        raise ConfigurationError("batches request unlabelled samples but no unlabelled dataset exists")

    rng = np.random.default_rng(np.random.SeedSequence([seed, len(labelled_pool)]))
    labelled_order = rng.permutation(len(labelled_pool))
    unlabelled_order = rng.permutation(len(unlabelled_pool)) if unlabelled_pool else np.array([], dtype=int)

    batches = []
    cursor = 0
    draw = 0
    for start in range(0, len(labelled_order), per_batch_labelled):
        chunk = labelled_order[start:start + per_batch_labelled]
        n_unlab = round(len(chunk) * per_batch_unlabelled / per_batch_labelled)
        chosen = [labelled_pool[i] for i in chunk]
        for _ in range(n_unlab):
            chosen.append(unlabelled_pool[unlabelled_order[cursor % len(unlabelled_order)]])
            cursor += 1
        if augment_policy is not None and augment_policy.enabled:
            chosen = [augment(s, int(np.random.SeedSequence([seed, 7919, draw + i]).generate_state(1)[0]), augment_policy)
                      for i, s in enumerate(chosen)]
        draw += len(chosen)
        batches.append(_stack_batch(chosen))
    return batches
