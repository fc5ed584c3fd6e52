"""Dataset ingestion, normalization, label splits and synthetic data.

Images are stored channel-first as ``float32`` arrays of shape ``(C, H, W)``;
masks are ``int64`` arrays of shape ``(H, W)``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".tif", ".tiff")


class DataError(ValueError):
    """Raised for malformed or missing dataset content."""


class MaskAccessError(RuntimeError):
    """Raised when a withheld (unlabeled) mask is read by training code."""


class ImageSample:
    """One 2D image with an optional mask.

    A sample whose mask has been withheld still carries the ground truth in
    :attr:`diagnostic_mask` for metric diagnostics, but reading :attr:`mask`
    raises :class:`MaskAccessError`.
    """

    __slots__ = ("image", "_mask", "id", "split", "withheld")

    def __init__(self, image, mask=None, id="", split="train", withheld=False):
        image = np.asarray(image, dtype=np.float32)
        if image.ndim == 2:
            image = image[None]
        if image.ndim != 3:
            raise DataError(f"sample {id!r}: image must be 2D or (C, H, W), got shape {image.shape}")
        if mask is not None:
            mask = np.asarray(mask, dtype=np.int64)
            if mask.shape != image.shape[1:]:
                raise DataError(
                    f"sample {id!r}: mask shape {mask.shape} does not match image {image.shape[1:]}"
                )
        if split not in ("train", "val", "test"):
            raise DataError(f"unknown split {split!r}")
        self.image = image
        self._mask = mask
        self.id = str(id)
        self.split = split
        self.withheld = bool(withheld)

    @property
    def mask(self):
        if self.withheld:
            raise MaskAccessError(f"mask of unlabeled sample {self.id!r} is withheld from training")
        return self._mask

    @property
    def diagnostic_mask(self):
        return self._mask

    @property
    def has_mask(self) -> bool:
        return self._mask is not None and not self.withheld

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape[1], self.image.shape[2]

    def with_image(self, image) -> "ImageSample":
        return ImageSample(image, self._mask, self.id, self.split, self.withheld)

    def withhold(self) -> "ImageSample":
        return ImageSample(self.image, self._mask, self.id, self.split, True)

    def with_split(self, split: str) -> "ImageSample":
        return ImageSample(self.image, self._mask, self.id, split, self.withheld)

    def __repr__(self):
        return (
            f"ImageSample(id={self.id!r}, shape={self.image.shape}, split={self.split!r}, "
            f"mask={'withheld' if self.withheld else self._mask is not None})"
        )


@dataclass(frozen=True)
class DatasetSpec:
    """Static description of a dataset.

    ``class_remap`` maps original mask ids to training ids. ``None`` means the
    mask is binarized: 0 stays background and every nonzero id (e.g. cell
    instance labels) becomes foreground.
    """

    name: str
    class_count: int
    crop_size_semi: tuple[int, int]
    crop_size_self: tuple[int, int]
    class_remap: Mapping[int, int] | None = None
    channels: int = 1

    def __post_init__(self):
        if self.class_count < 2:
            raise ValueError("class_count must be >= 2")
        if self.class_remap is not None:
            bad = [v for v in self.class_remap.values() if not 0 <= v < self.class_count]
            if bad:
                raise ValueError(f"class_remap targets {bad} outside [0, {self.class_count})")

    def crop_size(self, mode: str) -> tuple[int, int]:
        if mode == "semi":
            return self.crop_size_semi
        if mode == "self":
            return self.crop_size_self
        raise ValueError(f"mode must be 'semi' or 'self', got {mode!r}")

    def remap(self, mask: np.ndarray) -> np.ndarray:
        mask = np.asarray(mask).astype(np.int64)
        if self.class_remap is None:
            return (mask != 0).astype(np.int64)
        lut_size = max(self.class_remap) + 1
        found = np.unique(mask)
        unknown = [int(v) for v in found if v < 0 or v >= lut_size or int(v) not in self.class_remap]
        if unknown:
            raise DataError(f"unknown class ids {unknown} in mask for dataset {self.name}")
        lut = np.zeros(lut_size, dtype=np.int64)
        for src, dst in self.class_remap.items():
            lut[src] = dst
        return lut[mask]


BIGBRAIN_REMAP = {c: 0 for c in range(9)} | {2: 1, 3: 2, 5: 3}

DATASETS: dict[str, DatasetSpec] = {
    "PhC": DatasetSpec("PhC", 2, (512, 512), (128, 128)),
    "FluoGFP": DatasetSpec("FluoGFP", 2, (512, 512), (128, 128)),
    "FluoHoechst": DatasetSpec("FluoHoechst", 2, (512, 512), (128, 128)),
    "BigBrain": DatasetSpec("BigBrain", 4, (600, 600), (256, 256), BIGBRAIN_REMAP),
}


def get_dataset_spec(name: str) -> DatasetSpec:
    try:
        return DATASETS[name]
    except KeyError:
        raise KeyError(f"unknown dataset {name!r}; known: {sorted(DATASETS)}") from None


def center_crop(array: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Center-crop the trailing two axes of ``array`` to ``size``."""
    h, w = array.shape[-2:]
    ch, cw = size
    if h < ch or w < cw:
        raise DataError(f"image of size {h}x{w} is smaller than crop {ch}x{cw}")
    top = (h - ch) // 2
    left = (w - cw) // 2
    return array[..., top : top + ch, left : left + cw]


def _read_image(path: Path) -> np.ndarray:
    try:
        if path.suffix.lower() in (".tif", ".tiff"):
            import tifffile

            data = tifffile.imread(path)
        else:
            from PIL import Image

            with Image.open(path) as im:
                data = np.asarray(im)
    except Exception as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return np.asarray(data)


def _to_chw(data: np.ndarray, path: Path) -> np.ndarray:
    if data.ndim == 2:
        return data[None].astype(np.float32)
    if data.ndim == 3 and data.shape[-1] in (3, 4):
        return np.moveaxis(data[..., :3], -1, 0).astype(np.float32)
    raise DataError(f"unsupported image shape {data.shape} in {path}")


def _index_dir(directory: Path) -> dict[str, Path]:
    if not directory.is_dir():
        return {}
    return {p.stem: p for p in sorted(directory.iterdir()) if p.suffix.lower() in IMAGE_EXTENSIONS}


def load_dataset(
    root_path,
    spec: DatasetSpec,
    mode: str = "semi",
    split: str = "train",
    require_masks: bool = True,
) -> list[ImageSample]:
    """Load ``<root>/images/<id>.<ext>`` with masks from ``<root>/masks/<id>.<ext>``.

    Images and masks are center-cropped to the crop size of ``mode`` and masks
    are remapped through ``spec``.
    """
    root = Path(root_path)
    images = _index_dir(root / "images")
    if not images:
        raise DataError(f"no samples found in {root}")
    masks = _index_dir(root / "masks")
    crop = spec.crop_size(mode)
    samples = []
    for sid, ipath in images.items():
        image = _to_chw(_read_image(ipath), ipath)
        if image.shape[0] != spec.channels:
            if spec.channels == 1:
                image = image.mean(axis=0, keepdims=True)
            else:
                raise DataError(f"{ipath}: expected {spec.channels} channels, got {image.shape[0]}")
        full_shape = image.shape[1:]
        try:
            image = center_crop(image, crop)
        except DataError as exc:
            raise DataError(f"{ipath}: {exc}") from None
        mask = None
        if sid in masks:
            raw = _read_image(masks[sid])
            if raw.ndim == 3:
                raw = raw[..., 0]
            if raw.shape != full_shape:
                raise DataError(f"mask {masks[sid]} shape {raw.shape} does not match image {full_shape}")
            mask = center_crop(spec.remap(raw), crop)
        elif require_masks:
            raise DataError(f"missing mask for labeled sample {sid!r} ({ipath})")
        samples.append(ImageSample(np.ascontiguousarray(image), mask, sid, split))
    return samples


# -- normalization -----------------------------------------------------------


@dataclass(frozen=True)
class NormStats:
    """Per-channel minimum and maximum of the training images."""

    min: tuple[float, ...]
    max: tuple[float, ...]

    def apply(self, image: np.ndarray) -> np.ndarray:
        lo = np.asarray(self.min, dtype=np.float64).reshape(-1, 1, 1)
        hi = np.asarray(self.max, dtype=np.float64).reshape(-1, 1, 1)
        out = (np.asarray(image, dtype=np.float64) - lo) / (hi - lo)
        return np.clip(out, 0.0, 1.0).astype(np.float32)

    def save(self, path) -> None:
        lines = ["# per-channel min/max of the training data"]
        for c, (lo, hi) in enumerate(zip(self.min, self.max)):
            lines.append(f"channel{c}.min = {lo!r}")
            lines.append(f"channel{c}.max = {hi!r}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "NormStats":
        values: dict[str, float] = {}
        for line in Path(path).read_text().splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, val = line.partition("=")
            values[key.strip()] = float(val)
        n = len(values) // 2
        try:
            return cls(
                tuple(values[f"channel{c}.min"] for c in range(n)),
                tuple(values[f"channel{c}.max"] for c in range(n)),
            )
        except KeyError as exc:
            raise DataError(f"malformed stats file {path}: missing {exc}") from None


def compute_stats(images: Sequence[np.ndarray]) -> NormStats:
    if len(images) == 0:
        raise DataError("cannot compute normalization stats from an empty training set")
    stack = [np.asarray(im, dtype=np.float64) for im in images]
    if not all(np.isfinite(im).all() for im in stack):
        raise DataError("training intensities must be finite")
    lo = np.min([im.reshape(im.shape[0], -1).min(axis=1) for im in stack], axis=0)
    hi = np.max([im.reshape(im.shape[0], -1).max(axis=1) for im in stack], axis=0)
    if np.any(hi == lo):
        raise DataError("constant training data")
    return NormStats(tuple(float(v) for v in lo), tuple(float(v) for v in hi))


def normalize(train: Sequence[ImageSample], other: Sequence[ImageSample] = ()):
    """Min/max normalize both sets with statistics from ``train`` only.

    Returns ``(train_normalized, other_normalized, stats)``. Values outside the
    training range are clamped to [0, 1].
    """
    stats = compute_stats([s.image for s in train])
    return (
        [s.with_image(stats.apply(s.image)) for s in train],
        [s.with_image(stats.apply(s.image)) for s in other],
        stats,
    )


# -- splits ------------------------------------------------------------------


@dataclass(frozen=True)
class LabelSplit:
    labeled: tuple[str, ...]
    unlabeled: tuple[str, ...]
    ratio: float
    seed: int

    def apply(self, train: Sequence[ImageSample]) -> tuple[list[ImageSample], list[ImageSample]]:
        """Return ``(labeled, unlabeled)`` samples, withholding unlabeled masks."""
        by_id = {s.id: s for s in train}
        missing = [i for i in self.labeled + self.unlabeled if i not in by_id]
        if missing:
            raise DataError(f"split references unknown sample ids {missing[:5]}")
        return [by_id[i] for i in self.labeled], [by_id[i].withhold() for i in self.unlabeled]


def make_label_split(train: Sequence[ImageSample], ratio: float, seed: int) -> LabelSplit:
    if not 0 < ratio <= 1:
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")
    if len(train) < 2:
        raise ValueError("need at least 2 training samples")
    n_labeled = int(round(ratio * len(train)))
    if n_labeled == 0:
        raise ValueError("ratio too small for dataset")
    ids = [s.id for s in train]
    if len(set(ids)) != len(ids):
        raise DataError("sample ids must be unique")
    order = np.random.default_rng(seed).permutation(len(ids))
    chosen = set(order[:n_labeled].tolist())
    labeled = tuple(ids[i] for i in range(len(ids)) if i in chosen)
    unlabeled = tuple(ids[i] for i in range(len(ids)) if i not in chosen)
    return LabelSplit(labeled, unlabeled, float(ratio), int(seed))


def split_holdout(
    samples: Sequence[ImageSample], fraction: float, seed: int, split: str = "val"
) -> tuple[list[ImageSample], list[ImageSample]]:
    """Randomly move ``round(fraction * n)`` samples (at least one) into ``split``."""
    n_hold = max(1, int(round(fraction * len(samples))))
    if n_hold >= len(samples):
        raise ValueError("holdout would leave no training samples")
    order = np.random.default_rng(seed).permutation(len(samples))
    held = set(order[:n_hold].tolist())
    rest = [s for i, s in enumerate(samples) if i not in held]
    hold = [s.with_split(split) for i, s in enumerate(samples) if i in held]
    return rest, hold


# -- volumes -----------------------------------------------------------------


def read_volume(path):
    """Read a raw volume described by a ``<path>.hdr`` sidecar.

    The header holds ``shape = a,b,c``, ``dtype = <numpy dtype>`` and
    ``byte_order = little|big``.
    """
    path = Path(path)
    header = path.with_name(path.name + ".hdr")
    if not header.exists():
        raise DataError(f"missing volume header {header}")
    meta = {}
    for line in header.read_text().splitlines():
        if "=" in line and not line.lstrip().startswith("#"):
            k, _, v = line.partition("=")
            meta[k.strip()] = v.strip()
    try:
        shape = tuple(int(x) for x in meta["shape"].split(","))
        dtype = np.dtype(meta["dtype"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed volume header {header}: {exc}") from None
    order = meta.get("byte_order", "little")
    if order not in ("little", "big"):
        raise DataError(f"byte_order must be little or big, got {order!r}")
    dtype = dtype.newbyteorder("<" if order == "little" else ">")
    expected = int(np.prod(shape)) * dtype.itemsize
    if path.stat().st_size != expected:
        raise DataError(f"{path}: expected {expected} bytes for shape {shape}, found {path.stat().st_size}")
    return np.memmap(path, dtype=dtype, mode="r", shape=shape)


def write_volume(path, volume: np.ndarray) -> None:
    path = Path(path)
    volume = np.ascontiguousarray(volume)
    order = "big" if volume.dtype.byteorder == ">" else "little"
    volume.tofile(path)
    path.with_name(path.name + ".hdr").write_text(
        f"shape = {','.join(str(s) for s in volume.shape)}\n"
        f"dtype = {volume.dtype.newbyteorder('=').name}\n"
        f"byte_order = {order}\n"
    )


def slice_volume(
    volume: np.ndarray,
    count: int,
    seed: int,
    crop: tuple[int, int],
    labels: np.ndarray | None = None,
    spec: DatasetSpec | None = None,
    random_rotation: bool = True,
    id_prefix: str = "slice",
) -> list[ImageSample]:
    """Extract ``count`` 2D slices from randomly rotated copies of ``volume``.

    Each slice is a ``crop``-sized plane through the volume center (shifted by
    a random offset along its normal) after a uniformly random 3D rotation.
    Intensities are sampled linearly, labels with nearest neighbour. With
    ``random_rotation=False`` every slice is the exact central axis-0 plane.
    """
    volume = np.asarray(volume)
    if volume.ndim != 3:
        raise DataError(f"volume must be 3D, got shape {volume.shape}")
    if labels is not None and np.shape(labels) != volume.shape:
        raise DataError("label volume shape does not match intensity volume")
    h, w = crop
    center = np.array([s // 2 for s in volume.shape], dtype=np.float64)
    half_diag = 0.5 * np.hypot(h, w)
    room = min(volume.shape) / 2.0 - half_diag
    if random_rotation and room < 0:
        raise DataError(f"crop {h}x{w} does not fit in every rotated plane of volume {volume.shape}")
    if not random_rotation and (h > volume.shape[1] or w > volume.shape[2]):
        raise DataError(f"crop {h}x{w} larger than slice {volume.shape[1:]}")

    rng = np.random.default_rng(seed)
    uu, vv = np.meshgrid(np.arange(h) - h // 2, np.arange(w) - w // 2, indexing="ij")
    plane = np.stack([np.zeros_like(uu), uu, vv]).reshape(3, -1).astype(np.float64)
    out = []
    for k in range(count):
        if random_rotation:
            rot = Rotation.random(random_state=rng).as_matrix()
            offset = rng.uniform(-room, room) if room > 0 else 0.0
            plane_k = plane.copy()
            plane_k[0] = offset
            coords = rot @ plane_k + center[:, None]
            image = ndimage.map_coordinates(volume, coords, order=1, mode="constant", cval=0.0)
            mask = None
            if labels is not None:
                mask = ndimage.map_coordinates(np.asarray(labels), coords, order=0, mode="nearest")
        else:
            z = int(center[0])
            top, left = volume.shape[1] // 2 - h // 2, volume.shape[2] // 2 - w // 2
            image = np.asarray(volume[z, top : top + h, left : left + w])
            mask = None if labels is None else np.asarray(labels[z, top : top + h, left : left + w])
        image = np.asarray(image, dtype=np.float32).reshape(h, w)
        if mask is not None:
            mask = mask.reshape(h, w)
            mask = spec.remap(mask) if spec is not None else mask.astype(np.int64)
        out.append(ImageSample(image, mask, f"{id_prefix}{k:05d}"))
    return out


# -- synthetic ---------------------------------------------------------------


def _ellipse(h, w, cy, cx, ry, rx, theta):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = (c * dx + s * dy) / rx
    v = (-s * dx + c * dy) / ry
    return u * u + v * v <= 1.0


def _blobs_sample(rng, h, w):
    mask = np.zeros((h, w), dtype=bool)
    image = rng.normal(0.12, 0.04, (h, w))
    n_blobs = int(rng.integers(2, 7))
    scale = min(h, w)
    for _ in range(n_blobs):
        ry, rx = rng.uniform(0.05, 0.13, 2) * scale
        cy, cx = rng.uniform(0.1, 0.9) * h, rng.uniform(0.1, 0.9) * w
        blob = _ellipse(h, w, cy, cx, ry, rx, rng.uniform(0, np.pi))
        image[blob] = rng.uniform(0.6, 0.9) + rng.normal(0, 0.04, int(blob.sum()))
        mask |= blob
    if not mask.any():
        blob = _ellipse(h, w, h / 2, w / 2, 0.1 * scale, 0.1 * scale, 0.0)
        image[blob] = 0.75
        mask |= blob
    return image, mask


def _two_intensity_sample(rng, h, w):
    # region boundary: level set of a smoothed random field, so class area varies
    field_ = ndimage.gaussian_filter(rng.normal(size=(h, w)), sigma=min(h, w) / 8, mode="wrap")
    level = np.quantile(field_, rng.uniform(0.35, 0.65))
    mask = field_ > level
    fg, bg = rng.uniform(0.65, 0.8), rng.uniform(0.2, 0.35)
    image = np.where(mask, fg, bg) + rng.normal(0, 0.05, (h, w))
    return image, mask


def generate_synthetic(kind: str, n: int, size: tuple[int, int] = (128, 128), seed: int = 0) -> list[ImageSample]:
    """Generate ``n`` binary-segmentation samples.

    ``"blobs"``: bright ellipses on a noisy dark background.
    ``"two-intensity"``: two regions whose class is determined by mean intensity.
    """
    makers = {"blobs": _blobs_sample, "two-intensity": _two_intensity_sample}
    if kind not in makers:
        raise ValueError(f"kind must be one of {sorted(makers)}, got {kind!r}")
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    h, w = size
    samples = []
    for i in range(n):
        image, mask = makers[kind](rng, h, w)
        samples.append(ImageSample(image.astype(np.float32), mask.astype(np.int64), f"{kind}-{i:04d}"))
    return samples


SYNTHETIC_SPEC = DatasetSpec("synthetic", 2, (128, 128), (128, 128))
