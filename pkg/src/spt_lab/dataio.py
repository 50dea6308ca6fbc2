"""Datasets, augmentation, synthetic tasks and the SPTC tensor container."""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError

SPLITS = ("train", "val", "test")


@dataclass
class ImageDataset:
    images: np.ndarray  # [N, C, H, W], float32 in [0, 1]
    labels: np.ndarray  # [N], int64
    split: np.ndarray   # [N], one of SPLITS
    num_classes: int
    name: str = "dataset"
    templates: np.ndarray | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.split = np.asarray(self.split, dtype="<U5")
        if len(self.images) != len(self.labels) or len(self.labels) != len(self.split):
            raise DataError("images, labels and split tags must have equal length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")
        bad = set(np.unique(self.split)) - set(SPLITS)
        if bad:
            raise DataError(f"unknown split tags {sorted(bad)}")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, split: str) -> "ImageDataset":
        mask = self.split == split
        return ImageDataset(self.images[mask], self.labels[mask], self.split[mask],
                            self.num_classes, f"{self.name}/{split}", self.templates)

    def take(self, indices) -> "ImageDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return ImageDataset(self.images[indices], self.labels[indices], self.split[indices],
                            self.num_classes, self.name, self.templates)


def split_train_val(ds: ImageDataset, val_fraction: float = 0.1, seed: int = 0) -> ImageDataset:
    """Retag a random ``val_fraction`` of the train split as val (90/10 by default)."""
    rng = np.random.default_rng(seed)
    train_idx = np.flatnonzero(ds.split == "train")
    n_val = int(round(val_fraction * len(train_idx)))
    chosen = rng.permutation(train_idx)[:n_val]
    split = ds.split.copy()
    split[chosen] = "val"
    return ImageDataset(ds.images, ds.labels, split, ds.num_classes, ds.name, ds.templates)


@dataclass
class SynthSpec:
    classes: int = 4
    per_class: dict = field(default_factory=lambda: {"train": 128, "val": 16, "test": 32})
    image_size: int = 32
    channels: int = 3
    sigma_between: float = 0.25
    sigma_within: float = 0.25
    texture_scale: int = 4
    seed: int = 0


def synth_dataset(spec: SynthSpec, name: str = "synth") -> ImageDataset:
    """Class-conditional Gaussian textures.

    Each class owns a template: 0.5 plus Gaussian noise of spread
    ``sigma_between`` drawn on a ``texture_scale``-pixel grid and upsampled.
    Images add per-pixel Gaussian noise of spread ``sigma_within`` and are
    clipped to [0, 1].
    """
    if spec.classes < 2:
        raise ConfigError("synthetic tasks need at least two classes")
    if spec.image_size % spec.texture_scale:
        raise ConfigError("texture_scale must divide image_size")
    rng = np.random.default_rng(spec.seed)
    coarse = spec.image_size // spec.texture_scale
    shape = (spec.classes, spec.channels, coarse, coarse)
    templates = 0.5 + spec.sigma_between * rng.standard_normal(shape)
    templates = templates.repeat(spec.texture_scale, axis=2).repeat(spec.texture_scale, axis=3)
    templates = np.clip(templates, 0.0, 1.0).astype(np.float32)

    images, labels, split = [], [], []
    for tag in SPLITS:
        n = int(spec.per_class.get(tag, 0))
        for c in range(spec.classes):
            noise = rng.standard_normal((n, spec.channels, spec.image_size, spec.image_size))
            images.append(np.clip(templates[c] + spec.sigma_within * noise, 0.0, 1.0))
            labels.append(np.full(n, c))
            split.append(np.full(n, tag))
    return ImageDataset(np.concatenate(images).astype(np.float32), np.concatenate(labels),
                        np.concatenate(split), spec.classes, name, templates)


def resize_bilinear(image: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of a [C, H, W] image with half-pixel centers."""
    C, H, W = image.shape
    if H == size and W == size:
        return image.copy()

    def axis(n_in):
        pos = (np.arange(size) + 0.5) * (n_in / size) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (pos - lo).astype(image.dtype)

    y0, y1, wy = axis(H)
    x0, x1, wx = axis(W)
    top = image[:, y0][:, :, x0] * (1 - wx) + image[:, y0][:, :, x1] * wx
    bottom = image[:, y1][:, :, x0] * (1 - wx) + image[:, y1][:, :, x1] * wx
    return top * (1 - wy[:, None]) + bottom * wy[:, None]


AUGMENT_POLICIES = ("resize_crop_flip", "resize_only")
CROP_AREA = (0.7, 1.0)


def augment(image: np.ndarray, policy: str, rng=None, size: int | None = None,
            flip: bool | None = None) -> np.ndarray:
    """Train-time augmentation of one [C, H, W] image.

    ``resize_crop_flip`` takes a square crop covering a random 70-100% of the
    area, resizes it to ``size`` and mirrors horizontally with p=0.5 (``flip``
    forces the coin). ``resize_only`` just resizes.
    """
    if policy not in AUGMENT_POLICIES:
        raise ConfigError(f"unknown augmentation policy {policy!r}")
    rng = np.random.default_rng(rng)
    size = size or image.shape[-1]
    if policy == "resize_only":
        return resize_bilinear(image, size)
    _, H, W = image.shape
    area = rng.uniform(*CROP_AREA)
    side = max(1, int(round(np.sqrt(area * H * W))))
    side = min(side, H, W)
    top = rng.integers(0, H - side + 1)
    left = rng.integers(0, W - side + 1)
    out = resize_bilinear(image[:, top:top + side, left:left + side], size)
    do_flip = rng.random() < 0.5 if flip is None else flip
    return out[:, :, ::-1].copy() if do_flip else out


def augment_batch(images: np.ndarray, policy: str, rng, size: int | None = None) -> np.ndarray:
    if policy == "resize_only" and (size is None or size == images.shape[-1]):
        return images
    return np.stack([augment(im, policy, rng, size) for im in images])


# --- SPTC container -------------------------------------------------------
#
# magic "SPTC" | version u32 | count u32 | entries...
# entry: name_len u32 | name utf-8 | dtype u8 | rank u32 | dims u64 * rank | payload
# all little-endian.

MAGIC = b"SPTC"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2}


def encode_container(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _TAGS:
            if np.issubdtype(arr.dtype, np.integer) or arr.dtype == np.bool_:
                arr = arr.astype(np.int64)
            else:
                raise FormatError(f"entry {name!r}: unsupported dtype {arr.dtype}")
        tag = _TAGS[arr.dtype]
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BI", tag, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    return b"".join(parts)


def decode_container(buf: bytes) -> dict[str, np.ndarray]:
    pos = 0

    def need(n, what):
        if pos + n > len(buf):
            raise FormatError(f"truncated {what}: need {n} bytes, {len(buf) - pos} left", pos)

    need(12, "header")
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}", 0)
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    pos = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        need(4, "name length")
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        need(n, "name")
        try:
            name = buf[pos:pos + n].decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("entry name is not valid UTF-8", pos) from None
        if name in out:
            raise FormatError(f"duplicate entry name {name!r}", pos)
        pos += n
        need(5, "dtype/rank")
        tag, rank = struct.unpack_from("<BI", buf, pos)
        if tag not in _DTYPES:
            raise FormatError(f"unknown dtype tag {tag}", pos)
        pos += 5
        need(8 * rank, "dims")
        dims = struct.unpack_from(f"<{rank}Q", buf, pos)
        pos += 8 * rank
        dtype = _DTYPES[tag]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        need(nbytes, f"payload of {name!r}")
        out[name] = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize,
                                  offset=pos).reshape(dims).astype(dtype.newbyteorder("="))
        pos += nbytes
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after last entry", pos)
    return out


def save_container(path, tensors: dict[str, np.ndarray]) -> Path:
    """Write atomically: temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode_container(tensors)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_container(path) -> dict[str, np.ndarray]:
    return decode_container(Path(path).read_bytes())


def save_dataset_dir(ds: ImageDataset, directory) -> None:
    """One ``{split}.sptc`` per non-empty split, entries "images" and "labels"."""
    directory = Path(directory)
    for tag in SPLITS:
        part = ds.subset(tag)
        if len(part):
            save_container(directory / f"{tag}.sptc", {
                "images": part.images, "labels": part.labels,
                "num_classes": np.array([ds.num_classes], dtype=np.int64)})


def load_dataset_dir(directory, num_classes: int | None = None, name: str | None = None) -> ImageDataset:
    directory = Path(directory)
    images, labels, split = [], [], []
    classes = num_classes
    for tag in SPLITS:
        f = directory / f"{tag}.sptc"
        if not f.exists():
            continue
        entries = load_container(f)
        if "images" not in entries or "labels" not in entries:
            raise DataError(f"{f} must contain 'images' and 'labels'")
        images.append(entries["images"].astype(np.float32))
        labels.append(entries["labels"].astype(np.int64))
        split.append(np.full(len(entries["labels"]), tag))
        if classes is None and "num_classes" in entries:
            classes = int(entries["num_classes"][0])
    if not images:
        raise DataError(f"no split files found in {directory}")
    labels_all = np.concatenate(labels)
    if classes is None:
        classes = int(labels_all.max()) + 1
    ds = ImageDataset(np.concatenate(images), labels_all, np.concatenate(split), classes,
                      name or directory.name)
    if not (ds.split == "val").any():
        ds = split_train_val(ds)
    return ds


# --- checkpoints ----------------------------------------------------------

_CONFIG_INT = ("image_size", "patch_size", "channels", "dim", "depth", "heads", "num_classes")


def model_entries(model) -> dict[str, np.ndarray]:
    c = model.config
    entries = {f"config.{k}": np.array([getattr(c, k)], dtype=np.int64) for k in _CONFIG_INT}
    entries["config.mlp_ratio"] = np.array([c.mlp_ratio], dtype=np.float64)
    entries["config.gap"] = np.array([int(c.head_mode == "gap")], dtype=np.int64)
    entries.update(model.state_dict())
    return entries


def model_from_entries(entries: dict[str, np.ndarray]):
    from .vit import VitConfig, VitModel

    try:
        cfg = {k: int(entries[f"config.{k}"][0]) for k in _CONFIG_INT}
        cfg["mlp_ratio"] = float(entries["config.mlp_ratio"][0])
        cfg["head_mode"] = "gap" if int(entries["config.gap"][0]) else "cls_token"
    except KeyError as err:
        raise FormatError(f"checkpoint lacks config entry {err.args[0]!r}") from None
    model = VitModel(VitConfig(**cfg))
    model.load_state_dict({k: v for k, v in entries.items() if not k.startswith("config.")})
    return model


def save_model(path, model) -> Path:
    return save_container(path, model_entries(model))


def load_model(path):
    return model_from_entries(load_container(path))


def prompt_entries(prompts) -> dict[str, np.ndarray]:
    entries = {"prompt.deep": np.array([int(prompts.mode == "deep")], dtype=np.int64),
               "prompt.frozen": np.array([int(prompts.frozen)], dtype=np.int64)}
    for i, t in enumerate(prompts.tokens):
        entries[f"prompt.layer{i}"] = t.data
    return entries


def prompts_from_entries(entries: dict[str, np.ndarray]):
    from .prompts import PromptSet

    if "prompt.deep" not in entries:
        raise FormatError("container holds no prompt set")
    layers = sorted((k for k in entries if k.startswith("prompt.layer")), key=lambda k: int(k[12:]))
    mode = "deep" if int(entries["prompt.deep"][0]) else "shallow"
    frozen = bool(int(entries.get("prompt.frozen", [0])[0]))
    return PromptSet.from_arrays(mode, [entries[k] for k in layers], frozen=frozen)


def save_prompts(path, prompts, head=None) -> Path:
    """Prompt set, optionally with the task head (``head_w``/``head_b``) of the same run."""
    entries = prompt_entries(prompts)
    if head is not None:
        entries.update({n: p.data for n, p in head.named_head()})
    return save_container(path, entries)


def load_prompts(path):
    return prompts_from_entries(load_container(path))
