"""Dataset ingestion and deterministic preprocessing.

Supports the MVTec AD directory layout and one-class adaptations of labeled
classification datasets (IDX archives as used by MNIST / Fashion-MNIST, the
CIFAR-10 binary archive, or an image-folder tree).
"""

from __future__ import annotations

import gzip
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from .encoder import IMAGENET_MEAN, IMAGENET_STD
from .errors import ConfigError, DataError, DomainError

logger = logging.getLogger(__name__)

MVTEC_CATEGORIES = (
    "bottle", "cable", "capsule", "carpet", "grid", "hazelnut", "leather", "metal_nut",
    "pill", "screw", "tile", "toothbrush", "transistor", "wood", "zipper",
)
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")

NORMAL, ANOMALOUS = "normal", "anomalous"


@dataclass(frozen=True)
class SampleRecord:
    image: np.ndarray  # (3, H, W) float32, standardized
    label: str
    mask: Optional[np.ndarray]  # (H, W) bool
    source_path: str
    category: str

    @property
    def is_anomalous(self) -> bool:
        return self.label == ANOMALOUS


def _as_size(resolution) -> Tuple[int, int]:
    if isinstance(resolution, int):
        return resolution, resolution
    h, w = resolution
    return int(h), int(w)


def _to_pil(image) -> Image.Image:
    if isinstance(image, Image.Image):
        return image
    if isinstance(image, (str, Path)):
        try:
            with Image.open(image) as im:
                im.load()
                return im.copy()
        except (OSError, UnidentifiedImageError) as exc:
            raise DataError(f"cannot decode image {image}: {exc}") from exc
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[0] in (1, 3) and arr.shape[-1] not in (1, 3):
        arr = np.moveaxis(arr, 0, -1)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    return Image.fromarray(arr)


def preprocess(
    image,
    resolution: Union[int, Tuple[int, int]] = 256,
    mean: Sequence[float] = IMAGENET_MEAN,
    std: Sequence[float] = IMAGENET_STD,
) -> np.ndarray:
    """Image (path, PIL image or array) to a standardized ``(3, H, W)`` float32 array.

    Bilinear resize to ``resolution``, grayscale replicated to three channels,
    scale to [0, 1], then per-channel standardization.
    """
    im = _to_pil(image).convert("RGB")
    h, w = _as_size(resolution)
    if im.size != (w, h):
        im = im.resize((w, h), Image.BILINEAR)
    arr = np.asarray(im, dtype=np.float32) / 255.0
    arr = (arr - np.asarray(mean, dtype=np.float32)) / np.asarray(std, dtype=np.float32)
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def preprocess_mask(mask, resolution: Union[int, Tuple[int, int]] = 256) -> np.ndarray:
    """Ground-truth mask to a boolean ``(H, W)`` array, resized nearest-neighbour."""
    im = _to_pil(mask).convert("L")
    h, w = _as_size(resolution)
    if im.size != (w, h):
        im = im.resize((w, h), Image.NEAREST)
    return np.asarray(im) > 0


def denormalize(image: np.ndarray, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> np.ndarray:
    """Inverse of the standardization step; returns ``(H, W, 3)`` floats in [0, 1]."""
    arr = image.transpose(1, 2, 0) * np.asarray(std) + np.asarray(mean)
    return np.clip(arr, 0.0, 1.0)


def _list_images(directory: Path) -> List[Path]:
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _check_category(root: Path, category: str):
    if category in MVTEC_CATEGORIES or (root / category).is_dir():
        return
    raise ConfigError(
        f"unknown category {category!r} under {root}; valid MVTec AD categories: "
        + ", ".join(MVTEC_CATEGORIES)
    )


def load_mvtec_category(
    root,
    category: str,
    split: str,
    resolution: Union[int, Tuple[int, int]] = 256,
) -> List[SampleRecord]:
    """Load one category of an MVTec AD style tree.

    Layout::

        root/category/train/good/*.png
        root/category/test/<defect_type>/*.png      (``good`` for normal images)
        root/category/ground_truth/<defect_type>/<stem>_mask.png

    Besides the 15 MVTec AD names, any category directory that exists under
    ``root`` is accepted (e.g. the synthetic fixture). Records are sorted by
    defect type then filename.
    """
    root = Path(root)
    if split not in ("train", "test"):
        raise ConfigError(f"split must be 'train' or 'test', got {split!r}")
    _check_category(root, category)
    base = root / category
    split_dir = base / split
    if not split_dir.is_dir():
        raise DataError(f"missing directory {split_dir}")
    size = _as_size(resolution)
    records = []

    if split == "train":
        good = split_dir / "good"
        if not good.is_dir():
            raise DataError(f"missing directory {good}")
        for p in _list_images(good):
            records.append(SampleRecord(preprocess(p, size), NORMAL, None, str(p), category))
        if not records:
            raise DataError(f"no training images in {good}")
        return records

    for defect_dir in sorted(d for d in split_dir.iterdir() if d.is_dir()):
        defect = defect_dir.name
        for p in _list_images(defect_dir):
            image = preprocess(p, size)
            if defect == "good":
                records.append(SampleRecord(image, NORMAL, np.zeros(size, dtype=bool), str(p), category))
                continue
            mask_path = base / "ground_truth" / defect / f"{p.stem}_mask.png"
            if not mask_path.is_file():
                raise DataError(f"no ground-truth mask for defective image {p} (expected {mask_path})")
            records.append(SampleRecord(image, ANOMALOUS, preprocess_mask(mask_path, size), str(p), category))
    if not records:
        raise DataError(f"no test images under {split_dir}")
    return records


def split_holdout(records: Sequence, fraction: float, seed: int = 0):
    """Seeded split of training records into (train, held-out) for loss monitoring only."""
    if not 0.0 <= fraction < 1.0:
        raise ConfigError(f"holdout fraction must be in [0, 1), got {fraction}")
    n_hold = int(round(len(records) * fraction))
    if n_hold == 0:
        return list(records), []
    order = np.random.default_rng(seed).permutation(len(records))
    hold = set(order[:n_hold].tolist())
    return (
        [r for i, r in enumerate(records) if i not in hold],
        [r for i, r in enumerate(records) if i in hold],
    )


# --- labeled classification datasets ---------------------------------------


@dataclass
class LabeledDataset:
    """Raw images (N, H, W) or (N, H, W, 3) uint8 with integer class labels."""

    name: str
    train_images: np.ndarray
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray

    @property
    def classes(self) -> List[int]:
        return sorted(set(np.unique(self.train_labels).tolist()) | set(np.unique(self.test_labels).tolist()))


class LazyRecords(Sequence):
    """Sequence of SampleRecords preprocessed on access, so large splits stay raw in memory."""

    def __init__(self, images, labels, category, resolution, source):
        self.images = images
        self.labels = list(labels)
        self.category = category
        self.resolution = resolution
        self.source = source

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        return SampleRecord(
            preprocess(self.images[i], self.resolution),
            self.labels[i],
            None,
            f"{self.source}[{i}]",
            self.category,
        )


@dataclass
class OneClassSplit:
    normal_class: int
    train: LazyRecords
    test: LazyRecords


def make_one_class_split(
    dataset: LabeledDataset,
    normal_class: int,
    resolution: Union[int, Tuple[int, int]] = 256,
    max_train: Optional[int] = None,
    max_test: Optional[int] = None,
    seed: int = 0,
) -> OneClassSplit:
    """Train on one class; test on the full test split with binary labels.

    ``max_train`` / ``max_test`` take a seeded subsample for quick runs.
    """
    if len(dataset.classes) < 2:
        raise DomainError("one-class protocol needs a dataset with at least two classes")
    if normal_class not in dataset.classes:
        raise DomainError(f"class {normal_class} not present in {dataset.name} (classes {dataset.classes})")
    rng = np.random.default_rng(seed)
    train_idx = np.flatnonzero(dataset.train_labels == normal_class)
    if train_idx.size == 0:
        raise DomainError(f"class {normal_class} has no training images in {dataset.name}")
    test_idx = np.arange(len(dataset.test_labels))
    if max_train is not None and train_idx.size > max_train:
        train_idx = np.sort(rng.choice(train_idx, max_train, replace=False))
    if max_test is not None and test_idx.size > max_test:
        test_idx = np.sort(rng.choice(test_idx, max_test, replace=False))
    test_labels = [NORMAL if dataset.test_labels[i] == normal_class else ANOMALOUS for i in test_idx]
    category = f"{dataset.name}-{normal_class}"
    return OneClassSplit(
        normal_class=normal_class,
        train=LazyRecords(dataset.train_images[train_idx], [NORMAL] * train_idx.size, category,
                          resolution, f"{dataset.name}/train"),
        test=LazyRecords(dataset.test_images[test_idx], test_labels, category,
                         resolution, f"{dataset.name}/test"),
    )


def read_idx(path) -> np.ndarray:
    """Read an IDX file (optionally gzip-compressed) into a numpy array."""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    try:
        with opener(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read IDX file {path}: {exc}") from exc
    if len(data) < 4 or data[0] != 0 or data[1] != 0:
        raise DataError(f"{path} is not an IDX file")
    dtypes = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}
    if data[2] not in dtypes:
        raise DataError(f"{path}: unsupported IDX element type 0x{data[2]:02x}")
    ndim = data[3]
    shape = struct.unpack(f">{ndim}I", data[4 : 4 + 4 * ndim])
    arr = np.frombuffer(data, dtype=dtypes[data[2]], offset=4 + 4 * ndim)
    if arr.size != int(np.prod(shape)):
        raise DataError(f"{path}: header shape {shape} does not match payload")
    return arr.reshape(shape).astype(arr.dtype.newbyteorder("="))


def _find(root: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        if (root / name).is_file():
            return root / name
    raise DataError(f"{stem}[.gz] not found in {root}")


def load_idx_dataset(root, name: str = "mnist") -> LabeledDataset:
    """MNIST / Fashion-MNIST from the four standard IDX archives in ``root``."""
    root = Path(root)
    return LabeledDataset(
        name=name,
        train_images=read_idx(_find(root, "train-images-idx3-ubyte")),
        train_labels=read_idx(_find(root, "train-labels-idx1-ubyte")).astype(np.int64),
        test_images=read_idx(_find(root, "t10k-images-idx3-ubyte")),
        test_labels=read_idx(_find(root, "t10k-labels-idx1-ubyte")).astype(np.int64),
    )


def _read_cifar_batch(path: Path) -> Tuple[np.ndarray, np.ndarray]:
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % 3073:
        raise DataError(f"{path} is not a CIFAR-10 binary batch")
    raw = raw.reshape(-1, 3073)
    images = raw[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return np.ascontiguousarray(images), raw[:, 0].astype(np.int64)


def load_cifar10(root, name: str = "cifar10") -> LabeledDataset:
    """CIFAR-10 from the binary archive (``data_batch_{1..5}.bin``, ``test_batch.bin``)."""
    root = Path(root)
    if (root / "cifar-10-batches-bin").is_dir():
        root = root / "cifar-10-batches-bin"
    train = [root / f"data_batch_{i}.bin" for i in range(1, 6)]
    missing = [p for p in train + [root / "test_batch.bin"] if not p.is_file()]
    if missing:
        raise DataError(f"CIFAR-10 batches missing: {[str(p) for p in missing]}")
    parts = [_read_cifar_batch(p) for p in train]
    test_x, test_y = _read_cifar_batch(root / "test_batch.bin")
    return LabeledDataset(
        name=name,
        train_images=np.concatenate([x for x, _ in parts]),
        train_labels=np.concatenate([y for _, y in parts]),
        test_images=test_x,
        test_labels=test_y,
    )


def load_image_folder(root, name: Optional[str] = None) -> LabeledDataset:
    """``root/{train,test}/<class>/*.png``; class ids follow sorted class-directory names."""
    root = Path(root)
    class_names = sorted(d.name for d in (root / "train").iterdir() if d.is_dir()) if (root / "train").is_dir() else []
    if not class_names:
        raise DataError(f"no class directories under {root / 'train'}")
    ids = {c: i for i, c in enumerate(class_names)}

    def read(split):
        images, labels = [], []
        for c in class_names:
            d = root / split / c
            if not d.is_dir():
                continue
            for p in _list_images(d):
                images.append(np.asarray(_to_pil(p).convert("RGB")))
                labels.append(ids[c])
        if not images:
            raise DataError(f"no images under {root / split}")
        return np.stack(images), np.asarray(labels, dtype=np.int64)

    tr_x, tr_y = read("train")
    te_x, te_y = read("test")
    return LabeledDataset(name or root.name, tr_x, tr_y, te_x, te_y)


def load_labeled_dataset(kind: str, root) -> LabeledDataset:
    loaders = {
        "mnist": lambda r: load_idx_dataset(r, "mnist"),
        "fashion_mnist": lambda r: load_idx_dataset(r, "fashion_mnist"),
        "cifar10": load_cifar10,
        "image_folder": load_image_folder,
    }
    if kind not in loaders:
        raise ConfigError(f"unknown dataset kind {kind!r}; expected one of {['mvtec', *loaders]}")
    return loaders[kind](root)
