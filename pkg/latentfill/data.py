"""MNIST ingestion, MCAR masks and zero-imputed training views."""

import gzip
import logging
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import BadMagic, DimensionMismatch, InvalidRate, InvalidValue, ManifestMismatch, ShapeMismatch, Truncated

logger = logging.getLogger(__name__)

IMAGES_MAGIC = 2051
LABELS_MAGIC = 2049
MASK_MAGIC = b"MCAR"
MASK_HEADER = struct.Struct("<4sIfI")  # magic, seed, rate, N (16 bytes)
SEED_LIMIT = 2 ** 32

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass
class ImageBatch:
    """N images shaped [N, C, H, W] with values in [0, 1], plus optional labels."""

    data: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4:
            raise ShapeMismatch(f"ImageBatch expects [N, C, H, W], got shape {self.data.shape}")
        if self.data.size and (self.data.min() < 0.0 or self.data.max() > 1.0):
            raise ValueError("ImageBatch values must lie in [0, 1]")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.data.shape[0],):
                raise DimensionMismatch(
                    f"{self.labels.shape[0]} labels for {self.data.shape[0]} images"
                )

    def __len__(self):
        return self.data.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])

    def subset(self, indices) -> "ImageBatch":
        labels = None if self.labels is None else self.labels[indices]
        return ImageBatch(self.data[indices], labels)


@dataclass
class MaskSet:
    """Binary masks aligned with an ImageBatch (1 = observed, 0 = missing)."""

    masks: np.ndarray
    rate: float
    seed: int

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=np.uint8)

    def __len__(self):
        return self.masks.shape[0]

    def subset(self, indices) -> "MaskSet":
        return MaskSet(self.masks[indices], self.rate, self.seed)

    def observed_fraction(self) -> float:
        return float(self.masks.mean()) if self.masks.size else 1.0


@dataclass
class DatasetSplit:
    """Images with their persistent masks. Masks never change for the life of a split."""

    images: ImageBatch
    masks: MaskSet
    role: str = "train"

    def __post_init__(self):
        if self.role not in ("train", "test"):
            raise ValueError(f"Unknown split role '{self.role}'")
        if self.masks.masks.shape != self.images.data.shape:
            raise ShapeMismatch(
                f"masks {self.masks.masks.shape} do not match images {self.images.data.shape}"
            )

    def __len__(self):
        return len(self.images)

    def zero_imputed(self) -> ImageBatch:
        return zero_impute(self.images, self.masks)


def _open(path):
    if str(path).endswith(".gz"):
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_header(blob: bytes, path, count: int) -> tuple[int, ...]:
    size = 4 * count
    if len(blob) < size:
        raise Truncated(f"{path}: header needs {size} bytes, file has {len(blob)} (offset 0)")
    return struct.unpack(f">{count}I", blob[:size])


def load_idx(images_path, labels_path=None) -> ImageBatch:
    """
    Load an IDX image file (and optionally its label file) into an ImageBatch.

    Args:
        images_path: Path to an idx3-ubyte image file (optionally .gz)
        labels_path: Path to the matching idx1-ubyte label file, or None

    Returns:
        ImageBatch: Images scaled to [0, 1] by division by 255

    Raises:
        BadMagic: A header carries the wrong magic number
        Truncated: A file is shorter than its header declares
        DimensionMismatch: Image and label counts disagree
    """
    with _open(images_path) as f:
        blob = f.read()
    magic, = _read_header(blob, images_path, 1)
    if magic != IMAGES_MAGIC:
        raise BadMagic(f"{images_path}: magic {magic} at offset 0, expected {IMAGES_MAGIC}")
    _, n, rows, cols = _read_header(blob, images_path, 4)
    expected = n * rows * cols
    payload = np.frombuffer(blob, dtype=np.uint8)[16:]
    if payload.size < expected:
        raise Truncated(
            f"{images_path}: expected {expected} pixel bytes from offset 16, found {payload.size}"
        )
    images = payload[:expected].reshape(n, 1, rows, cols).astype(np.float32) / 255.0

    labels = None
    if labels_path is not None:
        with _open(labels_path) as f:
            lblob = f.read()
        magic, = _read_header(lblob, labels_path, 1)
        if magic != LABELS_MAGIC:
            raise BadMagic(f"{labels_path}: magic {magic} at offset 0, expected {LABELS_MAGIC}")
        _, count = _read_header(lblob, labels_path, 2)
        if count != n:
            raise DimensionMismatch(
                f"{labels_path}: {count} labels at offset 4, but {images_path} holds {n} images"
            )
        lpayload = np.frombuffer(lblob, dtype=np.uint8)[8:]
        if lpayload.size < count:
            raise Truncated(f"{labels_path}: expected {count} label bytes from offset 8, found {lpayload.size}")
        labels = lpayload[:count].astype(np.int64)

    logger.info(f"Loaded {n} images of {rows}x{cols} from {images_path}")
    return ImageBatch(images, labels)


def mnist_paths(directory: str, role: str = "train") -> tuple[str, str]:
    """
    Resolve the standard MNIST IDX file names in a directory.

    Plain files win over their .gz variants when both are present.
    """
    image_name, label_name = MNIST_FILES[role]
    resolved = []
    for name in (image_name, label_name):
        plain = os.path.join(directory, name)
        resolved.append(plain if os.path.exists(plain) or not os.path.exists(plain + ".gz") else plain + ".gz")
    return resolved[0], resolved[1]


def _check_rate(rate: float):
    if not 0.0 <= rate <= 1.0:
        raise InvalidRate(f"missing rate {rate} is outside [0, 1]")


def check_seed(seed: int, what: str = "seed"):
    """Mask seeds key a Philox stream and sit in a u32 header field."""
    if not 0 <= int(seed) < SEED_LIMIT:
        raise InvalidValue(f"{what}: {seed} is outside [0, 2**32)")


def _image_uniforms(seed: int, index: int, size: int) -> np.ndarray:
    # Counter-based stream keyed by (seed, image index): generation order never matters.
    bit_generator = np.random.Philox(key=(int(seed) << 64) | int(index))
    return np.random.Generator(bit_generator).random(size)


def mcar_mask(n: int, shape, rate: float, seed: int) -> MaskSet:
    """
    Sample MCAR masks: every entry is independently missing with probability `rate`.

    The rate is rounded to float32 before thresholding so masks regenerated from a
    mask file header are bit-identical to the originals.
    """
    _check_rate(rate)
    check_seed(seed)
    shape = tuple(int(s) for s in shape)
    size = int(np.prod(shape))
    threshold = float(np.float32(rate))
    masks = np.empty((n, size), dtype=np.uint8)
    for i in range(n):
        masks[i] = _image_uniforms(seed, i, size) >= threshold
    return MaskSet(masks.reshape((n, *shape)), rate, seed)


def zero_impute(images: ImageBatch, masks: MaskSet) -> ImageBatch:
    """Set missing pixels to zero; observed pixels are left untouched."""
    if images.data.shape != masks.masks.shape:
        raise ShapeMismatch(f"images {images.data.shape} vs masks {masks.masks.shape}")
    return ImageBatch(images.data * masks.masks.astype(np.float32), images.labels)


def make_split(images: ImageBatch, rate: float, seed: int, role: str = "train") -> DatasetSplit:
    """Attach freshly sampled, persistent MCAR masks to an image set."""
    masks = mcar_mask(len(images), images.image_shape, rate, seed)
    logger.info(
        f"Created {role} split: {len(images)} images, rate={rate}, seed={seed}, "
        f"observed fraction={masks.observed_fraction():.4f}"
    )
    return DatasetSplit(images, masks, role)


def save_masks(mask_set: MaskSet, path: str):
    """
    Write masks as a 16-byte header followed by little-endian packed bits.

    Args:
        mask_set: Masks to persist
        path: Destination file
    """
    check_seed(mask_set.seed)
    header = MASK_HEADER.pack(MASK_MAGIC, int(mask_set.seed), float(mask_set.rate), len(mask_set))
    bits = np.packbits(mask_set.masks.reshape(-1), bitorder="little")
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "wb") as f:
        f.write(header)
        f.write(bits.tobytes())
    os.replace(tmp_path, path)


def load_masks(path: str, shape, verify: bool = False) -> MaskSet:
    """
    Read a mask file written by save_masks.

    Args:
        path: Mask file
        shape: Per-image (C, H, W); taken from the associated ImageBatch
        verify: Regenerate from the header's (seed, rate) and compare bitwise

    Returns:
        MaskSet: The stored masks
    """
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < MASK_HEADER.size:
        raise Truncated(f"{path}: mask header needs {MASK_HEADER.size} bytes, file has {len(blob)}")
    magic, seed, rate, n = MASK_HEADER.unpack(blob[:MASK_HEADER.size])
    if magic != MASK_MAGIC:
        raise BadMagic(f"{path}: magic {magic!r} at offset 0, expected {MASK_MAGIC!r}")
    shape = tuple(int(s) for s in shape)
    count = n * int(np.prod(shape))
    bits = np.frombuffer(blob, dtype=np.uint8)[MASK_HEADER.size:]
    if bits.size * 8 < count:
        raise Truncated(f"{path}: expected {count} mask bits from offset {MASK_HEADER.size}")
    masks = np.unpackbits(bits, count=count, bitorder="little").reshape((n, *shape))
    mask_set = MaskSet(masks, float(rate), int(seed))
    if verify:
        regenerated = mcar_mask(n, shape, float(rate), int(seed))
        if not np.array_equal(regenerated.masks, mask_set.masks):
            raise ManifestMismatch(f"{path}: stored masks differ from seed={seed}, rate={rate}")
    return mask_set
