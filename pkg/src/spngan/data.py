"""Dataset ingestion and batching.

Images are kept as (N, H, W, 3) uint8 throughout; models see the [-1, 1]
float mapping from to_model_range. Loaders cover the CIFAR binary archives,
generic class-per-subdirectory image folders, and a seeded synthetic
"shapes" set (one bright object on a smooth textured background) used for
smoke training.
"""

import os
import warnings
from dataclasses import dataclass

import numpy as np

SHAPE_CLASSES = ("circle", "square", "triangle")


@dataclass
class Dataset:
    images: np.ndarray            # (N, H, W, 3) uint8
    labels: np.ndarray = None     # (N,) int64 or None
    num_classes: int = 0

    def __post_init__(self):
        img = self.images
        if img.ndim != 4 or img.shape[3] != 3 or img.dtype != np.uint8:
            raise ValueError("images must be (N, H, W, 3) uint8, got %s %s"
                             % (img.shape, img.dtype))
        if img.shape[0] < 1:
            raise ValueError("dataset is empty")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (img.shape[0],):
                raise ValueError("labels must be one integer per image")
            if self.num_classes < 1:
                raise ValueError("labeled dataset needs num_classes >= 1")
            if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
                raise ValueError("labels outside [0, num_classes)")

    def __len__(self):
        return self.images.shape[0]


def to_model_range(images):
    """uint8 [0, 255] -> float32 [-1, 1] via x / 127.5 - 1."""
    return images.astype(np.float32) / 127.5 - 1.0


def from_model_range(x):
    """Inverse mapping, rounded to the nearest level and clipped.

    Exact round trip on uint8 inputs: from_model_range(to_model_range(u)) == u.
    """
    return np.clip(np.rint((x + 1.0) * 127.5), 0, 255).astype(np.uint8)


def bilinear_resize(img, out_h, out_w):
    """Bilinear resample of an (H, W, C) float array to (out_h, out_w, C).

    Half-pixel (corner-aligned-off) sample grid: output pixel j reads source
    coordinate (j + 0.5) * in/out - 0.5, clamped to the valid range, so
    constant images stay constant and the mapping is its own 1:1 identity.
    """
    img = np.asarray(img, dtype=np.float64)
    in_h, in_w = img.shape[:2]

    def axis_coords(n_in, n_out):
        x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        x = np.clip(x, 0.0, n_in - 1.0)
        lo = np.floor(x).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (x - lo)

    y0, y1, wy = axis_coords(in_h, out_h)
    x0, x1, wx = axis_coords(in_w, out_w)
    wy = wy[:, None, None]
    wx = wx[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def _resize_u8(img_u8, size):
    out = bilinear_resize(img_u8.astype(np.float64), size, size)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def make_shapes_dataset(n=5000, size=32, seed=0):
    """Synthetic single-object scenes: one bright shape per image on a dim
    low-frequency background (4x4 noise bilinearly upsampled). Three classes:
    circle, square, triangle. Deterministic in (n, size, seed)."""
    rng = np.random.default_rng(seed)
    images = np.empty((n, size, size, 3), dtype=np.uint8)
    labels = rng.integers(0, 3, size=n)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    for i in range(n):
        bg = rng.uniform(0.0, 110.0, (4, 4, 3))
        img = bilinear_resize(bg, size, size)
        r = rng.uniform(0.2, 0.32) * size
        cy = rng.uniform(r + 1, size - r - 1)
        cx = rng.uniform(r + 1, size - r - 1)
        dy, dx = yy - cy, xx - cx
        k = labels[i]
        if k == 0:
            mask = dy * dy + dx * dx <= r * r
        elif k == 1:
            mask = np.maximum(np.abs(dy), np.abs(dx)) <= r
        else:
            # downward-pointing width growth from the apex at cy - r
            mask = (np.abs(dx) <= (dy + r) * 0.6) & (dy <= r) & (dy >= -r)
        color = rng.uniform(150.0, 255.0, 3)
        img[mask] = color
        images[i] = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return Dataset(images, labels, num_classes=3)


def _read_cifar_file(path, record_bytes, label_offset):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) == 0 or len(raw) % record_bytes != 0:
        want = record_bytes * max(1, round(len(raw) / record_bytes))
        raise ValueError("corrupt archive %s: expected a multiple of %d bytes"
                         " (e.g. %d), got %d" % (path, record_bytes, want, len(raw)))
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, record_bytes)
    labels = rec[:, label_offset].astype(np.int64)
    pix = rec[:, label_offset + 1:]
    images = pix.reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1).copy()
    return images, labels


def load_cifar(path, variant=10):
    """Parse CIFAR binary archives (label byte(s) + 3072 channel-planar pixel
    bytes per record). CIFAR-100 records carry coarse then fine label; the
    fine label is kept. path may be one .bin file or a directory holding the
    standard train archives."""
    if variant == 10:
        record_bytes, label_offset, classes = 3073, 0, 10
        train_names = ["data_batch_%d.bin" % i for i in range(1, 6)]
    elif variant == 100:
        record_bytes, label_offset, classes = 3074, 1, 100
        train_names = ["train.bin"]
    else:
        raise ValueError("variant must be 10 or 100")
    if os.path.isdir(path):
        files = [os.path.join(path, n) for n in train_names]
        missing = [f for f in files if not os.path.isfile(f)]
        if missing:
            raise FileNotFoundError("missing CIFAR archives: %s" % missing)
    else:
        files = [path]
    parts = [_read_cifar_file(f, record_bytes, label_offset) for f in files]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    return Dataset(images, labels, num_classes=classes)


def load_image_folder(path, size=128):
    """One class per subdirectory; every readable raster file is bilinearly
    resized to size x size. Unreadable files are skipped with a warning."""
    from PIL import Image

    classes = sorted(d for d in os.listdir(path)
                     if os.path.isdir(os.path.join(path, d)))
    if not classes:
        raise ValueError("no class subdirectories under %s" % path)
    images, labels = [], []
    for ci, cname in enumerate(classes):
        cdir = os.path.join(path, cname)
        for fname in sorted(os.listdir(cdir)):
            fpath = os.path.join(cdir, fname)
            try:
                with Image.open(fpath) as im:
                    arr = np.asarray(im.convert("RGB"))
            except Exception as exc:
                warnings.warn("skipping unreadable image %s (%s)" % (fpath, exc))
                continue
            images.append(_resize_u8(arr, size))
            labels.append(ci)
    if not images:
        raise ValueError("no readable images under %s" % path)
    return Dataset(np.stack(images), np.array(labels), num_classes=len(classes))


class BatchIterator:
    """Infinite stream of (images, labels) batches.

    Each epoch draws a fresh permutation from the iterator's own RNG, so the
    stream is deterministic given the generator passed in. With drop_last the
    epoch remainder is discarded and every batch has exactly `batch` samples;
    no sample repeats within an epoch. `count` tallies batches served."""

    def __init__(self, dataset, batch, rng, drop_last=True):
        if batch < 1 or (drop_last and batch > len(dataset)):
            raise ValueError("batch size %d invalid for %d samples"
                             % (batch, len(dataset)))
        self.dataset = dataset
        self.batch = batch
        self.rng = rng
        self.drop_last = drop_last
        self.count = 0
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    def __iter__(self):
        return self

    def __next__(self):
        if self._pos + self.batch > self._order.size:
            self._order = self.rng.permutation(len(self.dataset))
            self._pos = 0
        idx = self._order[self._pos:self._pos + self.batch]
        self._pos += self.batch
        self.count += 1
        ds = self.dataset
        labels = None if ds.labels is None else ds.labels[idx]
        return ds.images[idx], labels

    def state(self):
        """Mid-epoch position, so a resumed run replays the same batches."""
        return {"order": self._order, "pos": np.array([self._pos, self.count])}

    def load_state(self, st):
        self._order = np.asarray(st["order"], dtype=np.int64)
        self._pos = int(st["pos"][0])
        self.count = int(st["pos"][1])


def resolve_data_path(path):
    """Relative paths resolve against $SPNGAN_DATA_ROOT when it is set."""
    root = os.environ.get("SPNGAN_DATA_ROOT")
    if path and root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def dataset_from_config(kind, path=None, n=5000, size=32, seed=0):
    if kind == "shapes":
        return make_shapes_dataset(n=n, size=size, seed=seed)
    path = resolve_data_path(path)
    if kind in ("cifar10", "cifar100"):
        if not path:
            raise ValueError("%s needs data.path" % kind)
        return load_cifar(path, variant=10 if kind == "cifar10" else 100)
    if kind == "folder":
        if not path:
            raise ValueError("folder dataset needs data.path")
        return load_image_folder(path, size=size)
    raise ValueError("unknown dataset kind %r" % kind)


def save_image_grid(images_u8, path, cols=8):
    """Tile (N, H, W, 3) uint8 images row-major into a PNG."""
    from PIL import Image

    n, h, w, _ = images_u8.shape
    rows = (n + cols - 1) // cols
    sheet = np.zeros((rows * h, cols * w, 3), dtype=np.uint8)
    for i in range(n):
        r, c = divmod(i, cols)
        sheet[r * h:(r + 1) * h, c * w:(c + 1) * w] = images_u8[i]
    Image.fromarray(sheet).save(path)
