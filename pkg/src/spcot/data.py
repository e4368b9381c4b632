"""Synthetic segmentation data, batch sampling and the ``.spct`` tensor format.

TensorFile record layout (little-endian)::

    b"SPCT" | u16 version (=1) | u8 dtype | u8 rank | u32 dims[rank] | payload

dtype codes: 0 = float32, 1 = uint8, 2 = float64.  A file holds one or more
records back to back; entry names, when wanted, live in a ``<file>.manifest``
CSV next to it.
"""

import csv
import os
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"SPCT"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1"), 2: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("uint8"): 1, np.dtype("float64"): 2}

NOISE_SIGMA = 0.12
FG_FRACTION = (0.02, 0.40)
BASE_RANGE = (0.3, 0.5)
CONTRAST_RANGE = (0.15, 0.35)
GAIN_RANGE = (0.7, 1.3)
TEXTURE_AMP = (0.02, 0.05)


class TensorFileError(ValueError):
    def __init__(self, msg, offset):
        super().__init__(f"{msg} (at byte offset {offset})")
        self.offset = offset


# ---------------------------------------------------------------------------
# tensor files
# ---------------------------------------------------------------------------


def encode_tensor(arr):
    arr = np.asarray(arr)
    code = _CODES.get(arr.dtype)
    if code is None:
        raise TypeError(f"unsupported dtype {arr.dtype}; use float32, float64 or uint8")
    head = MAGIC + struct.pack("<HBB", VERSION, code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes()


def decode_tensors(buf):
    """Parse every record in ``buf``; returns a list of arrays."""
    out = []
    off = 0
    while off < len(buf):
        if len(buf) - off < 8:
            raise TensorFileError("truncated header", off)
        if buf[off:off + 4] != MAGIC:
            raise TensorFileError("bad magic", off)
        version, code, rank = struct.unpack_from("<HBB", buf, off + 4)
        if version != VERSION:
            raise TensorFileError(f"unsupported version {version}", off + 4)
        if code not in DTYPES:
            raise TensorFileError(f"unknown dtype code {code}", off + 6)
        off += 8
        if len(buf) - off < 4 * rank:
            raise TensorFileError("truncated dims", off)
        dims = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        dt = DTYPES[code]
        expected = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        actual = len(buf) - off
        if actual < expected:
            raise TensorFileError(
                f"truncated payload: expected {expected} bytes, got {actual}", off
            )
        out.append(np.frombuffer(buf, dtype=dt, count=expected // dt.itemsize, offset=off).reshape(dims).copy())
        off += expected
    if not out:
        raise TensorFileError("empty file", 0)
    return out


def write_tensor(path, arr):
    with open(path, "wb") as f:
        f.write(encode_tensor(arr))


def read_tensor(path):
    with open(path, "rb") as f:
        arrs = decode_tensors(f.read())
    if len(arrs) != 1:
        raise TensorFileError(f"expected 1 record, found {len(arrs)}", 0)
    return arrs[0]


def save(path, tensors, extra_columns=None):
    """Write named tensors (dict or list of pairs) as records plus a manifest.

    ``extra_columns`` maps column name -> list of per-entry values.
    """
    items = list(tensors.items()) if isinstance(tensors, dict) else list(tensors)
    with open(path, "wb") as f:
        for _, arr in items:
            f.write(encode_tensor(arr))
    cols = extra_columns or {}
    with open(str(path) + ".manifest", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["index", "name", *cols])
        for i, (name, _) in enumerate(items):
            w.writerow([i, name, *(cols[c][i] for c in cols)])


def load(path):
    """Inverse of ``save``: dict name -> array, in record order."""
    with open(path, "rb") as f:
        arrs = decode_tensors(f.read())
    names = [str(i) for i in range(len(arrs))]
    mpath = str(path) + ".manifest"
    if os.path.exists(mpath):
        with open(mpath, newline="") as f:
            rows = list(csv.DictReader(f))
        if len(rows) != len(arrs):
            raise TensorFileError(f"manifest lists {len(rows)} entries, file has {len(arrs)}", 0)
        names = [r["name"] for r in rows]
    return dict(zip(names, arrs))


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    images: np.ndarray  # [N,1,H,W] float64 in [0,1]
    labels: np.ndarray  # [N,H,W] uint8 class index
    labeled: np.ndarray
    unlabeled: np.ndarray
    test: np.ndarray
    n_classes: int = 2

    def __len__(self):
        return len(self.images)

    @property
    def hw(self):
        return self.images.shape[-1]

    def masks(self, idx=None):
        """One-hot masks [n,C,H,W] for the given indices (all if None)."""
        lab = self.labels if idx is None else self.labels[np.asarray(idx)]
        return np.moveaxis(np.eye(self.n_classes)[lab], -1, -3)


def split_sizes(n, labeled_ratio):
    n_s = int(round(labeled_ratio * n))
    return n_s, n - n_s


def _texture(rng, hw):
    yy, xx = np.mgrid[0:hw, 0:hw] / hw
    tex = np.zeros((hw, hw))
    for _ in range(3):
        fy, fx = rng.uniform(1.0, 4.0, size=2)
        ph = rng.uniform(0, 2 * np.pi)
        tex += rng.uniform(*TEXTURE_AMP) * np.sin(2 * np.pi * (fy * yy + fx * xx) + ph)
    return tex


def _ellipse(rng, hw):
    yy, xx = np.mgrid[0:hw, 0:hw] + 0.5
    cy, cx = rng.uniform(0.2, 0.8, size=2) * hw
    ay, ax = rng.uniform(0.08, 0.25, size=2) * hw
    th = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(th) + dy * np.sin(th)
    v = -dx * np.sin(th) + dy * np.cos(th)
    return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0


def _sample_image(rng, hw):
    while True:
        fg = np.zeros((hw, hw), dtype=bool)
        for _ in range(rng.integers(1, 3)):
            fg |= _ellipse(rng, hw)
        frac = fg.mean()
        if FG_FRACTION[0] <= frac <= FG_FRACTION[1]:
            break
    base = rng.uniform(*BASE_RANGE)
    contrast = rng.uniform(*CONTRAST_RANGE)
    img = base + _texture(rng, hw) + contrast * fg
    img = (img - 0.5) * rng.uniform(*GAIN_RANGE) + 0.5
    img = img + rng.normal(0.0, NOISE_SIGMA, size=img.shape)
    return np.clip(img, 0.0, 1.0), fg.astype(np.uint8)


def generate(seed, n=200, hw=32, labeled_ratio=0.05, n_test=None):
    """Ellipses on a textured, noisy background.

    ``n`` training images are split into labeled/unlabeled by ``labeled_ratio``;
    ``n_test`` extra images (default n // 4) form the test split.
    """
    if hw < 16:
        raise ValueError(f"hw must be >= 16, got {hw}")
    if not 0 < labeled_ratio < 1:
        raise ValueError(f"labeled_ratio must be in (0,1), got {labeled_ratio}")
    n_s, n_u = split_sizes(n, labeled_ratio)
    if n_s == 0:
        raise ValueError(f"labeled_ratio={labeled_ratio} with n={n} gives an empty labeled set")
    if n_test is None:
        n_test = max(1, n // 4)
    rng = np.random.default_rng(seed)
    total = n + n_test
    images = np.empty((total, 1, hw, hw))
    labels = np.empty((total, hw, hw), dtype=np.uint8)
    for i in range(total):
        img, lab = _sample_image(rng, hw)
        # stored as float32 on disk; keep memory identical to a reload
        images[i, 0] = img.astype(np.float32)
        labels[i] = lab
    perm = rng.permutation(n)
    return Dataset(
        images=images,
        labels=labels,
        labeled=np.sort(perm[:n_s]),
        unlabeled=np.sort(perm[n_s:]),
        test=np.arange(n, total),
    )


def save_dataset(ds, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    write_tensor(os.path.join(out_dir, "images.spct"), ds.images.astype(np.float32))
    write_tensor(os.path.join(out_dir, "masks.spct"), ds.labels.astype(np.uint8))
    with open(os.path.join(out_dir, "split.txt"), "w") as f:
        for idx in (ds.labeled, ds.unlabeled, ds.test):
            f.write(",".join(str(int(i)) for i in idx) + "\n")


def load_dataset(data_dir):
    images = read_tensor(os.path.join(data_dir, "images.spct")).astype(np.float64)
    labels = read_tensor(os.path.join(data_dir, "masks.spct"))
    with open(os.path.join(data_dir, "split.txt")) as f:
        lines = f.read().splitlines()
    if len(lines) != 3:
        raise ValueError(f"split.txt must have 3 lines, found {len(lines)}")
    parts = [np.array([int(v) for v in ln.split(",") if v.strip()], dtype=np.int64) for ln in lines]
    if images.ndim == 3:
        images = images[:, None]
    return Dataset(images, labels, *parts, n_classes=max(2, int(labels.max()) + 1))


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------


class BatchSampler:
    """Labeled indices cycle with reshuffling; unlabeled are drawn without
    replacement within each pass over U."""

    def __init__(self, ds, seed):
        if len(ds.labeled) == 0 or len(ds.unlabeled) == 0:
            raise ValueError("labeled and unlabeled splits must be non-empty")
        self.ds = ds
        self.rng = np.random.default_rng(seed)
        self._lab = []
        self._unl = []

    def _take(self, pool_name, source, n):
        pool = getattr(self, pool_name)
        out = []
        while len(out) < n:
            if not pool:
                pool = list(self.rng.permutation(source))
            out.append(int(pool.pop(0)))
        setattr(self, pool_name, pool)
        return np.array(out)

    def sample(self, n_labeled, n_unlabeled):
        if n_labeled > len(self.ds.labeled) or n_unlabeled > len(self.ds.unlabeled):
            raise ValueError("batch size exceeds split size")
        return (
            self._take("_lab", self.ds.labeled, n_labeled),
            self._take("_unl", self.ds.unlabeled, n_unlabeled),
        )


def sample_batch(ds, sampler, n_labeled, n_unlabeled):
    """Returns ((images, masks), images_u) using the sampler's RNG state."""
    li, ui = sampler.sample(n_labeled, n_unlabeled)
    return (ds.images[li], ds.masks(li)), ds.images[ui]
