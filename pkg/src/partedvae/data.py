"""Dataset provisioning.

Three sources: a procedural 2-D sprite generator with exact ground-truth
factors (shape / scale / orientation / position on a fixed grid), an IDX
binary reader for externally supplied digit data, and a tiny synthetic
sanity task for fast convergence tests. Labeled-subset selection for
semi-supervision lives here too.

Sprites are rendered on demand: a dataset knows its full factor grid and
rasterizes any index deterministically, so holding the complete 737,280-item
grid costs nothing until images are actually requested.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "FactorSpec",
    "LabeledSubset",
    "ImageBatch",
    "SpriteDataset",
    "ArrayDataset",
    "generate_dsprites_lite",
    "read_idx",
    "write_idx",
    "load_mnist_split",
    "save_pvp1",
    "load_pvp1",
    "select_labeled_subset",
    "make_sanity_task",
    "IdxFormatError",
]

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
PVP1_MAGIC = 0x50565031  # "PVP1"


class IdxFormatError(ValueError):
    """Malformed IDX payload; message carries the offending byte offset."""


@dataclass(frozen=True)
class FactorSpec:
    """Names and cardinalities of the generative factors, plus the geometry
    knobs that map factor levels onto the canvas."""

    names: tuple = ("shape", "scale", "orientation", "posX", "posY")
    sizes: tuple = (3, 6, 40, 32, 32)
    half_size_range: tuple = (0.08, 0.15)  # shape half-extent in canvas units
    position_margin: float = 0.22  # keeps the largest rotated square in frame

    def grid_size(self) -> int:
        return int(np.prod(self.sizes))

    def subsampled_sizes(self, stride: tuple | None) -> tuple:
        if stride is None:
            return self.sizes
        if len(stride) != len(self.sizes):
            raise ValueError("subsample stride needs one entry per factor")
        return tuple(int(np.ceil(n / s)) for n, s in zip(self.sizes, stride))


@dataclass
class LabeledSubset:
    indices: np.ndarray
    labels: np.ndarray
    requested: float | int

    def __post_init__(self):
        if len(np.unique(self.indices)) != len(self.indices):
            raise ValueError("labeled subset indices must be unique")

    def __len__(self) -> int:
        return len(self.indices)


@dataclass
class ImageBatch:
    """Float images in [0,1] plus whatever annotations the source carries."""

    images: np.ndarray
    factors: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        if self.images.min() < 0.0 or self.images.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]")

    def __len__(self) -> int:
        return self.images.shape[0]


# -- sprite rasterization -----------------------------------------------------


def _inside(shape_idx: int, lx: np.ndarray, ly: np.ndarray) -> np.ndarray:
    if shape_idx == 0:  # axis-aligned unit square in local coords
        return np.maximum(np.abs(lx), np.abs(ly)) <= 1.0
    if shape_idx == 1:  # ellipse, 0.6 aspect
        return lx * lx + (ly / 0.6) ** 2 <= 1.0
    if shape_idx == 2:  # heart: (x^2+y^2-1)^3 - x^2 y^3 <= 0, scaled into the unit box
        hx = lx * 1.3
        hy = -ly * 1.3  # canvas y grows downward; the heart's lobes point up
        return (hx * hx + hy * hy - 1.0) ** 3 - hx * hx * hy * hy * hy <= 0.0
    raise ValueError(f"unknown shape index {shape_idx}")


class SpriteDataset:
    """Deterministic factor grid of binary sprites.

    Every item is a pure function of its factor tuple; images are rendered
    lazily and optionally cached by :meth:`materialize`.
    """

    SUPERSAMPLE = 4

    def __init__(self, spec: FactorSpec = FactorSpec(), resolution: int = 32, subsample: tuple | None = None):
        if resolution < 16:
            raise ValueError("resolution must be at least 16")
        self.spec = spec
        self.resolution = resolution
        self.subsample = subsample
        self.factor_names = spec.names
        self.factor_sizes = self.spec.subsampled_sizes(subsample)
        # level -> original grid level, per factor
        stride = subsample if subsample is not None else (1,) * len(spec.sizes)
        self.factor_levels = [np.arange(0, n, s) for n, s in zip(spec.sizes, stride)]
        self._images: np.ndarray | None = None
        ss = self.SUPERSAMPLE
        grid = (np.arange(resolution * ss) + 0.5) / (resolution * ss)
        self._px, self._py = np.meshgrid(grid, grid)  # [H*ss, W*ss], x right / y down

    def __len__(self) -> int:
        return int(np.prod(self.factor_sizes))

    @property
    def num_factors(self) -> int:
        return len(self.factor_sizes)

    def factors_of(self, index: int | np.ndarray) -> np.ndarray:
        return np.stack(np.unravel_index(index, self.factor_sizes), axis=-1)

    def index_of(self, levels) -> np.ndarray:
        return np.ravel_multi_index(tuple(np.asarray(levels).T), self.factor_sizes)

    @property
    def factors_array(self) -> np.ndarray:
        return self.factors_of(np.arange(len(self)))

    @property
    def labels(self) -> np.ndarray:
        """Shape class of every item (the supervised variable)."""
        return self.factors_array[:, 0].astype(np.int64)

    def _params_of(self, levels) -> tuple:
        shape_i, scale_i, orient_i, posx_i, posy_i = (int(v) for v in levels)
        sh = self.factor_levels[0][shape_i]
        sc = self.factor_levels[1][scale_i]
        orient = self.factor_levels[2][orient_i]
        px = self.factor_levels[3][posx_i]
        py = self.factor_levels[4][posy_i]
        ns_sh, ns_sc, ns_or, ns_x, ns_y = self.spec.sizes
        lo, hi = self.spec.half_size_range
        half = lo + (hi - lo) * sc / (ns_sc - 1)
        theta = 2.0 * np.pi * orient / ns_or
        m = self.spec.position_margin
        cx = m + (1.0 - 2.0 * m) * px / (ns_x - 1)
        cy = m + (1.0 - 2.0 * m) * py / (ns_y - 1)
        return sh, half, theta, cx, cy

    def render(self, index: int) -> np.ndarray:
        """Binary uint8 image for one grid index."""
        return self._render_block(np.array([index]))[0]

    def _render_block(self, indices: np.ndarray) -> np.ndarray:
        """Rasterize a block of indices at once: [n, H, W] uint8."""
        levels = self.factors_of(indices)
        n = len(indices)
        sh = np.empty(n, dtype=np.int64)
        half = np.empty(n)
        theta = np.empty(n)
        cx = np.empty(n)
        cy = np.empty(n)
        for row in range(n):
            sh[row], half[row], theta[row], cx[row], cy[row] = self._params_of(levels[row])
        px = self._px.reshape(-1)[None, :].astype(np.float32)
        py = self._py.reshape(-1)[None, :].astype(np.float32)
        dx = px - cx[:, None].astype(np.float32)
        dy = py - cy[:, None].astype(np.float32)
        cos_t = np.cos(theta)[:, None].astype(np.float32)
        sin_t = np.sin(theta)[:, None].astype(np.float32)
        inv = (1.0 / half[:, None]).astype(np.float32)
        lx = (cos_t * dx + sin_t * dy) * inv
        ly = (cos_t * dy - sin_t * dx) * inv
        mask = np.empty(lx.shape, dtype=bool)
        for s in np.unique(sh):
            rows = sh == s
            mask[rows] = _inside(int(s), lx[rows], ly[rows])
        ss = self.SUPERSAMPLE
        r = self.resolution
        coverage = mask.reshape(n, r, ss, r, ss).mean(axis=(2, 4))
        return (coverage >= 0.5).astype(np.uint8)

    def materialize(self) -> np.ndarray:
        """Render and cache the whole grid (use only on subsampled grids)."""
        if self._images is None:
            n = len(self)
            imgs = np.empty((n, 1, self.resolution, self.resolution), dtype=np.uint8)
            for lo in range(0, n, 256):
                hi = min(lo + 256, n)
                imgs[lo:hi, 0] = self._render_block(np.arange(lo, hi))
            self._images = imgs
        return self._images

    def image_batch(self, indices) -> np.ndarray:
        """Float32 images in [0,1] for the given indices."""
        indices = np.asarray(indices)
        if self._images is not None:
            return self._images[indices].astype(np.float32)
        out = np.empty((len(indices), 1, self.resolution, self.resolution), dtype=np.float32)
        for lo in range(0, len(indices), 256):
            hi = min(lo + 256, len(indices))
            out[lo:hi, 0] = self._render_block(indices[lo:hi])
        return out

    def sample_fixed_factor_batch(self, factor_index: int, count: int, rng: np.random.Generator):
        """Metric-protocol sampler: one factor pinned to a random level,
        all other factors drawn uniformly."""
        levels = np.stack([rng.integers(0, n, size=count) for n in self.factor_sizes], axis=1)
        levels[:, factor_index] = rng.integers(0, self.factor_sizes[factor_index])
        return self.image_batch(self.index_of(levels)), levels


def generate_dsprites_lite(
    resolution: int = 32,
    factor_grid: FactorSpec = FactorSpec(),
    subsample: tuple | None = None,
) -> SpriteDataset:
    return SpriteDataset(factor_grid, resolution=resolution, subsample=subsample)


# -- generic in-memory dataset ------------------------------------------------


@dataclass
class ArrayDataset:
    """Images already in memory (digits, sanity task); float access in [0,1]."""

    images: np.ndarray  # [N,1,H,W], uint8 (scaled by /255) or float32
    labels: np.ndarray | None = None
    factor_values: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.images.shape[0]

    def image_batch(self, indices) -> np.ndarray:
        batch = self.images[np.asarray(indices)]
        if batch.dtype == np.uint8:
            return batch.astype(np.float32) / 255.0
        return batch.astype(np.float32, copy=False)


# -- IDX parsing ---------------------------------------------------------------


def read_idx(path) -> np.ndarray:
    """Parse an IDX file into raw uint8 arrays: [N,H,W] images or [N] labels.

    Only the two layouts used by digit archives are accepted (unsigned-byte
    payload, rank 1 or 3); anything else is rejected with the byte offset of
    the offending field.
    """
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated magic at byte offset 0 (file has {len(raw)} bytes)")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic == IDX_IMAGES_MAGIC:
        rank = 3
    elif magic == IDX_LABELS_MAGIC:
        rank = 1
    else:
        raise IdxFormatError(f"{path}: unsupported type/rank magic 0x{magic:08x} at byte offset 0")
    header_len = 4 + 4 * rank
    if len(raw) < header_len:
        raise IdxFormatError(f"{path}: truncated dimension table at byte offset {len(raw)}")
    dims = struct.unpack(f">{rank}I", raw[4:header_len])
    count = 1
    for i, d in enumerate(dims):
        if d > 2**31 or count * max(d, 1) > 2**33:
            raise IdxFormatError(f"{path}: dimension overflow at byte offset {4 + 4 * i}")
        count *= d
    if len(raw) != header_len + count:
        raise IdxFormatError(
            f"{path}: payload size mismatch at byte offset {header_len} "
            f"(expected {count} bytes, found {len(raw) - header_len})"
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=header_len).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    """Inverse of read_idx for uint8 arrays of rank 1 (labels) or 3 (images)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    if array.ndim == 3:
        magic = IDX_IMAGES_MAGIC
    elif array.ndim == 1:
        magic = IDX_LABELS_MAGIC
    else:
        raise ValueError(f"IDX writer supports rank 1 or 3, got rank {array.ndim}")
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(f">{array.ndim}I", *array.shape))
        f.write(array.tobytes())


def _pad_to_32(images: np.ndarray) -> np.ndarray:
    n, h, w = images.shape
    if (h, w) == (32, 32):
        return images
    if h > 32 or w > 32:
        raise ValueError(f"cannot pad {h}x{w} images up to 32x32")
    top, left = (32 - h) // 2, (32 - w) // 2
    out = np.zeros((n, 32, 32), dtype=images.dtype)
    out[:, top : top + h, left : left + w] = images
    return out


def load_mnist_split(images_path, labels_path) -> ArrayDataset:
    """Digit images scaled to [0,1] equivalent (uint8 storage), zero-padded
    to 32x32, with their labels."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3:
        raise IdxFormatError(f"{images_path}: expected an image file")
    if labels.ndim != 1 or labels.shape[0] != images.shape[0]:
        raise IdxFormatError(f"{labels_path}: label count does not match image count")
    return ArrayDataset(images=_pad_to_32(images)[:, None, :, :], labels=labels.astype(np.int64))


# -- PVP1 sprite cache ----------------------------------------------------------


def save_pvp1(path, images: np.ndarray, factor_sizes, factors: np.ndarray) -> None:
    """Flat little-endian cache: header, factor cardinalities (u32), per-item
    factor tuples (u16), then one byte per binarized pixel."""
    images = np.ascontiguousarray(images, dtype=np.uint8)
    n, _, h, w = images.shape
    factors = np.ascontiguousarray(factors, dtype="<u2")
    with open(path, "wb") as f:
        f.write(struct.pack("<5I", PVP1_MAGIC, n, h, w, len(factor_sizes)))
        f.write(struct.pack(f"<{len(factor_sizes)}I", *factor_sizes))
        f.write(factors.tobytes())
        f.write((images[:, 0] > 0).astype(np.uint8).tobytes())


def load_pvp1(path):
    with open(path, "rb") as f:
        raw = f.read()
    magic, n, h, w, nf = struct.unpack("<5I", raw[:20])
    if magic != PVP1_MAGIC:
        raise ValueError(f"{path}: not a PVP1 cache (magic 0x{magic:08x})")
    sizes = struct.unpack(f"<{nf}I", raw[20 : 20 + 4 * nf])
    off = 20 + 4 * nf
    factors = np.frombuffer(raw, dtype="<u2", count=n * nf, offset=off).reshape(n, nf)
    off += 2 * n * nf
    images = np.frombuffer(raw, dtype=np.uint8, count=n * h * w, offset=off).reshape(n, 1, h, w)
    return images, sizes, factors


# -- semi-supervision ------------------------------------------------------------


def select_labeled_subset(
    dataset,
    budget: int | float,
    rng: np.random.Generator,
    stratified: bool = False,
) -> LabeledSubset:
    """Pick the indices whose labels the supervised loss may see.

    An integer budget is a count; a float is a fraction of the dataset.
    Stratified mode balances the count across label classes.
    """
    n = len(dataset)
    count = int(budget * n) if isinstance(budget, float) else int(budget)
    if count > n:
        raise ValueError(f"label budget {count} exceeds dataset size {n}")
    labels = np.asarray(dataset.labels)
    if count == 0:
        return LabeledSubset(np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64), budget)
    if not stratified:
        indices = rng.choice(n, size=count, replace=False)
    else:
        classes = np.unique(labels)
        per_class, extra = divmod(count, len(classes))
        chunks = []
        for i, cls in enumerate(classes):
            pool = np.flatnonzero(labels == cls)
            take = per_class + (1 if i < extra else 0)
            if take > len(pool):
                raise ValueError(f"class {cls} has only {len(pool)} items, need {take}")
            chunks.append(rng.choice(pool, size=take, replace=False))
        indices = np.concatenate(chunks)
    indices = np.sort(indices).astype(np.int64)
    return LabeledSubset(indices, labels[indices].astype(np.int64), budget)


# -- sanity task -------------------------------------------------------------------


def make_sanity_task(rng: np.random.Generator, count: int = 2000) -> ArrayDataset:
    """Two linearly separable 8x8 'classes' (lit left half vs lit right half)
    with a single continuous nuisance factor, the lighting brightness."""
    assert count % 2 == 0
    brightness = rng.uniform(0.5, 1.0, size=count).astype(np.float32)
    labels = np.zeros(count, dtype=np.int64)
    labels[count // 2 :] = 1
    perm = rng.permutation(count)
    brightness, labels = brightness[perm], labels[perm]
    images = np.zeros((count, 1, 8, 8), dtype=np.float32)
    images[labels == 0, 0, :, :4] = brightness[labels == 0, None, None]
    images[labels == 1, 0, :, 4:] = brightness[labels == 1, None, None]
    return ArrayDataset(images=images, labels=labels, factor_values={"brightness": brightness})
