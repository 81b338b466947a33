"""Clustering-based color quantizers and Floyd-Steinberg dithering.

All functions take ``(H, W, 3)`` float images in ``[0, 1]`` and return an
:class:`IndexedImage`.  They are deterministic: equal inputs give equal
outputs byte for byte.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvariantError


@dataclass(eq=False)
class IndexedImage:
    """Index map plus palette; ``palette[index_map]`` is the quantized image."""

    index_map: np.ndarray  # (H, W) integer
    palette: np.ndarray  # (P, 3) float in [0, 1]
    nominal_colors: int

    def __post_init__(self):
        self.index_map = np.asarray(self.index_map, dtype=np.int64)
        self.palette = np.asarray(self.palette, dtype=np.float64).reshape(-1, 3)
        if self.index_map.ndim != 2:
            raise InvariantError(f"index map must be 2-D, got shape {self.index_map.shape}")
        if len(self.palette) > self.nominal_colors:
            raise InvariantError(
                f"palette has {len(self.palette)} entries, more than {self.nominal_colors}")
        if self.index_map.size and (self.index_map.min() < 0
                                    or self.index_map.max() >= len(self.palette)):
            raise InvariantError("index map references a missing palette entry")

    @property
    def shape(self) -> tuple[int, int]:
        return self.index_map.shape

    def reconstruct(self) -> np.ndarray:
        return self.palette[self.index_map]

    def used_indices(self) -> np.ndarray:
        return np.unique(self.index_map)

    def num_used_colors(self) -> int:
        """Distinct colors actually present in the reconstruction."""
        used = self.palette[self.used_indices()]
        return len(np.unique(used, axis=0))

    def compact(self) -> "IndexedImage":
        """Drop palette entries no pixel references, keeping relative order."""
        used = self.used_indices()
        remap = np.full(len(self.palette), -1, dtype=np.int64)
        remap[used] = np.arange(len(used))
        return IndexedImage(remap[self.index_map], self.palette[used], self.nominal_colors)

    def __eq__(self, other):
        if not isinstance(other, IndexedImage):
            return NotImplemented
        return (self.nominal_colors == other.nominal_colors
                and np.array_equal(self.index_map, other.index_map)
                and np.array_equal(self.palette, other.palette))


def _as_image(image) -> np.ndarray:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {img.shape}")
    if img.dtype == np.uint8:
        return img.astype(np.float64) / 255.0
    return img.astype(np.float64)


def group_means(pixels: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """Mean color of each label group; empty groups get 0.

    Groups whose pixels are all identical return that exact color, so
    quantizing an image that already has few colors is lossless.
    """
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    sums = np.stack([np.bincount(labels, weights=pixels[:, ch], minlength=k)
                     for ch in range(3)], axis=1)
    means = np.divide(sums, counts[:, None], out=np.zeros((k, 3)), where=counts[:, None] > 0)
    lo = np.full((k, 3), np.inf)
    hi = np.full((k, 3), -np.inf)
    np.minimum.at(lo, labels, pixels)
    np.maximum.at(hi, labels, pixels)
    constant = (counts > 0) & np.all(lo == hi, axis=1)
    means[constant] = lo[constant]
    return means


def median_cut(image, colors: int) -> IndexedImage:
    """Heckbert-style median cut.

    The box with the widest single-channel range is split at the median
    pixel value along that channel.  Splits are made on value thresholds
    so that equal colors always land in the same box, and boxes holding a
    single distinct color are never split.
    """
    if colors < 1:
        raise ValueError("colors must be >= 1")
    img = _as_image(image)
    h, w, _ = img.shape
    pixels = img.reshape(-1, 3)
    boxes = [np.arange(len(pixels))]
    ranges = [np.ptp(pixels, axis=0)]
    while len(boxes) < colors:
        widths = [r.max() for r in ranges]
        best = int(np.argmax(widths))
        if widths[best] <= 0:
            break
        members = boxes[best]
        channel = int(np.argmax(ranges[best]))
        values = pixels[members, channel]
        median = np.sort(values, kind="stable")[len(values) // 2]
        left = values < median
        if not left.any():
            left = values <= median
        lo_idx, hi_idx = members[left], members[~left]
        boxes[best] = lo_idx
        ranges[best] = np.ptp(pixels[lo_idx], axis=0)
        boxes.append(hi_idx)
        ranges.append(np.ptp(pixels[hi_idx], axis=0))
    labels = np.empty(len(pixels), dtype=np.int64)
    for k, members in enumerate(boxes):
        labels[members] = k
    palette = group_means(pixels, labels, len(boxes))
    return IndexedImage(labels.reshape(h, w), palette, colors)


class _OctreeNode:
    __slots__ = ("children", "count", "level", "leaf_colors", "is_leaf")

    def __init__(self, level: int):
        self.children: list[_OctreeNode | None] = [None] * 8
        self.count = 0
        self.level = level
        self.leaf_colors: list[int] = []  # unique-color ids absorbed by this leaf
        self.is_leaf = level == 8


def octree_quantize(image, colors: int) -> IndexedImage:
    """Gervautz-Purgathofer octree quantization at full 8-bit depth.

    Leaves are reduced until at most ``colors`` remain.  Each reduction
    folds the deepest, least-populated internal node into a leaf, breaking
    ties by creation order.  Palette entries are means of the original
    pixels in each surviving leaf.
    """
    if colors < 1:
        raise ValueError("colors must be >= 1")
    img = _as_image(image)
    h, w, _ = img.shape
    pixels = img.reshape(-1, 3)
    q = np.clip(np.round(pixels * 255), 0, 255).astype(np.int64)
    uniq, inverse, counts = np.unique(q, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)

    root = _OctreeNode(0)
    internal: list[list[_OctreeNode]] = [[] for _ in range(8)]
    internal[0].append(root)
    n_leaves = 0
    for cid, (rgb, cnt) in enumerate(zip(uniq.tolist(), counts.tolist())):
        node = root
        node.count += cnt
        for level in range(8):
            shift = 7 - level
            octant = (((rgb[0] >> shift) & 1) << 2) | (((rgb[1] >> shift) & 1) << 1) | ((rgb[2] >> shift) & 1)
            child = node.children[octant]
            if child is None:
                child = node.children[octant] = _OctreeNode(level + 1)
                if child.is_leaf:
                    n_leaves += 1
                else:
                    internal[level + 1].append(child)
            child.count += cnt
            node = child
        node.leaf_colors.append(cid)

    while n_leaves > colors:
        level = max(lv for lv in range(8) if internal[lv])
        candidates = internal[level]
        pick = min(range(len(candidates)), key=lambda i: (candidates[i].count, i))
        node = candidates.pop(pick)
        kids = [c for c in node.children if c is not None]
        for c in kids:
            node.leaf_colors.extend(c.leaf_colors)
        node.children = [None] * 8
        node.is_leaf = True
        n_leaves -= len(kids) - 1

    leaves: list[_OctreeNode] = []
    stack = [root]
    while stack:
        node = stack.pop()
        if node.is_leaf:
            leaves.append(node)
            continue
        stack.extend(c for c in reversed(node.children) if c is not None)
    color_to_leaf = np.empty(len(uniq), dtype=np.int64)
    for k, leaf in enumerate(leaves):
        color_to_leaf[leaf.leaf_colors] = k
    labels = color_to_leaf[inverse]
    palette = group_means(pixels, labels, len(leaves))
    return IndexedImage(labels.reshape(h, w), palette, colors)


def nearest_palette_map(image, palette) -> IndexedImage:
    """Map each pixel to the palette entry at least squared RGB distance.

    Ties go to the lowest palette index.
    """
    pal = np.asarray(palette, dtype=np.float64).reshape(-1, 3)
    if len(pal) == 0:
        raise ValueError("palette must not be empty")
    img = _as_image(image)
    h, w, _ = img.shape
    d = ((img.reshape(-1, 1, 3) - pal[None]) ** 2).sum(-1)
    return IndexedImage(np.argmin(d, axis=1).reshape(h, w), pal, len(pal))


_FS_WEIGHTS = ((0, 1, 7 / 16), (1, -1, 3 / 16), (1, 0, 5 / 16), (1, 1, 1 / 16))


def dither(image, palette, clamp: tuple[float, float] = (-0.5, 1.5)) -> IndexedImage:
    """Floyd-Steinberg error diffusion onto a fixed palette, raster order.

    Working values are clamped to ``clamp`` after each diffusion step.
    """
    pal = np.asarray(palette, dtype=np.float64).reshape(-1, 3)
    if len(pal) == 0:
        raise ValueError("palette must not be empty")
    work = _as_image(image).copy()
    h, w, _ = work.shape
    out = np.empty((h, w), dtype=np.int64)
    lo, hi = clamp
    for y in range(h):
        row = work[y]
        for x in range(w):
            px = row[x]
            k = int(np.argmin(((pal - px) ** 2).sum(1)))
            out[y, x] = k
            err = px - pal[k]
            if not err.any():
                continue
            for dy, dx, wt in _FS_WEIGHTS:
                yy, xx = y + dy, x + dx
                if yy < h and 0 <= xx < w:
                    work[yy, xx] = np.clip(work[yy, xx] + err * wt, lo, hi)
    return IndexedImage(out, pal, len(pal))


def median_cut_dither(image, colors: int) -> IndexedImage:
    """MedianCut palette followed by error diffusion onto that palette."""
    base = median_cut(image, colors)
    result = dither(image, base.palette)
    return IndexedImage(result.index_map, result.palette, colors)


def to_hard_assignment(ix: IndexedImage, colors: int) -> np.ndarray:
    """One-hot ``(H, W, colors)`` map of ``ix.index_map``."""
    if ix.index_map.size and (ix.index_map.min() < 0 or ix.index_map.max() >= colors):
        raise InvariantError(f"index outside [0, {colors})")
    if len(ix.palette) > colors:
        raise InvariantError(f"palette of {len(ix.palette)} exceeds {colors} colors")
    return np.eye(colors, dtype=np.float32)[ix.index_map]


QUANTIZERS = {
    "mediancut": median_cut,
    "octree": octree_quantize,
    "mediancut+dither": median_cut_dither,
}
