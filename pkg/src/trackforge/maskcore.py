"""Binary / labeled masks and their exact set and geometry operations."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from numpy.typing import NDArray


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


class Bitmask:
    """Row-major boolean occupancy grid of shape ``(height, width)``.

    Instances are immutable; the backing array is marked read-only.
    """

    __slots__ = ("_bits",)

    def __init__(self, bits: NDArray) -> None:
        bits = np.asarray(bits)
        if bits.ndim != 2:
            raise ValueError(f"bitmask must be 2-D, got shape {bits.shape}")
        if bits.shape[0] < 1 or bits.shape[1] < 1:
            raise ValueError(f"zero-size frame {bits.shape}")
        self._bits = _frozen(bits.astype(bool, copy=True))

    @classmethod
    def empty(cls, width: int, height: int) -> Bitmask:
        return cls(np.zeros((height, width), dtype=bool))

    @classmethod
    def full(cls, width: int, height: int) -> Bitmask:
        return cls(np.ones((height, width), dtype=bool))

    @classmethod
    def from_points(cls, width: int, height: int, points: Iterable[tuple[int, int]]) -> Bitmask:
        """Build a mask from ``(x, y)`` pixel coordinates."""
        bits = np.zeros((height, width), dtype=bool)
        for x, y in points:
            bits[y, x] = True
        return cls(bits)

    @property
    def bits(self) -> NDArray[np.bool_]:
        return self._bits

    @property
    def width(self) -> int:
        return self._bits.shape[1]

    @property
    def height(self) -> int:
        return self._bits.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self._bits.shape  # type: ignore[return-value]

    def area(self) -> int:
        return int(np.count_nonzero(self._bits))

    def is_empty(self) -> bool:
        return not self._bits.any()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Bitmask):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self._bits, other._bits))

    def __hash__(self) -> int:
        return hash((self.shape, self._bits.tobytes()))

    def __and__(self, other: Bitmask) -> Bitmask:
        _check_same_dims(self, other)
        return Bitmask(self._bits & other._bits)

    def __or__(self, other: Bitmask) -> Bitmask:
        _check_same_dims(self, other)
        return Bitmask(self._bits | other._bits)

    def __repr__(self) -> str:
        return f"Bitmask({self.width}x{self.height}, area={self.area()})"


class LabelMap:
    """Per-pixel object ids, 0 for background and 1..M for objects."""

    __slots__ = ("_labels", "_num_objects")

    def __init__(self, labels: NDArray, num_objects: int) -> None:
        labels = np.asarray(labels)
        if labels.ndim != 2:
            raise ValueError(f"label map must be 2-D, got shape {labels.shape}")
        if labels.shape[0] < 1 or labels.shape[1] < 1:
            raise ValueError(f"zero-size frame {labels.shape}")
        if num_objects < 0:
            raise ValueError("object count must be non-negative")
        if labels.size and (labels.min() < 0 or labels.max() > num_objects):
            raise ValueError(
                f"labels outside 0..{num_objects}: range [{labels.min()}, {labels.max()}]"
            )
        self._labels = _frozen(labels.astype(np.int32, copy=True))
        self._num_objects = int(num_objects)

    @classmethod
    def background(cls, width: int, height: int, num_objects: int) -> LabelMap:
        return cls(np.zeros((height, width), dtype=np.int32), num_objects)

    @property
    def labels(self) -> NDArray[np.int32]:
        return self._labels

    @property
    def num_objects(self) -> int:
        return self._num_objects

    @property
    def width(self) -> int:
        return self._labels.shape[1]

    @property
    def height(self) -> int:
        return self._labels.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self._labels.shape  # type: ignore[return-value]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LabelMap):
            return NotImplemented
        return self._num_objects == other._num_objects and bool(
            np.array_equal(self._labels, other._labels)
        )

    def __hash__(self) -> int:
        return hash((self._num_objects, self.shape, self._labels.tobytes()))

    def __repr__(self) -> str:
        return f"LabelMap({self.width}x{self.height}, M={self._num_objects})"


@dataclass(frozen=True)
class Box:
    """Axis-aligned box with inclusive pixel coordinates."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self) -> None:
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"degenerate box {self}")

    @property
    def width(self) -> int:
        return self.x_max - self.x_min + 1

    @property
    def height(self) -> int:
        return self.y_max - self.y_min + 1

    def within(self, width: int, height: int) -> bool:
        return self.x_min >= 0 and self.y_min >= 0 and self.x_max < width and self.y_max < height

    def to_mask(self, width: int, height: int) -> Bitmask:
        bits = np.zeros((height, width), dtype=bool)
        bits[self.y_min : self.y_max + 1, self.x_min : self.x_max + 1] = True
        return Bitmask(bits)


@dataclass(frozen=True)
class RleMask:
    """Row-major run lengths, alternating background/foreground, background first."""

    width: int
    height: int
    runs: tuple[int, ...]


def _check_same_dims(a: Bitmask, b: Bitmask) -> None:
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.width}x{a.height} vs {b.width}x{b.height}")


def iou(a: Bitmask, b: Bitmask) -> float:
    """Intersection over union; two empty masks count as a perfect match (1.0)."""
    _check_same_dims(a, b)
    union = int(np.count_nonzero(a.bits | b.bits))
    if union == 0:
        return 1.0
    inter = int(np.count_nonzero(a.bits & b.bits))
    return inter / union


def enclosing_box(m: Bitmask) -> Box | None:
    ys, xs = np.nonzero(m.bits)
    if xs.size == 0:
        return None
    return Box(int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))


def split(labelmap: LabelMap, num_objects: int | None = None) -> list[Bitmask]:
    """One mask per object id 1..M."""
    m = labelmap.num_objects if num_objects is None else num_objects
    if m < 1:
        raise ValueError("object count must be >= 1")
    labels = labelmap.labels
    if labels.max() > m:
        raise ValueError(f"label {int(labels.max())} exceeds object count {m}")
    return [Bitmask(labels == i) for i in range(1, m + 1)]


def merge(masks: Sequence[Bitmask]) -> LabelMap:
    """Inverse of :func:`split`. Overlapping pixels go to the highest object index."""
    if not masks:
        raise ValueError("merge needs at least one mask")
    shape = masks[0].shape
    labels = np.zeros(shape, dtype=np.int32)
    for i, mask in enumerate(masks, start=1):
        if mask.shape != shape:
            raise ValueError(f"dimension mismatch: {mask.shape} vs {shape}")
        labels[mask.bits] = i
    return LabelMap(labels, len(masks))


def nearest_indices(src: int, dst: int) -> NDArray[np.intp]:
    """Source index sampled by each destination index under nearest-neighbor scaling."""
    return (np.arange(dst, dtype=np.int64) * src) // dst


def resample_array(arr: NDArray, new_w: int, new_h: int) -> NDArray:
    if new_w < 1 or new_h < 1:
        raise ValueError(f"target dims must be >= 1, got {new_w}x{new_h}")
    h, w = arr.shape[:2]
    if (h, w) == (new_h, new_w):
        return arr.copy()
    rows = nearest_indices(h, new_h)
    cols = nearest_indices(w, new_w)
    return arr[rows][:, cols]


def resample(m: Bitmask, new_w: int, new_h: int) -> Bitmask:
    """Nearest-neighbor rescale of a mask."""
    return Bitmask(resample_array(m.bits, new_w, new_h))


def resample_labels(labelmap: LabelMap, new_w: int, new_h: int) -> LabelMap:
    return LabelMap(resample_array(labelmap.labels, new_w, new_h), labelmap.num_objects)


def rle_encode(m: Bitmask) -> RleMask:
    flat = m.bits.ravel().astype(np.int8)
    edges = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate(([0], edges, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs = [0] + runs
    return RleMask(m.width, m.height, tuple(int(r) for r in runs))


def rle_decode(r: RleMask) -> Bitmask:
    if r.width < 1 or r.height < 1:
        raise ValueError(f"zero-size frame {r.width}x{r.height}")
    runs = r.runs
    if not runs:
        raise ValueError("empty run list")
    if any(n < 0 for n in runs):
        raise ValueError("negative run length")
    if any(n == 0 for n in runs[1:]):
        raise ValueError("non-canonical run list (zero-length interior run)")
    total = sum(runs)
    if total != r.width * r.height:
        raise ValueError(f"runs sum to {total}, expected {r.width * r.height}")
    values = np.arange(len(runs)) % 2 == 1
    flat = np.repeat(values, runs)
    return Bitmask(flat.reshape(r.height, r.width))


def format_rle(r: RleMask) -> str:
    """Serialize as the text line ``w h r0 r1 ...``."""
    return " ".join(str(v) for v in (r.width, r.height, *r.runs))


def parse_rle(line: str) -> RleMask:
    parts = line.split()
    if len(parts) < 3:
        raise ValueError(f"malformed RLE line: {line!r}")
    try:
        values = [int(p) for p in parts]
    except ValueError as exc:
        raise ValueError(f"malformed RLE line: {line!r}") from exc
    rle = RleMask(values[0], values[1], tuple(values[2:]))
    rle_decode(rle)  # validates
    return rle
