"""Box-prompted mask refinement and the IoU-gated selector.

The refiner itself is pluggable. The bundled kinds are deterministic mocks
that stand in for a promptable segmentation model; the selector keeps the
refined mask only when it strictly agrees with the proposal above ``tau``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
from scipy import ndimage

from .maskcore import Bitmask, Box, enclosing_box, iou, merge
from .propagation import FrameResult


@dataclass(frozen=True)
class IdentityRefiner:
    def spec(self) -> str:
        return "identity"


@dataclass(frozen=True)
class DilateRefiner:
    radius: int

    def __post_init__(self) -> None:
        if self.radius < 0:
            raise ValueError("dilation radius must be >= 0")

    def spec(self) -> str:
        return f"dilate:{self.radius}"


@dataclass(frozen=True)
class NoiseRefiner:
    flip_prob: float
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip probability must lie in [0, 1]")

    def spec(self) -> str:
        return f"noise:{self.flip_prob}:{self.seed}"


@dataclass(frozen=True)
class OracleSnapRefiner:
    """Returns ground truth for good proposals and a wrong blob for bad ones."""

    improve_above: float
    degrade_below: float
    seed: int = 0

    def __post_init__(self) -> None:
        for v in (self.improve_above, self.degrade_below):
            if not 0.0 <= v <= 1.0:
                raise ValueError("oracle thresholds must lie in [0, 1]")

    def spec(self) -> str:
        return f"oracle:{self.improve_above}:{self.degrade_below}:{self.seed}"


RefinerKind = Union[IdentityRefiner, DilateRefiner, NoiseRefiner, OracleSnapRefiner]


def parse_refiner(text: str) -> RefinerKind:
    """Parse ``identity | dilate:r | noise:p:seed | oracle:hi:lo:seed``."""
    name, *args = text.split(":")
    try:
        if name == "identity" and not args:
            return IdentityRefiner()
        if name == "dilate" and len(args) == 1:
            return DilateRefiner(int(args[0]))
        if name == "noise" and len(args) in (1, 2):
            return NoiseRefiner(float(args[0]), int(args[1]) if len(args) > 1 else 0)
        if name == "oracle" and len(args) in (2, 3):
            return OracleSnapRefiner(float(args[0]), float(args[1]), int(args[2]) if len(args) > 2 else 0)
    except ValueError as exc:
        raise ValueError(f"bad refiner spec {text!r}: {exc}") from exc
    raise ValueError(f"bad refiner spec {text!r}")


def needs_ground_truth(kind: RefinerKind) -> bool:
    return isinstance(kind, OracleSnapRefiner)


@dataclass(frozen=True)
class SelectionDecision:
    object_id: int
    iou_vmos_refined: float
    chosen: str  # "vmos" or "refined"


def _box_region(box: Box, shape: tuple[int, int]) -> np.ndarray:
    region = np.zeros(shape, dtype=bool)
    region[box.y_min : box.y_max + 1, box.x_min : box.x_max + 1] = True
    return region


def _disk(radius: int) -> np.ndarray:
    yy, xx = np.mgrid[-radius : radius + 1, -radius : radius + 1]
    return xx * xx + yy * yy <= radius * radius


def _wrong_blob(box: Box, vmos: Bitmask, gt: Bitmask, rng: np.random.Generator) -> Bitmask:
    """A seeded region inside the box that avoids both the proposal and the truth."""
    free = _box_region(box, vmos.shape) & ~vmos.bits & ~gt.bits
    if not free.any():
        return Bitmask(np.zeros(vmos.shape, dtype=bool))
    bw = max(1, (box.width + 1) // 2)
    bh = max(1, (box.height + 1) // 2)
    x0 = box.x_min + int(rng.integers(0, box.width - bw + 1))
    y0 = box.y_min + int(rng.integers(0, box.height - bh + 1))
    blob = np.zeros(vmos.shape, dtype=bool)
    blob[y0 : y0 + bh, x0 : x0 + bw] = True
    blob &= free
    return Bitmask(blob if blob.any() else free)


def refine(
    kind: RefinerKind,
    image: np.ndarray | None,
    box: Box,
    vmos_mask: Bitmask,
    gt_mask: Bitmask | None = None,
    key: Sequence[int] = (),
) -> Bitmask:
    """Run a mock refiner on one box prompt.

    ``key`` salts the seeded kinds (typically ``(frame, object)``) so each
    prompt draws its own reproducible noise.
    """
    if not box.within(vmos_mask.width, vmos_mask.height):
        raise ValueError(f"box {box} outside {vmos_mask.width}x{vmos_mask.height} frame")
    if isinstance(kind, IdentityRefiner):
        return vmos_mask
    if isinstance(kind, DilateRefiner):
        grown = ndimage.binary_dilation(vmos_mask.bits, structure=_disk(kind.radius))
        return Bitmask(grown & _box_region(box, vmos_mask.shape))
    if isinstance(kind, NoiseRefiner):
        rng = np.random.default_rng([kind.seed, *key])
        flips = (rng.random(vmos_mask.shape) < kind.flip_prob) & _box_region(box, vmos_mask.shape)
        return Bitmask(vmos_mask.bits ^ flips)
    if isinstance(kind, OracleSnapRefiner):
        if gt_mask is None:
            raise ValueError("oracle refiner needs the ground-truth mask")
        quality = iou(vmos_mask, gt_mask)
        if quality >= kind.improve_above:
            return gt_mask
        if quality < kind.degrade_below:
            return _wrong_blob(box, vmos_mask, gt_mask, np.random.default_rng([kind.seed, *key]))
        return vmos_mask
    raise TypeError(f"unknown refiner kind {kind!r}")


def extract_prompts(fr: FrameResult) -> list[tuple[int, Box]]:
    """Enclosing box of every non-empty object mask."""
    prompts = []
    for obj, mask in enumerate(fr.masks, start=1):
        box = enclosing_box(mask)
        if box is not None:
            prompts.append((obj, box))
    return prompts


def select(
    vmos_mask: Bitmask, refined_mask: Bitmask, tau: float, object_id: int = 0
) -> tuple[Bitmask, SelectionDecision]:
    """Take the refined mask only if its IoU with the proposal is strictly above ``tau``."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    agreement = iou(vmos_mask, refined_mask)
    if agreement > tau:
        return refined_mask, SelectionDecision(object_id, agreement, "refined")
    return vmos_mask, SelectionDecision(object_id, agreement, "vmos")


def refine_frame(
    fr: FrameResult,
    kind: RefinerKind,
    tau: float,
    image: np.ndarray | None = None,
    gt_masks: Sequence[Bitmask] | None = None,
    refine_all: bool = False,
) -> tuple[FrameResult, list[SelectionDecision]]:
    """Prompt, refine and select for every object, then re-merge the masks.

    With ``refine_all`` the gate is bypassed and every refined mask is kept.
    Objects with empty masks get no prompt and pass through unchanged.
    """
    masks = fr.masks
    out = list(masks)
    decisions = []
    for obj, box in extract_prompts(fr):
        vmos = masks[obj - 1]
        gt = gt_masks[obj - 1] if gt_masks is not None else None
        refined = refine(kind, image, box, vmos, gt, key=(fr.frame_index, obj))
        if refine_all:
            decision = SelectionDecision(obj, iou(vmos, refined), "refined")
            chosen = refined
        else:
            chosen, decision = select(vmos, refined, tau, obj)
        out[obj - 1] = chosen
        decisions.append(decision)
    return FrameResult(fr.frame_index, merge(out), fr.confidences), decisions
