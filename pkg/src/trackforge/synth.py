"""Deterministic synthetic sequences with occlusion, absence, distractors and scale change.

Scenes are described in JSON::

    {
      "width": 96, "height": 96, "length": 60, "seed": 3,
      "background": {"level": 0.15, "texture": 0.06},
      "objects": [
        {"shape": "rect", "gray": 0.7, "depth": 0,
         "size": [[0, 28, 28]],             # keyframes [t, w, h]
         "position": [[0, 48, 48]],         # keyframes [t, cx, cy]
         "visible": [[0, 60]]}              # [start, end) intervals
      ],
      "distractors": [{"clone_of": 1, "offset": [[0, 30, 0]], "depth": 1}]
    }

Trajectories are piecewise linear and held constant outside the keyframes.
``depth`` 0 is nearest to the camera; depths across objects and distractors
form a permutation. A pixel belongs to a shape when its centre lies inside:
``cx - w/2 <= x + 0.5 < cx + w/2`` for rects (same for y), and
``(x + 0.5 - cx)^2 + (y + 0.5 - cy)^2 <= (w/2)^2`` for disks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterator

import numpy as np

from .maskcore import LabelMap

PRESETS = ("occlusion", "reappear", "distractor", "tiny", "long10k")


def _keyframes(raw, width: int, name: str) -> tuple[tuple[float, ...], ...]:
    rows = tuple(tuple(float(v) for v in row) for row in raw)
    if not rows:
        raise ValueError(f"{name}: needs at least one keyframe")
    for row in rows:
        if len(row) != width:
            raise ValueError(f"{name}: keyframe {row} should have {width} values")
    times = [r[0] for r in rows]
    if times != sorted(times) or len(set(times)) != len(times):
        raise ValueError(f"{name}: keyframe times must be strictly increasing")
    return rows


def _interp(keys: tuple[tuple[float, ...], ...], t: float) -> tuple[float, ...]:
    times = [k[0] for k in keys]
    return tuple(float(np.interp(t, times, [k[i] for k in keys])) for i in range(1, len(keys[0])))


@dataclass(frozen=True)
class ObjectSpec:
    shape: str
    gray: float
    depth: int
    size: tuple[tuple[float, ...], ...]
    position: tuple[tuple[float, ...], ...]
    visible: tuple[tuple[int, int], ...] | None = None

    def size_at(self, t: int) -> tuple[float, float]:
        return _interp(self.size, t)  # type: ignore[return-value]

    def position_at(self, t: int) -> tuple[float, float]:
        return _interp(self.position, t)  # type: ignore[return-value]

    def present_at(self, t: int) -> bool:
        if self.visible is None:
            return True
        return any(a <= t < b for a, b in self.visible)


@dataclass(frozen=True)
class DistractorSpec:
    clone_of: int
    depth: int
    offset: tuple[tuple[float, ...], ...]
    gray: float | None = None
    visible: tuple[tuple[int, int], ...] | None = None


@dataclass(frozen=True)
class SceneSpec:
    width: int
    height: int
    length: int
    objects: tuple[ObjectSpec, ...]
    distractors: tuple[DistractorSpec, ...] = ()
    seed: int = 0
    background_level: float = 0.15
    background_texture: float = 0.05

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1 or self.length < 1:
            raise ValueError("scene dims and length must be >= 1")
        if not self.objects:
            raise ValueError("scene needs at least one object")
        depths = sorted([o.depth for o in self.objects] + [d.depth for d in self.distractors])
        if depths != list(range(len(depths))):
            raise ValueError(f"depths {depths} are not a permutation of 0..{len(depths) - 1}")
        for i, obj in enumerate(self.objects, start=1):
            if obj.shape not in ("rect", "disk"):
                raise ValueError(f"object {i}: unknown shape {obj.shape!r}")
            if not 0.0 <= obj.gray <= 1.0:
                raise ValueError(f"object {i}: gray outside [0, 1]")
            self._check_times(obj.size, f"object {i} size")
            self._check_times(obj.position, f"object {i} position")
            self._check_intervals(obj.visible, f"object {i}")
        for j, d in enumerate(self.distractors):
            if not 1 <= d.clone_of <= len(self.objects):
                raise ValueError(f"distractor {j}: clone_of {d.clone_of} is not an object id")
            self._check_times(d.offset, f"distractor {j} offset")
            self._check_intervals(d.visible, f"distractor {j}")

    def _check_times(self, keys, name: str) -> None:
        for k in keys:
            if not 0 <= k[0] < self.length:
                raise ValueError(f"{name}: keyframe time {k[0]} outside [0, {self.length})")

    def _check_intervals(self, intervals, name: str) -> None:
        for a, b in intervals or ():
            if not 0 <= a <= b <= self.length:
                raise ValueError(f"{name}: visibility interval [{a}, {b}) outside sequence")

    @property
    def num_objects(self) -> int:
        return len(self.objects)

    @classmethod
    def from_dict(cls, data: dict) -> SceneSpec:
        def intervals(raw):
            return None if raw is None else tuple((int(a), int(b)) for a, b in raw)

        objects = tuple(
            ObjectSpec(
                shape=o["shape"],
                gray=float(o["gray"]),
                depth=int(o["depth"]),
                size=_keyframes(o["size"], 3, "size"),
                position=_keyframes(o["position"], 3, "position"),
                visible=intervals(o.get("visible")),
            )
            for o in data["objects"]
        )
        distractors = tuple(
            DistractorSpec(
                clone_of=int(d["clone_of"]),
                depth=int(d["depth"]),
                offset=_keyframes(d["offset"], 3, "offset"),
                gray=None if d.get("gray") is None else float(d["gray"]),
                visible=intervals(d.get("visible")),
            )
            for d in data.get("distractors", [])
        )
        bg = data.get("background", {})
        return cls(
            width=int(data["width"]),
            height=int(data["height"]),
            length=int(data["length"]),
            objects=objects,
            distractors=distractors,
            seed=int(data.get("seed", 0)),
            background_level=float(bg.get("level", 0.15)),
            background_texture=float(bg.get("texture", 0.05)),
        )

    @classmethod
    def load(cls, path: str | Path) -> SceneSpec:
        with open(path) as f:
            return cls.from_dict(json.load(f))


def load_preset(name: str) -> SceneSpec:
    name = name.removesuffix(".json")
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {PRESETS}")
    text = resources.files("trackforge.presets").joinpath(f"{name}.json").read_text()
    return SceneSpec.from_dict(json.loads(text))


def resolve_scene(ref: str | Path) -> SceneSpec:
    """Load a scene from a JSON path, or by bundled preset name."""
    path = Path(ref)
    if path.exists():
        return SceneSpec.load(path)
    return load_preset(str(ref))


@dataclass(frozen=True)
class SynthFrame:
    image: np.ndarray
    gt: LabelMap
    visible: tuple[bool, ...] = field(default=())


def shape_mask(shape: str, center: tuple[float, float], size: tuple[float, float], width: int, height: int) -> np.ndarray:
    cx, cy = center
    w, h = size
    xs = np.arange(width) + 0.5
    ys = np.arange(height) + 0.5
    if shape == "rect":
        col = (xs >= cx - w / 2) & (xs < cx + w / 2)
        row = (ys >= cy - h / 2) & (ys < cy + h / 2)
        return row[:, None] & col[None, :]
    r = w / 2
    return (xs[None, :] - cx) ** 2 + (ys[:, None] - cy) ** 2 <= r * r


def _background(spec: SceneSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 0xB6])
    noise = rng.random((spec.height, spec.width)) - 0.5
    return spec.background_level + spec.background_texture * noise


def _layers(spec: SceneSpec, t: int):
    """``(depth, label, gray, mask)`` for every shape drawn at frame ``t``."""
    out = []
    for i, obj in enumerate(spec.objects, start=1):
        if obj.present_at(t):
            mask = shape_mask(obj.shape, obj.position_at(t), obj.size_at(t), spec.width, spec.height)
            out.append((obj.depth, i, obj.gray, mask))
    for d in spec.distractors:
        if d.visible is not None and not any(a <= t < b for a, b in d.visible):
            continue
        src = spec.objects[d.clone_of - 1]
        cx, cy = src.position_at(t)
        dx, dy = _interp(d.offset, t)
        mask = shape_mask(src.shape, (cx + dx, cy + dy), src.size_at(t), spec.width, spec.height)
        out.append((d.depth, 0, src.gray if d.gray is None else d.gray, mask))
    return out


def render(spec: SceneSpec, t: int, _background_cache: np.ndarray | None = None) -> SynthFrame:
    if not 0 <= t < spec.length:
        raise IndexError(f"frame {t} outside [0, {spec.length})")
    image = (_background(spec) if _background_cache is None else _background_cache).copy()
    labels = np.zeros((spec.height, spec.width), dtype=np.int32)
    # painter's algorithm: farthest first
    for _, label, gray, mask in sorted(_layers(spec, t), key=lambda layer: -layer[0]):
        image[mask] = gray
        labels[mask] = label
    image = np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0
    visible = tuple(bool((labels == i).any()) for i in range(1, spec.num_objects + 1))
    return SynthFrame(image, LabelMap(labels, spec.num_objects), visible)


def iter_frames(spec: SceneSpec) -> Iterator[SynthFrame]:
    bg = _background(spec)
    for t in range(spec.length):
        yield render(spec, t, bg)


def generate(spec: SceneSpec) -> list[SynthFrame]:
    return list(iter_frames(spec))
