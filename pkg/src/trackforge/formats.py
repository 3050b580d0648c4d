"""On-disk formats: PGM frames, RLE mask files, sequence directories, weights.

Sequence directory layout::

    meta.json            {"num_objects": M, "num_frames": N, "width": W, "height": H}
    frames/000000.pgm    binary PGM, maxval 255
    gt/000000.rle        M lines ``w h r0 r1 ...``, one per object id in order

Prediction directories use the same ``%06d.rle`` files under ``masks/``.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .maskcore import Bitmask, LabelMap, format_rle, merge, parse_rle, rle_decode, rle_encode

WEIGHTS_MAGIC = b"TFW1"


class FormatError(ValueError):
    """A file or directory does not follow its declared format."""


def atomic_write(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode()


# ---------------------------------------------------------------- PGM


def to_uint8(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_pgm(image: np.ndarray) -> bytes:
    pixels = to_uint8(image)
    if pixels.ndim != 2:
        raise ValueError("PGM frames are 2-D")
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode() + pixels.tobytes()


def decode_pgm(data: bytes) -> np.ndarray:
    """Parse a binary (P5, maxval 255) PGM into a ``uint8`` array."""
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval
    if tokens[0] != b"P5":
        raise FormatError(f"not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError("malformed PGM header") from exc
    if maxval != 255:
        raise FormatError(f"unsupported PGM maxval {maxval}")
    body = data[pos:]
    if len(body) != w * h:
        raise FormatError(f"PGM body has {len(body)} bytes, expected {w * h}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    atomic_write(path, encode_pgm(image))


def read_pgm(path: str | Path) -> np.ndarray:
    """Gray image in [0, 1]."""
    return decode_pgm(Path(path).read_bytes()).astype(np.float64) / 255.0


# ---------------------------------------------------------------- RLE mask files


def encode_masks(masks: Sequence[Bitmask]) -> bytes:
    return "".join(format_rle(rle_encode(m)) + "\n" for m in masks).encode()


def decode_masks(text: str, num_objects: int | None = None) -> list[Bitmask]:
    lines = [line for line in text.splitlines() if line.strip()]
    if num_objects is not None and len(lines) != num_objects:
        raise FormatError(f"expected {num_objects} mask lines, found {len(lines)}")
    try:
        return [rle_decode(parse_rle(line)) for line in lines]
    except ValueError as exc:
        raise FormatError(str(exc)) from exc


def write_masks(path: str | Path, masks: Sequence[Bitmask]) -> None:
    atomic_write(path, encode_masks(masks))


def read_masks(path: str | Path, num_objects: int | None = None) -> list[Bitmask]:
    try:
        return decode_masks(Path(path).read_text(), num_objects)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def masks_to_labelmap(masks: Sequence[Bitmask]) -> LabelMap:
    return merge(masks)


# ---------------------------------------------------------------- sequences


@dataclass(frozen=True)
class SequenceMeta:
    num_objects: int
    num_frames: int
    width: int
    height: int

    def to_dict(self) -> dict:
        return asdict(self)


def frame_name(t: int, ext: str) -> str:
    return f"{t:06d}.{ext}"


class SequenceDir:
    """Read access to a sequence directory."""

    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)
        meta_path = self.root / "meta.json"
        if not meta_path.is_file():
            raise FormatError(f"{self.root}: missing meta.json")
        try:
            raw = json.loads(meta_path.read_text())
            self.meta = SequenceMeta(
                num_objects=int(raw["num_objects"]),
                num_frames=int(raw["num_frames"]),
                width=int(raw["width"]),
                height=int(raw["height"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{meta_path}: malformed ({exc})") from exc
        if self.meta.num_objects < 1 or self.meta.num_frames < 1:
            raise FormatError(f"{meta_path}: need at least one object and one frame")

    def frame(self, t: int) -> np.ndarray:
        path = self.root / "frames" / frame_name(t, "pgm")
        if not path.is_file():
            raise FormatError(f"missing frame {path}")
        image = read_pgm(path)
        if image.shape != (self.meta.height, self.meta.width):
            raise FormatError(f"{path}: dims {image.shape[::-1]} differ from meta")
        return image

    def gt_masks(self, t: int) -> list[Bitmask]:
        path = self.root / "gt" / frame_name(t, "rle")
        if not path.is_file():
            raise FormatError(f"missing ground truth {path}")
        masks = read_masks(path, self.meta.num_objects)
        for m in masks:
            if (m.width, m.height) != (self.meta.width, self.meta.height):
                raise FormatError(f"{path}: mask dims differ from meta")
        return masks

    def gt(self, t: int) -> LabelMap:
        return merge(self.gt_masks(t))

    def validate(self) -> None:
        frames = sorted((self.root / "frames").glob("*.pgm"))
        if len(frames) != self.meta.num_frames:
            raise FormatError(f"{self.root}: {len(frames)} frames on disk, meta says {self.meta.num_frames}")
        for t in range(self.meta.num_frames):
            self.frame(t)
        self.gt_masks(0)


def write_sequence(root: str | Path, frames, num_objects: int) -> SequenceMeta:
    """Write ``SynthFrame``-like objects (``.image``, ``.gt``) as a sequence directory."""
    root = Path(root)
    count = 0
    width = height = 0
    for t, fr in enumerate(frames):
        height, width = fr.image.shape
        write_pgm(root / "frames" / frame_name(t, "pgm"), fr.image)
        masks = [Bitmask(fr.gt.labels == i) for i in range(1, num_objects + 1)]
        write_masks(root / "gt" / frame_name(t, "rle"), masks)
        count += 1
    meta = SequenceMeta(num_objects, count, width, height)
    atomic_write(root / "meta.json", dump_json(meta.to_dict()))
    return meta


def mask_dir(path: str | Path) -> Path:
    """Directory holding ``%06d.rle`` files: ``gt/`` or ``masks/`` if present, else the path."""
    path = Path(path)
    for sub in ("gt", "masks"):
        if (path / sub).is_dir():
            return path / sub
    return path


def list_mask_files(path: str | Path) -> list[Path]:
    return sorted(mask_dir(path).glob("*.rle"))


# ---------------------------------------------------------------- weights


def dumps_weights(tensors: Mapping[str, np.ndarray]) -> bytes:
    out = bytearray(WEIGHTS_MAGIC)
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF or arr.ndim > 0xFF:
            raise ValueError(f"parameter {name!r} cannot be encoded")
        out += struct.pack(">H", len(encoded)) + encoded
        out += struct.pack(">B", arr.ndim)
        out += struct.pack(f">{arr.ndim}I", *arr.shape)
        out += arr.astype(">f8").tobytes()
    return bytes(out)


def loads_weights(
    data: bytes, expected: Mapping[str, tuple[int, ...]] | None = None
) -> dict[str, np.ndarray]:
    """Parse a weights blob; with ``expected``, reject unknown, missing or misshapen entries."""
    if data[:4] != WEIGHTS_MAGIC:
        raise FormatError("not a TFW1 weights file")
    pos = 4
    tensors: dict[str, np.ndarray] = {}

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise FormatError("truncated weights file")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    while pos < len(data):
        (name_len,) = struct.unpack(">H", take(2))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack(">B", take(1))
        dims = struct.unpack(f">{rank}I", take(4 * rank))
        count = int(np.prod(dims, dtype=np.int64))
        values = np.frombuffer(take(8 * count), dtype=">f8").astype(np.float64)
        if name in tensors:
            raise FormatError(f"duplicate parameter {name!r}")
        if expected is not None:
            if name not in expected:
                raise FormatError(f"unknown parameter {name!r}")
            if tuple(dims) != tuple(expected[name]):
                raise FormatError(f"{name}: dims {tuple(dims)}, expected {tuple(expected[name])}")
        tensors[name] = values.reshape(dims)
    if expected is not None:
        missing = set(expected) - set(tensors)
        if missing:
            raise FormatError(f"missing parameters: {sorted(missing)}")
    return tensors


def save_weights(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    atomic_write(path, dumps_weights(tensors))


def load_weights(path: str | Path, expected: Mapping[str, tuple[int, ...]] | None = None) -> dict[str, np.ndarray]:
    return loads_weights(Path(path).read_bytes(), expected)
