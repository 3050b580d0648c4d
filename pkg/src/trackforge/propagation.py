"""Toy-scale multi-object segmenter.

Frames are encoded into a 1/16, 1/8, 1/4 feature pyramid by seeded strided
patch projections. Objects are given identity vectors, memory frames carry
those vectors per pixel, and gated propagation layers (single-head attention
shared between a visual branch and an identity branch) carry them into the
current frame: three layers at 1/16, one at 1/8, and only projection plus
up-sampling at 1/4. A small top-down FPN decodes per-pixel identity
embeddings, which are scored against every identity vector to give logits.

The gated layer is a pinned approximation; the exact published block is not
reproduced here.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterator, Mapping

import numpy as np
from numpy.typing import NDArray
from scipy.special import expit

from .config import SCALES, TrackerConfig
from .maskcore import Bitmask, LabelMap, split
from .membank import MemoryBank, MemoryEntry, MemoryView

GPM_SCALES: tuple[int, ...] = (16, 8)
MIN_FRAME_SIZE = 16

_MATCH_GAIN = 40.0
_MATCH_SHARPNESS = 3.0


def scaled_dims(height: int, width: int, scale: int) -> tuple[int, int]:
    return -(-height // scale), -(-width // scale)


# ---------------------------------------------------------------- parameters


def param_shapes(cfg: TrackerConfig) -> dict[str, tuple[int, ...]]:
    """Every named parameter and its shape, in canonical (file) order."""
    cv, ci = cfg.vis_channels, cfg.id_channels
    shapes: dict[str, tuple[int, ...]] = {}
    for s in SCALES:
        shapes[f"encoder.{s}.weight"] = (s * s, cv)
        shapes[f"encoder.{s}.bias"] = (cv,)
    for s in GPM_SCALES:
        for i in range(cfg.gpm_layers(s)):
            p = f"gpm.{s}.{i}"
            shapes[f"{p}.query"] = (cv, cv)
            shapes[f"{p}.key"] = (cv, cv)
            shapes[f"{p}.value"] = (cv, cv)
            shapes[f"{p}.id_value"] = (ci, ci)
            shapes[f"{p}.gate_vis"] = (cv, cv)
            shapes[f"{p}.gate_vis_bias"] = (cv,)
            shapes[f"{p}.gate_id"] = (cv, ci)
            shapes[f"{p}.gate_id_bias"] = (ci,)
    for src, dst in ((16, 8), (8, 4)):
        shapes[f"cross.{src}_{dst}.vis"] = (cv, cv)
        shapes[f"cross.{src}_{dst}.id"] = (ci, ci)
    for s in SCALES:
        shapes[f"decoder.{s}.vis"] = (cv, ci)
        shapes[f"decoder.{s}.id"] = (ci, ci)
        shapes[f"decoder.{s}.enc"] = (cv, ci)
    shapes["decoder.out"] = (ci, ci)
    return shapes


@dataclass(frozen=True)
class GpmLayerParams:
    query: NDArray
    key: NDArray
    value: NDArray
    id_value: NDArray
    gate_vis: NDArray
    gate_vis_bias: NDArray
    gate_id: NDArray
    gate_id_bias: NDArray


class ModelParams(Mapping[str, NDArray]):
    """Immutable named parameter set, validated against a config."""

    def __init__(self, cfg: TrackerConfig, tensors: Mapping[str, NDArray]) -> None:
        expected = param_shapes(cfg)
        unknown = set(tensors) - set(expected)
        if unknown:
            raise ValueError(f"unknown parameters: {sorted(unknown)}")
        missing = set(expected) - set(tensors)
        if missing:
            raise ValueError(f"missing parameters: {sorted(missing)}")
        frozen = {}
        for name, shape in expected.items():
            arr = np.array(tensors[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name}: shape {arr.shape}, expected {shape}")
            if not np.isfinite(arr).all():
                raise ValueError(f"{name}: non-finite values")
            arr.flags.writeable = False
            frozen[name] = arr
        self.config = cfg
        self._tensors = frozen

    def __getitem__(self, name: str) -> NDArray:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def layer(self, scale: int, index: int) -> GpmLayerParams:
        p = f"gpm.{scale}.{index}"
        return GpmLayerParams(
            query=self[f"{p}.query"],
            key=self[f"{p}.key"],
            value=self[f"{p}.value"],
            id_value=self[f"{p}.id_value"],
            gate_vis=self[f"{p}.gate_vis"],
            gate_vis_bias=self[f"{p}.gate_vis_bias"],
            gate_id=self[f"{p}.gate_id"],
            gate_id_bias=self[f"{p}.gate_id_bias"],
        )

    def replace(self, **updates: NDArray) -> ModelParams:
        """Copy with some tensors swapped out; keyword names use ``__`` for dots."""
        tensors = dict(self._tensors)
        for key, value in updates.items():
            tensors[key.replace("__", ".")] = value
        return ModelParams(self.config, tensors)

    @classmethod
    def seeded(cls, cfg: TrackerConfig) -> ModelParams:
        if cfg.init == "matching":
            return cls(cfg, _matching_tensors(cfg))
        rng = np.random.default_rng([cfg.seed, 0x7F31])
        tensors = {}
        for name, shape in param_shapes(cfg).items():
            if len(shape) == 1:
                tensors[name] = rng.normal(0.0, 0.1, size=shape)
            else:
                tensors[name] = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape)
        return cls(cfg, tensors)


def _matching_tensors(cfg: TrackerConfig) -> dict[str, NDArray]:
    """Hand-set weights that turn propagation into appearance matching.

    Each encoder channel thresholds the patch mean at a different gray level
    (a thermometer code), so feature norms are nearly constant and dot-product
    attention prefers memory pixels of the same brightness. Gates are open on
    the identity branch, closed on the visual branch, and identity values pass
    through unchanged.
    """
    cv, ci = cfg.vis_channels, cfg.id_channels
    tensors: dict[str, NDArray] = {}
    for name, shape in param_shapes(cfg).items():
        tensors[name] = np.zeros(shape)
    thresholds = (np.arange(cv) + 0.5) / cv
    for s in SCALES:
        tensors[f"encoder.{s}.weight"] = np.full((s * s, cv), _MATCH_GAIN / (s * s))
        tensors[f"encoder.{s}.bias"] = -_MATCH_GAIN * thresholds
    for s in GPM_SCALES:
        for i in range(cfg.gpm_layers(s)):
            p = f"gpm.{s}.{i}"
            tensors[f"{p}.query"] = np.eye(cv) * _MATCH_SHARPNESS
            tensors[f"{p}.key"] = np.eye(cv) * _MATCH_SHARPNESS
            tensors[f"{p}.id_value"] = np.eye(ci)
            tensors[f"{p}.gate_vis_bias"] = np.full(cv, -30.0)
            tensors[f"{p}.gate_id_bias"] = np.full(ci, 30.0)
    tensors["cross.16_8.id"] = np.eye(ci) * (0.0 if cfg.gpm_layers_8 else 1.0)
    tensors["cross.8_4.id"] = np.eye(ci)
    for s in SCALES:
        tensors[f"decoder.{s}.id"] = np.eye(ci) * (1.0 if s == 4 else 0.0)
    tensors["decoder.out"] = np.eye(ci)
    return tensors


# ---------------------------------------------------------------- data types


@dataclass(frozen=True)
class FeaturePyramid:
    """Channels-last feature maps keyed by stride (16, 8, 4)."""

    levels: dict[int, NDArray]
    height: int
    width: int

    def __getitem__(self, scale: int) -> NDArray:
        return self.levels[scale]


@dataclass(frozen=True)
class Propagated:
    """Visual and identity features after propagation, keyed by stride."""

    vis: dict[int, NDArray]
    ids: dict[int, NDArray]


@dataclass(frozen=True)
class IdentityBank:
    """Row 0 is background; row i is object i."""

    vectors: NDArray

    def __post_init__(self) -> None:
        v = np.array(self.vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 2:
            raise ValueError("identity bank needs background plus at least one object")
        for i in range(v.shape[0]):
            for j in range(i + 1, v.shape[0]):
                if np.array_equal(v[i], v[j]):
                    raise ValueError(f"identity vectors {i} and {j} coincide")
        v.flags.writeable = False
        object.__setattr__(self, "vectors", v)

    @classmethod
    def seeded(cls, num_objects: int, dim: int, seed: int) -> IdentityBank:
        rng = np.random.default_rng([seed, 0x1D])
        return cls(rng.standard_normal((num_objects + 1, dim)))

    @property
    def num_objects(self) -> int:
        return self.vectors.shape[0] - 1

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def permuted(self, perm: dict[int, int]) -> IdentityBank:
        """Bank where object ``i`` is renamed ``perm[i]`` (background stays 0)."""
        out = self.vectors.copy()
        for old, new in perm.items():
            out[new] = self.vectors[old]
        return IdentityBank(out)


@dataclass(frozen=True)
class FrameResult:
    frame_index: int
    labelmap: LabelMap
    confidences: tuple[float, ...]

    @property
    def masks(self) -> list[Bitmask]:
        return split(self.labelmap)

    @property
    def num_objects(self) -> int:
        return self.labelmap.num_objects


# ---------------------------------------------------------------- kernels


def upsample_bilinear(arr: NDArray, new_h: int, new_w: int) -> NDArray:
    """Half-pixel-centred bilinear resize of an ``(h, w, C)`` array."""
    h, w = arr.shape[:2]

    def axis(n_in: int, n_out: int):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        lo = np.floor(src).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis(h, new_h)
    x0, x1, fx = axis(w, new_w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    rows = arr[y0] * (1.0 - fy) + arr[y1] * fy
    return rows[:, x0] * (1.0 - fx) + rows[:, x1] * fx


def _patches(img: NDArray, scale: int) -> NDArray:
    """Edge-padded non-overlapping ``scale x scale`` patches, flattened."""
    h, w = img.shape[:2]
    hs, ws = scaled_dims(h, w, scale)
    pad = ((0, hs * scale - h), (0, ws * scale - w)) + ((0, 0),) * (img.ndim - 2)
    padded = np.pad(img, pad, mode="edge")
    tail = img.shape[2:]
    blocks = padded.reshape(hs, scale, ws, scale, *tail).swapaxes(1, 2)
    return blocks.reshape(hs, ws, scale * scale, *tail)


def encode_frame(frame: NDArray, params: ModelParams) -> FeaturePyramid:
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 2:
        raise ValueError("frame must be a 2-D gray image")
    h, w = frame.shape
    if h < MIN_FRAME_SIZE or w < MIN_FRAME_SIZE:
        raise ValueError(f"frame {w}x{h} smaller than {MIN_FRAME_SIZE}x{MIN_FRAME_SIZE}")
    levels = {}
    for s in SCALES:
        patches = _patches(frame, s)
        levels[s] = np.tanh(patches @ params[f"encoder.{s}.weight"] + params[f"encoder.{s}.bias"])
    return FeaturePyramid(levels, h, w)


def embed_identities(labelmap: LabelMap, bank: IdentityBank) -> NDArray:
    """Per-pixel identity vectors, ``(h, w, C_id)``."""
    if labelmap.labels.max() > bank.num_objects:
        raise ValueError(
            f"label {int(labelmap.labels.max())} outside identity bank of {bank.num_objects}"
        )
    return bank.vectors[labelmap.labels]


def pool_identities(embedded: NDArray, scale: int) -> NDArray:
    """Average per-pixel identities over each ``scale`` patch."""
    return _patches(embedded, scale).mean(axis=2)


def attention_weights(q: NDArray, k: NDArray) -> NDArray:
    """Row-stochastic ``softmax(q k^T / sqrt(C))`` of shape ``(N, T)``."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if k.shape[0] == 0:
        raise ValueError("attention over empty memory")
    if q.shape[1] != k.shape[1]:
        raise ValueError(f"query/key channel mismatch: {q.shape[1]} vs {k.shape[1]}")
    logits = q @ k.T / math.sqrt(q.shape[1])
    logits -= logits.max(axis=1, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=1, keepdims=True)
    return weights


def attention(q: NDArray, k: NDArray, v: NDArray) -> NDArray:
    """Single-head scaled dot-product attention."""
    v = np.asarray(v, dtype=np.float64)
    if np.shape(k)[0] != v.shape[0]:
        raise ValueError(f"key/value row mismatch: {np.shape(k)[0]} vs {v.shape[0]}")
    return attention_weights(q, k) @ v


def gpm_layer(
    vis: NDArray,
    ids: NDArray,
    mem_keys: NDArray,
    mem_vis: NDArray,
    mem_ids: NDArray,
    layer: GpmLayerParams,
) -> tuple[NDArray, NDArray]:
    """One dual-branch gated propagation step on flattened ``(N, C)`` features.

    Both branches share the attention weights computed from visual features;
    each branch output is gated by ``sigmoid(vis W + b)`` and added back to
    its input.
    """
    q = vis @ layer.query
    k = mem_keys @ layer.key
    weights = attention_weights(q, k)
    vis_msg = weights @ (mem_vis @ layer.value)
    id_msg = weights @ (mem_ids @ layer.id_value)
    vis_gate = expit(vis @ layer.gate_vis + layer.gate_vis_bias)
    id_gate = expit(vis @ layer.gate_id + layer.gate_id_bias)
    return vis + vis_gate * vis_msg, ids + id_gate * id_msg


def propagate(
    pyr: FeaturePyramid,
    memory: MemoryView,
    params: ModelParams,
    counter: Counter | None = None,
) -> Propagated:
    """Cascade: GPM layers at 1/16, project+upsample, GPM at 1/8, project+upsample to 1/4."""
    cfg = params.config
    if not memory.frame_indices:
        raise ValueError("propagation needs at least the initial memory entry")
    vis: dict[int, NDArray] = {}
    ids: dict[int, NDArray] = {}
    prev_vis = prev_ids = None
    prev_scale = None
    for s in SCALES:
        h, w, cv = pyr[s].shape
        cur_vis = pyr[s].reshape(h * w, cv)
        if prev_vis is None:
            cur_ids = np.zeros((h * w, cfg.id_channels))
        else:
            pv = upsample_bilinear(prev_vis @ params[f"cross.{prev_scale}_{s}.vis"], h, w)
            pi = upsample_bilinear(prev_ids @ params[f"cross.{prev_scale}_{s}.id"], h, w)
            cur_vis = cur_vis + pv.reshape(h * w, cv)
            cur_ids = pi.reshape(h * w, cfg.id_channels)
        for i in range(cfg.gpm_layers(s)):
            cur_vis, cur_ids = gpm_layer(
                cur_vis,
                cur_ids,
                memory.keys[s],
                memory.vis_values[s],
                memory.id_values[s],
                params.layer(s, i),
            )
            if counter is not None:
                counter[s] += 1
        vis[s] = cur_vis.reshape(h, w, cv)
        ids[s] = cur_ids.reshape(h, w, cfg.id_channels)
        prev_vis, prev_ids, prev_scale = vis[s], ids[s], s
    return Propagated(vis, ids)


def decode(
    prop: Propagated,
    enc: FeaturePyramid,
    bank: IdentityBank,
    params: ModelParams,
) -> NDArray:
    """Top-down FPN fusion to full resolution; returns logits ``(M+1, H, W)``."""
    fused = None
    for s in SCALES:
        lateral = (
            prop.vis[s] @ params[f"decoder.{s}.vis"]
            + prop.ids[s] @ params[f"decoder.{s}.id"]
            + enc[s] @ params[f"decoder.{s}.enc"]
        )
        if fused is not None:
            lateral = lateral + upsample_bilinear(fused, *lateral.shape[:2])
        fused = lateral
    emb = upsample_bilinear(fused, enc.height, enc.width) @ params["decoder.out"]
    # negative half squared distance to each identity, up to a per-pixel constant;
    # each identity is scored separately so relabeling cannot change any logit's rounding
    return np.stack(
        [(emb * np.array(vec)).sum(axis=-1) - 0.5 * float(vec @ vec) for vec in bank.vectors]
    )


def labels_from_logits(logits: NDArray) -> LabelMap:
    """Per-pixel argmax over channels; ties go to the higher channel."""
    c = logits.shape[0]
    labels = c - 1 - np.argmax(logits[::-1], axis=0)
    return LabelMap(labels, c - 1)


def logit_confidences(logits: NDArray, labelmap: LabelMap) -> tuple[float, ...]:
    """Mean margin of the winning logit over the runner-up, per object (0 when empty)."""
    out = []
    for obj in range(1, logits.shape[0]):
        where = labelmap.labels == obj
        if not where.any():
            out.append(0.0)
            continue
        others = np.delete(logits, obj, axis=0).max(axis=0)
        out.append(float((logits[obj] - others)[where].mean()))
    return tuple(out)


# ---------------------------------------------------------------- tracker


class Tracker:
    """Joint propagation state for one sequence; feed frames in order."""

    def __init__(
        self,
        config: TrackerConfig,
        params: ModelParams | None = None,
        bank: IdentityBank | None = None,
    ) -> None:
        self.config = config
        self.params = params if params is not None else ModelParams.seeded(config)
        if param_shapes(self.params.config) != param_shapes(config):
            raise ValueError("parameters do not match the config")
        self.bank = bank
        self.memory = MemoryBank(config.memory_capacity, config.memory_gap)
        self.frame_index = -1
        self.layer_calls: Counter = Counter()
        self.last_pyramid: FeaturePyramid | None = None

    def _entry(self, index: int, pyr: FeaturePyramid, labelmap: LabelMap) -> MemoryEntry:
        embedded = embed_identities(labelmap, self.bank)
        keys, vis_values, id_values = {}, {}, {}
        for s in GPM_SCALES:
            h, w, cv = pyr[s].shape
            flat = pyr[s].reshape(h * w, cv)
            keys[s] = flat
            vis_values[s] = flat
            id_values[s] = pool_identities(embedded, s).reshape(h * w, self.bank.dim)
        return MemoryEntry(index, keys, vis_values, id_values)

    def start(self, frame: NDArray, annotation: LabelMap) -> FrameResult:
        if annotation.num_objects < 1:
            raise ValueError("first-frame annotation must declare at least one object")
        if self.bank is None:
            self.bank = IdentityBank.seeded(
                annotation.num_objects, self.config.id_channels, self.config.seed
            )
        elif self.bank.num_objects != annotation.num_objects:
            raise ValueError("identity bank size does not match the annotation")
        pyr = encode_frame(frame, self.params)
        if (pyr.height, pyr.width) != annotation.shape:
            raise ValueError("annotation and frame dimensions differ")
        self.memory.initialize(self._entry(0, pyr, annotation))
        self.frame_index = 0
        self.last_pyramid = pyr
        return FrameResult(0, annotation, (0.0,) * annotation.num_objects)

    def predict(self, frame: NDArray) -> FrameResult:
        if self.frame_index < 0:
            raise RuntimeError("tracker not started")
        index = self.frame_index + 1
        pyr = encode_frame(frame, self.params)
        prop = propagate(pyr, self.memory.gather(), self.params, self.layer_calls)
        logits = decode(prop, pyr, self.bank, self.params)
        labelmap = labels_from_logits(logits)
        # memory keeps the propagated (pre-refinement) prediction
        self.memory.observe(self._entry(index, pyr, labelmap))
        self.frame_index = index
        self.last_pyramid = pyr
        return FrameResult(index, labelmap, logit_confidences(logits, labelmap))
