"""End-to-end driver: track a sequence directory, evaluate predictions, run ablations."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import ndimage

from .config import TrackerConfig
from .formats import (
    FormatError,
    SequenceDir,
    atomic_write,
    dump_json,
    frame_name,
    list_mask_files,
    read_masks,
    write_masks,
)
from .maskcore import Bitmask, iou, merge
from .membank import MemoryBank, MemoryEntry
from .metrics import METRIC_FIELDS, FrameOutcome, aggregate, per_object_metrics
from .propagation import FrameResult, ModelParams, Tracker
from .refiner import RefinerKind, needs_ground_truth, refine_frame

log = logging.getLogger(__name__)

ABLATION_COLUMNS = ("AUC", "A", "R", "NRE", "DRE", "ADQ")
_COLUMN_FIELDS = dict(zip(ABLATION_COLUMNS, METRIC_FIELDS))


class InputError(ValueError):
    """Bad user input: malformed sequence, inconsistent directories, missing flags."""


def max_threads() -> int:
    raw = os.environ.get("TRACKFORGE_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise InputError(f"TRACKFORGE_THREADS must be an integer, got {raw!r}") from None
    return min(4, os.cpu_count() or 1)


@dataclass(frozen=True)
class OracleNoise:
    """Corruption applied to ground truth when it stands in for the segmenter."""

    erosion: int = 0
    miss_prob: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.erosion < 0:
            raise InputError("erosion radius must be >= 0")
        if not 0.0 <= self.miss_prob <= 1.0:
            raise InputError("miss probability must lie in [0, 1]")


def oracle_mode_predict(gt_masks: Sequence[Bitmask], noise: OracleNoise, frame_index: int) -> list[Bitmask]:
    """Ground truth eroded by a ``(2r+1)^2`` square, each object dropped with ``miss_prob``."""
    out = []
    for obj, mask in enumerate(gt_masks, start=1):
        rng = np.random.default_rng([noise.seed, frame_index, obj])
        if rng.random() < noise.miss_prob:
            out.append(Bitmask.empty(mask.width, mask.height))
            continue
        if noise.erosion:
            k = 2 * noise.erosion + 1
            out.append(Bitmask(ndimage.binary_erosion(mask.bits, structure=np.ones((k, k), dtype=bool))))
        else:
            out.append(mask)
    return out


def _sources(fr: FrameResult, decisions) -> list[str]:
    chosen = {d.object_id: d.chosen for d in decisions}
    return [chosen.get(obj, "vmos" if not m.is_empty() else "none") for obj, m in enumerate(fr.masks, start=1)]


def track(
    seq_dir: str | Path,
    cfg: TrackerConfig,
    out_dir: str | Path,
    *,
    refiner: RefinerKind | None = None,
    tau: float | None = None,
    refine_all: bool = False,
    oracle: bool = False,
    oracle_noise: OracleNoise | None = None,
    params: ModelParams | None = None,
) -> dict:
    """Track every frame of a sequence, writing ``masks/%06d.rle`` and ``report.json``.

    Ground truth past frame 0 is only read when ``oracle`` is set, either for
    oracle-mode prediction (``oracle_noise``) or for an oracle refiner.
    """
    started = time.perf_counter()
    seq = SequenceDir(seq_dir)
    out_dir = Path(out_dir)
    tau = cfg.tau if tau is None else tau
    if not 0.0 <= tau <= 1.0:
        raise InputError(f"tau must lie in [0, 1], got {tau}")
    if refiner is not None and needs_ground_truth(refiner) and not oracle:
        raise InputError("the oracle refiner reads ground truth; pass --oracle to allow it")
    if oracle_noise is not None and not oracle:
        raise InputError("oracle-mode prediction reads ground truth; pass --oracle to allow it")

    n = seq.meta.num_frames
    gt0 = seq.gt(0)
    tracker = None
    if oracle_noise is None:
        tracker = Tracker(cfg, params)
        tracker.start(seq.frame(0), gt0)
        schedule = tracker.memory
    else:
        # the segmenter is bypassed; keep the memory schedule for the log
        schedule = MemoryBank(cfg.memory_capacity, cfg.memory_gap)
        schedule.initialize(MemoryEntry(0))

    write_masks(out_dir / "masks" / frame_name(0, "rle"), seq.gt_masks(0))
    frames_log = [{"frame": 0, "sources": ["init"] * seq.meta.num_objects, "decisions": []}]
    for t in range(1, n):
        image = seq.frame(t)
        gt_masks = seq.gt_masks(t) if oracle else None
        if tracker is not None:
            fr = tracker.predict(image)
        else:
            predicted = oracle_mode_predict(gt_masks, oracle_noise, t)
            fr = FrameResult(t, merge(predicted), (0.0,) * len(predicted))
            schedule.observe(MemoryEntry(t))
        decisions = []
        if refiner is not None:
            fr_out, decisions = refine_frame(fr, refiner, tau, image, gt_masks, refine_all)
        else:
            fr_out = fr
        write_masks(out_dir / "masks" / frame_name(t, "rle"), fr_out.masks)
        frames_log.append(
            {
                "frame": t,
                "sources": _sources(fr, decisions),
                "decisions": [
                    {"object": d.object_id, "iou": d.iou_vmos_refined, "chosen": d.chosen} for d in decisions
                ],
            }
        )

    report = {
        "config": cfg.to_dict(),
        "sequence": seq.meta.to_dict(),
        "refiner": None if refiner is None else refiner.spec(),
        "tau": tau,
        "refine_all": refine_all,
        "oracle": oracle,
        "oracle_noise": None if oracle_noise is None else asdict(oracle_noise),
        "memory": {
            "stored": schedule.stored,
            "evicted": schedule.evicted,
            "retained": [e.frame_index for e in schedule.entries()],
        },
        "frames": frames_log,
        "metrics": None,
        "timing": {"wall_time_s": time.perf_counter() - started},
    }
    if tracker is not None:
        report["gpm_calls"] = {str(s): c for s, c in sorted(tracker.layer_calls.items(), reverse=True)}
    write_report(out_dir / "report.json", report)
    return report


def write_report(path: str | Path, report: dict) -> None:
    atomic_write(path, dump_json(report))


def strip_timing(report: dict) -> dict:
    return {k: v for k, v in report.items() if k != "timing"}


def _load_mask_series(path: Path) -> list[Path]:
    files = list_mask_files(path)
    if not files:
        raise InputError(f"{path}: no .rle mask files")
    expected = [frame_name(t, "rle") for t in range(len(files))]
    if [f.name for f in files] != expected:
        raise InputError(f"{path}: mask files are not numbered 000000.rle onward without gaps")
    return files


def evaluate(pred_dir: str | Path, gt_dir: str | Path, skip_first: bool = True) -> dict:
    """Score predicted masks against ground truth.

    Frame 0 is the initialization annotation and is excluded unless
    ``skip_first`` is false.
    """
    pred_files = _load_mask_series(Path(pred_dir))
    gt_files = _load_mask_series(Path(gt_dir))
    if len(pred_files) != len(gt_files):
        raise InputError(f"frame count mismatch: {len(pred_files)} predicted vs {len(gt_files)} ground truth")
    start = 1 if skip_first else 0
    if len(gt_files) <= start:
        raise InputError("no frames left to evaluate")
    outcomes: list[list[FrameOutcome]] | None = None
    for pf, gf in zip(pred_files[start:], gt_files[start:]):
        try:
            gt = read_masks(gf)
            pred = read_masks(pf)
        except FormatError as exc:
            raise InputError(str(exc)) from exc
        if len(pred) != len(gt):
            raise InputError(f"{pf.name}: {len(pred)} predicted objects vs {len(gt)} in ground truth")
        if outcomes is None:
            outcomes = [[] for _ in gt]
        elif len(gt) != len(outcomes):
            raise InputError(f"{gf.name}: object count changed mid-sequence")
        for obj, (p, g) in enumerate(zip(pred, gt)):
            if p.shape != g.shape:
                raise InputError(f"{pf.name}: object {obj + 1} mask dims differ from ground truth")
            visible, predicted = not g.is_empty(), not p.is_empty()
            overlap = iou(p, g) if visible and predicted else 0.0
            outcomes[obj].append(FrameOutcome(visible, predicted, overlap))

    per_object = [per_object_metrics(o) for o in outcomes]
    agg = aggregate(per_object)
    n_eval = len(outcomes[0])
    trace = [sum(m.trace[i] for m in per_object) / len(per_object) for i in range(n_eval)]
    result = {name: getattr(agg, name) for name in METRIC_FIELDS}
    result.update(
        {
            "num_objects": len(per_object),
            "num_frames": len(gt_files),
            "first_frame": start,
            "objects": [{"object": i, **m.to_dict()} for i, m in enumerate(per_object, start=1)],
            "trace": trace,
        }
    )
    return result


# ---------------------------------------------------------------- ablations


def _parallel_map(fn: Callable, items: Sequence) -> list:
    workers = min(max_threads(), len(items)) or 1
    if workers == 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _track_and_eval(seq_dir: Path, cfg: TrackerConfig, **kwargs) -> tuple[dict, dict]:
    with tempfile.TemporaryDirectory(prefix="trackforge-") as tmp:
        report = track(seq_dir, cfg, tmp, **kwargs)
        metrics = evaluate(Path(tmp) / "masks", seq_dir)
    return report, metrics


def _row(key: str, value, metrics: dict, **extra) -> dict:
    row = {key: value}
    row.update({col: metrics[_COLUMN_FIELDS[col]] for col in ABLATION_COLUMNS})
    row["Q"] = metrics["quality"]
    row.update(extra)
    return row


def ablate_gap(seq_dir: str | Path, cfg: TrackerConfig, gaps: Iterable[int], **track_kwargs) -> list[dict]:
    """One track+eval per memory gap, rows in input order."""
    seq_dir = Path(seq_dir)

    def run(gap: int) -> dict:
        report, metrics = _track_and_eval(seq_dir, replace(cfg, memory_gap=gap), **track_kwargs)
        log.info("gap %d: %d long-term writes, %d evictions", gap, report["memory"]["stored"], report["memory"]["evicted"])
        return _row("gap", gap, metrics, stored=report["memory"]["stored"])

    return _parallel_map(run, list(gaps))


def ablate_tau(
    seq_dir: str | Path,
    cfg: TrackerConfig,
    taus: Iterable[float],
    refiner: RefinerKind,
    include_refine_all: bool = False,
    **track_kwargs,
) -> list[dict]:
    """One track+eval per threshold; optionally a trailing ungated ``refine-all`` row."""
    seq_dir = Path(seq_dir)
    points: list[tuple[object, float, bool]] = [(t, t, False) for t in taus]
    if include_refine_all:
        points.append(("refine-all", cfg.tau, True))

    def run(point) -> dict:
        label, tau, refine_all = point
        _, metrics = _track_and_eval(
            seq_dir, cfg, refiner=refiner, tau=tau, refine_all=refine_all, **track_kwargs
        )
        return _row("tau", label, metrics)

    return _parallel_map(run, points)


def rows_to_csv(rows: Sequence[dict], key: str) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([key, *ABLATION_COLUMNS])
    for row in rows:
        writer.writerow([row[key], *(repr(float(row[c])) for c in ABLATION_COLUMNS)])
    return buf.getvalue()


def plot_data(report: dict) -> str:
    """Per-frame, per-object score trace as CSV (``frame,object,score,chosen_source``)."""
    metrics = report.get("metrics")
    if not metrics:
        raise InputError("report has no metrics; run track with --eval first")
    first = metrics.get("first_frame", 1)
    sources = {f["frame"]: f["sources"] for f in report["frames"]}
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["frame", "object", "score", "chosen_source"])
    for obj in metrics["objects"]:
        for i, score in enumerate(obj["trace"]):
            frame = first + i
            writer.writerow([frame, obj["object"], repr(float(score)), sources[frame][obj["object"] - 1]])
    return buf.getvalue()


def load_report(path: str | Path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read report {path}: {exc}") from exc
