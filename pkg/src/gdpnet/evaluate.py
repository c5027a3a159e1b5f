"""Vertex-error metrics and clean/noisy evaluation reports."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import NOISE_KINDS, Sequence, inject_noise
from .model import GDPNet, onehot
from .numeric import ShapeError, make_rng

METRIC_LABEL = "mean vertex error"

DEFAULT_NOISE_GRID = (
    ("gaussian", 0.05), ("gaussian", 0.1), ("gaussian", 0.2),
    ("outlier", 0.05), ("outlier", 0.1),
    ("dropout", 0.1),
)


def _check_pair(op, pred, truth):
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape[-2:] != truth.shape[-2:] or pred.shape[-1] != 3:
        raise ShapeError(op, "N", truth.shape[-2:], pred.shape[-2:])
    return pred, truth


def per_vertex_error(pred, truth) -> np.ndarray:
    """Euclidean distance of each vertex pair, shape ``(..., N)``."""
    pred, truth = _check_pair("per_vertex_error", pred, truth)
    return np.linalg.norm(pred - truth, axis=-1)


def mse_metric(pred, truth):
    """Mean over vertices of the Euclidean vertex distance (not squared)."""
    e = per_vertex_error(pred, truth)
    out = e.mean(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def write_per_vertex_csv(path, errors) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["vertex", "error"])
        for i, e in enumerate(np.asarray(errors).tolist()):
            w.writerow([i, f"{e:.6f}"])


def predict_windows(model: GDPNet, windows, template, subject_index: int, chunk: int = 256) -> np.ndarray:
    """Predicted meshes ``(F, N, 3)`` for a sequence of feature windows."""
    windows = np.asarray(windows)
    oh = onehot(subject_index, model.cfg.S, dtype=model.dtype)
    out = np.empty((windows.shape[0], model.cfg.N, 3), dtype=model.dtype)
    for lo in range(0, windows.shape[0], chunk):
        pred, _ = model.predict(windows[lo : lo + chunk], oh, template)
        out[lo : lo + chunk] = pred
    return out


def sequence_errors(model: GDPNet, seq: Sequence, subject_index: int, windows=None) -> np.ndarray:
    w = seq.windows if windows is None else windows
    pred = predict_windows(model, w, seq.template, subject_index)
    return mse_metric(pred, seq.meshes)


def conditioning_subject(model: GDPNet, seq: Sequence, default: int = 0) -> int:
    # held-out speakers borrow a training speaker's style embedding
    return seq.subject_index if 0 <= seq.subject_index < model.cfg.S else default


def split_error(model: GDPNet, seqs, default_subject: int = 0) -> float:
    """Frame-count-weighted mean vertex error over a list of sequences."""
    errs = [sequence_errors(model, s, conditioning_subject(model, s, default_subject)) for s in seqs]
    return float(np.concatenate(errs).mean()) if errs else float("nan")


@dataclass
class EvalReport:
    per_sequence: list[dict] = field(default_factory=list)
    per_speaker: list[dict] = field(default_factory=list)
    overall: dict = field(default_factory=dict)
    noise_rows: list[dict] = field(default_factory=list)
    baseline: dict = field(default_factory=dict)
    metric: str = METRIC_LABEL

    def to_dict(self) -> dict:
        return asdict(self)


def _weighted(rows):
    frames = sum(r["frames"] for r in rows)
    return sum(r["error"] * r["frames"] for r in rows) / frames if frames else float("nan")


def evaluate(model: GDPNet, dataset, noise_spec=DEFAULT_NOISE_GRID, parts=("val", "test"),
             seed: int = 0, default_subject: int = 0) -> EvalReport:
    """Clean per-sequence/speaker errors plus one row per ``(kind, level)`` noise setting."""
    if dataset.N != model.cfg.N:
        raise ShapeError("evaluate", "N (topology)", model.cfg.N, dataset.N)
    report = EvalReport()
    seqs = [(part, s) for part in parts for s in dataset.part(part)]
    for part, s in seqs:
        e = sequence_errors(model, s, conditioning_subject(model, s, default_subject))
        base = mse_metric(s.template, s.meshes)
        report.per_sequence.append({
            "part": part, "id": s.manifest.key, "speaker": s.manifest.subject_id,
            "frames": int(e.size), "error": float(e.mean()) if e.size else float("nan"),
            "baseline": float(np.mean(base)) if e.size else float("nan"),
        })
    for part in parts:
        rows = [r for r in report.per_sequence if r["part"] == part]
        for spk in sorted({r["speaker"] for r in rows}):
            sub = [r for r in rows if r["speaker"] == spk]
            report.per_speaker.append({"part": part, "speaker": spk, "frames": sum(r["frames"] for r in sub),
                                       "error": _weighted(sub)})
        report.overall[part] = _weighted(rows)
        report.baseline[part] = _weighted([{"frames": r["frames"], "error": r["baseline"]} for r in rows])
    report.overall["all"] = _weighted(report.per_sequence)
    report.baseline["all"] = _weighted([{"frames": r["frames"], "error": r["baseline"]} for r in report.per_sequence])

    for kind, level in noise_spec:
        if kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {kind!r}")
        rows = []
        for i, (part, s) in enumerate(seqs):
            if level == 0:
                e = next(r["error"] for r in report.per_sequence if r["id"] == s.manifest.key and r["part"] == part)
                rows.append({"frames": s.meshes.shape[0], "error": e})
                continue
            noisy = inject_noise(s.windows, kind, level, make_rng([seed, i, NOISE_KINDS.index(kind)]))
            e = sequence_errors(model, s, conditioning_subject(model, s, default_subject), noisy)
            rows.append({"frames": int(e.size), "error": float(e.mean()) if e.size else float("nan")})
        report.noise_rows.append({"kind": kind, "level": float(level), "error": _weighted(rows)})
    return report


def write_report(report: EvalReport, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jpath = out / "report.json"
    jpath.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    cpath = out / "report.csv"
    with open(cpath, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["section", "part", "name", "frames", f"{METRIC_LABEL} (mm)"])
        for r in report.per_sequence:
            w.writerow(["sequence", r["part"], r["id"], r["frames"], f"{r['error']:.6f}"])
        for r in report.per_speaker:
            w.writerow(["speaker", r["part"], r["speaker"], r["frames"], f"{r['error']:.6f}"])
        for part, v in report.overall.items():
            w.writerow(["mean", part, "model", "", f"{v:.6f}"])
        for part, v in report.baseline.items():
            w.writerow(["mean", part, "baseline", "", f"{v:.6f}"])
        for r in report.noise_rows:
            w.writerow(["noise", "all", f"{r['kind']}:{r['level']:g}", "", f"{r['error']:.6f}"])
    return jpath, cpath


def parse_noise_grid(text: str):
    """``"default"``, ``"none"`` or a comma list like ``"gaussian:0.1,dropout:0.1"``."""
    text = text.strip()
    if text == "default":
        return list(DEFAULT_NOISE_GRID)
    if text in ("", "none", "clean"):
        return []
    grid = []
    for item in text.split(","):
        kind, _, level = item.partition(":")
        if kind not in NOISE_KINDS or not level:
            raise ValueError(f"bad noise spec {item!r}; use kind:level with kind in {NOISE_KINDS}")
        grid.append((kind, float(level)))
    return grid
