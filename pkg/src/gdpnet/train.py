"""Adam training over the total loss, checkpointing and the ablation grid."""

from __future__ import annotations

import contextlib
import csv
import io
import json
import logging
import math
import os
import time
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import losses as L
from .checkpoint import load_checkpoint, save_checkpoint
from .evaluate import split_error
from .geometry import GeoEncoder, encode_geometry, fit_geometry_encoder
from .model import VARIANTS, GDPNet, ModelConfig
from .numeric import make_rng

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "L", "Lr", "Lc", "Lv", "val_mse", "wall_seconds")


class DivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    variant: str = "f"
    seed: int = 0
    deterministic: bool = True
    lambda1: float = 0.1
    lambda2: float = 10.0
    xi: float = 1.0
    kernel: str = "rbf"

    def __post_init__(self):
        if not self.lr > 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("TrainConfig needs lr > 0, epochs >= 1 and batch_size >= 1")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {sorted(VARIANTS)}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise KeyError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# Optimiser


class Adam:
    """Adam with bias correction over a dict of ParamTensors."""

    def __init__(self, params: dict, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {n: np.zeros_like(p.value) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.value) for n, p in params.items()}
        self.t = 0

    def step(self, params: dict) -> None:
        for name, p in params.items():
            if not np.all(np.isfinite(p.grad)):
                raise DivergenceError(f"non-finite gradient in parameter {name!r}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            m, v, g = self.m[name], self.v[name], p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.value -= (self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)).astype(p.value.dtype)


def adam_step(params: dict, state: Adam) -> None:
    state.step(params)


# ---------------------------------------------------------------------------
# Batching


@dataclass
class TrainData:
    """Training frames flattened across sequences, with frozen guidance latents."""

    windows: np.ndarray      # (T, W, D)
    meshes: np.ndarray       # (T, N, 3)
    templates: np.ndarray    # (T, N, 3)
    subjects: np.ndarray     # (T,) training-subject index
    pairs: np.ndarray        # (P,) frame index t, with t - 1 in the same sequence
    r_hat: np.ndarray | None = None

    @classmethod
    def from_sequences(cls, seqs, dtype=np.float32) -> "TrainData":
        w, m, tp, sj, pairs = [], [], [], [], []
        start = 0
        for s in seqs:
            f = s.meshes.shape[0]
            w.append(s.windows)
            m.append(s.meshes)
            tp.append(np.broadcast_to(s.template, s.meshes.shape))
            sj.append(np.full(f, s.subject_index))
            if f >= 2:
                pairs.append(start + np.arange(1, f))
            start += f
        if not w:
            raise ValueError("no training sequences")
        return cls(
            windows=np.concatenate(w).astype(dtype),
            meshes=np.concatenate(m).astype(dtype),
            templates=np.concatenate(tp).astype(dtype),
            subjects=np.concatenate(sj),
            pairs=np.concatenate(pairs) if pairs else np.zeros(0, dtype=np.int64),
        )


def epoch_batches(n_pairs: int, batch_size: int, seed: int, epoch: int):
    """Permutation sampling: every eligible pair exactly once per epoch."""
    order = make_rng([seed, epoch, 0xBA7C]).permutation(n_pairs)
    return [order[i : i + batch_size] for i in range(0, n_pairs, batch_size)]


@dataclass
class Batch:
    windows_t: np.ndarray
    windows_tm1: np.ndarray
    y_t: np.ndarray
    y_tm1: np.ndarray
    template: np.ndarray
    onehot: np.ndarray
    r_hat: np.ndarray
    t: np.ndarray


def make_batch(data: TrainData, pair_idx, n_subjects: int) -> Batch:
    t = data.pairs[np.asarray(pair_idx)]
    oh = np.eye(n_subjects, dtype=data.windows.dtype)[data.subjects[t]]
    return Batch(data.windows[t], data.windows[t - 1], data.meshes[t], data.meshes[t - 1],
                 data.templates[t], oh, data.r_hat[t], t)


# ---------------------------------------------------------------------------
# Trainer


@contextlib.contextmanager
def thread_limit(deterministic: bool):
    # one BLAS thread fixes the reduction order
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - threadpoolctl ships with scikit-learn
        yield
        return
    env = os.environ.get("GDPNET_THREADS")
    limit = 1 if deterministic else (int(env) if env else None)
    if limit is None:
        yield
    else:
        with threadpool_limits(limits=limit):
            yield


def model_config_for(dataset, variant: str, base: ModelConfig | None = None, n_train_frames: int | None = None) -> ModelConfig:
    base = base or ModelConfig()
    first = next(iter(dataset.sequences.values()))
    cfg = replace(base, W=first.windows.shape[1], D=first.windows.shape[2],
                  S=len(dataset.train_subjects), N=first.template.shape[0])
    cfg = cfg.with_variant(variant)
    if n_train_frames is not None and cfg.pca_rank > n_train_frames:
        cfg = replace(cfg, pca_rank=n_train_frames)
    return cfg


def _crc(a) -> int:
    return zlib.crc32(np.ascontiguousarray(a).tobytes())


@dataclass
class TrainResult:
    model: GDPNet
    final_model: GDPNet
    geo: GeoEncoder
    metrics: list[dict]
    best_epoch: int
    best_val: float
    wall_seconds: float
    out_dir: Path | None = None


class Trainer:
    def __init__(self, dataset, cfg: TrainConfig, model_cfg: ModelConfig | None = None):
        self.dataset = dataset
        self.cfg = cfg
        self.data = TrainData.from_sequences(dataset.part("train"))
        self.val = dataset.part("val")
        n_frames = self.data.windows.shape[0]
        self.model_cfg = model_config_for(dataset, cfg.variant, model_cfg, n_frames)
        self.model = GDPNet(self.model_cfg, seed=[cfg.seed, 0x30DE1])
        self.geo = fit_geometry_encoder(self.data.meshes.astype(np.float64), self.data.templates.astype(np.float64),
                                        latent_dim=self.model_cfg.latent_dim)
        self._set_guidance()
        disp = (self.data.meshes - self.data.templates).reshape(n_frames, -1).astype(np.float64)
        self.model.init_output_from_pca(disp)
        self.adam = Adam(self.model.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
        self.epoch = 0
        self.metrics: list[dict] = []
        self.best_val = math.inf
        self.best_epoch = 0
        self.best_state = {k: v.copy() for k, v in self.model.state_arrays().items()}
        self.weights = L.LossWeights(cfg.lambda1, cfg.lambda2)
        self.huber = L.HuberParams(cfg.xi)
        self.kernel = L.KernelSpec(cfg.kernel)

    def _set_guidance(self):
        r_hat = encode_geometry(self.data.meshes.astype(np.float64), self.data.templates.astype(np.float64), self.geo)
        r_hat = r_hat.astype(self.model.dtype)
        r_hat.flags.writeable = False
        self.data.r_hat = r_hat
        self.r_hat_crc = _crc(r_hat)

    # -- one step -----------------------------------------------------------

    def step(self, batch: Batch) -> tuple[float, float, float, float]:
        m = self.model
        b = batch.windows_t.shape[0]
        feats = np.concatenate([batch.windows_t, batch.windows_tm1])
        oh = np.concatenate([batch.onehot, batch.onehot])
        tmpl = np.concatenate([batch.template, batch.template])
        pred, r, cache = m.forward(feats, oh, tmpl)
        p_t, p_tm1 = pred[:b], pred[b:]
        lr_, g_rec = L.reconstruction_loss(p_t, batch.y_t)
        lv, (gv_t, gv_tm1) = L.velocity_loss(p_t, p_tm1, batch.y_t, batch.y_tm1)
        if self.model_cfg.constraint_mode == "hsic" and b < 2:
            lc, gc = 0.0, np.zeros_like(r[:b])
        else:
            lc, gc = L.constraint_loss(r[:b], batch.r_hat, self.model_cfg.constraint_mode,
                                       self.huber, self.kernel, self.kernel)
        total = L.total_loss(lr_, lc, lv, self.weights)
        w = self.weights
        grad_pred = np.concatenate([g_rec + w.lambda2 * gv_t, w.lambda2 * gv_tm1])
        grad_r = np.concatenate([w.lambda1 * gc, np.zeros_like(gc)])
        m.zero_grad()
        m.backward(cache, grad_pred, grad_r)
        self.adam.step(m.params)
        return total, lr_, lc, lv

    def run_epoch(self) -> dict:
        cfg = self.cfg
        self.epoch += 1
        t0 = time.perf_counter()
        sums = np.zeros(4)
        batches = epoch_batches(len(self.data.pairs), cfg.batch_size, cfg.seed, self.epoch)
        for idx in batches:
            sums += self.step(make_batch(self.data, idx, self.model_cfg.S))
        means = sums / max(len(batches), 1)
        val = split_error(self.model, self.val) if self.val else float("nan")
        row = {"epoch": self.epoch, "L": means[0], "Lr": means[1], "Lc": means[2], "Lv": means[3],
               "val_mse": val, "wall_seconds": time.perf_counter() - t0}
        self.metrics.append(row)
        if val < self.best_val:
            self.best_val, self.best_epoch = val, self.epoch
            self.best_state = {k: v.copy() for k, v in self.model.state_arrays().items()}
        log.info("epoch %d L=%.4f Lr=%.4f Lc=%.4f Lv=%.4f val=%.4f",
                 self.epoch, row["L"], row["Lr"], row["Lc"], row["Lv"], val)
        return row

    # -- persistence --------------------------------------------------------

    def header(self, kind: str) -> dict:
        metrics = [self._public_row(r) for r in self.metrics]
        return {
            "kind": kind,
            "model_config": self.model_cfg.to_dict(),
            "train_config": self.cfg.to_dict(),
            "epoch": self.epoch,
            "best_epoch": self.best_epoch,
            "best_val": self.best_val if math.isfinite(self.best_val) else None,
            "metrics": metrics,
            "train_subjects": self.dataset.train_subjects,
            "geo_encoder": {"latent_dim": self.geo.latent_dim, "rank": self.geo.rank,
                            "provider_id": self.geo.provider_id},
            "r_hat_crc32": self.r_hat_crc,
            "adam_t": self.adam.t,
        }

    def _public_row(self, r: dict) -> dict:
        out = dict(r)
        if self.cfg.deterministic:
            out["wall_seconds"] = 0.0
        return out

    def save(self, path, kind: str = "last") -> None:
        blobs = {}
        state = self.best_state if kind == "best" else self.model.state_arrays()
        blobs.update(state)
        blobs["geo_encoder"] = self.geo.to_blob()
        if kind == "last":
            for n in self.model.params:
                blobs[f"adam.m/{n}"] = self.adam.m[n]
                blobs[f"adam.v/{n}"] = self.adam.v[n]
            for n, v in self.best_state.items():
                blobs[f"best/{n}"] = v
        save_checkpoint(path, self.header(kind), blobs, keep_float64=("geo_encoder",))

    def restore(self, path) -> None:
        header, blobs = load_checkpoint(path)
        if header.get("kind") != "last":
            raise ValueError(f"{path}: resume needs a 'last' checkpoint with optimiser state")
        if header["model_config"] != self.model_cfg.to_dict():
            raise ValueError(f"{path}: model config does not match this run")
        self.model.load_state_arrays(blobs)
        for n in self.model.params:
            self.adam.m[n][...] = blobs[f"adam.m/{n}"]
            self.adam.v[n][...] = blobs[f"adam.v/{n}"]
        self.adam.t = header["adam_t"]
        self.geo = GeoEncoder.from_blob(blobs["geo_encoder"], header["geo_encoder"]["latent_dim"],
                                        header["geo_encoder"]["provider_id"])
        self._set_guidance()
        self.epoch = header["epoch"]
        self.metrics = [dict(r) for r in header["metrics"]]
        self.best_epoch = header["best_epoch"]
        self.best_val = header["best_val"] if header["best_val"] is not None else math.inf
        self.best_state = {n: blobs[f"best/{n}"].copy() for n in self.model.state_arrays()}


def write_metrics_csv(path, rows, deterministic: bool) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        wall = 0.0 if deterministic else r["wall_seconds"]
        w.writerow([r["epoch"]] + [repr(float(r[k])) for k in ("L", "Lr", "Lc", "Lv", "val_mse")] + [f"{wall:.3f}"])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def _dump_diverged(trainer: Trainer, out_dir) -> None:
    if out_dir is not None:
        trainer.save(Path(out_dir) / "diverged.ckpt", kind="last")


def train(cfg: TrainConfig, dataset, out_dir=None, model_cfg: ModelConfig | None = None,
          resume=None, epoch_callback=None) -> TrainResult:
    """Train one variant; writes ``best.ckpt``, ``last.ckpt`` and ``metrics.csv`` under ``out_dir``.

    With ``resume`` pointing at a ``last.ckpt`` the run continues from its
    stored epoch and, in deterministic mode, reproduces an uninterrupted run.
    """
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    t_start = time.perf_counter()
    with thread_limit(cfg.deterministic):
        trainer = Trainer(dataset, cfg, model_cfg)
        if resume is not None:
            trainer.restore(resume)
        while trainer.epoch < cfg.epochs:
            try:
                row = trainer.run_epoch()
            except FloatingPointError as exc:
                _dump_diverged(trainer, out_dir)
                raise DivergenceError(f"training diverged in epoch {trainer.epoch}: {exc}") from exc
            if not math.isfinite(row["L"]):
                _dump_diverged(trainer, out_dir)
                raise DivergenceError(f"training diverged in epoch {trainer.epoch}: loss {row['L']}")
            if epoch_callback is not None:
                epoch_callback(trainer)
            if out_dir is not None:
                trainer.save(out_dir / "last.ckpt", kind="last")
                trainer.save(out_dir / "best.ckpt", kind="best")
                write_metrics_csv(out_dir / "metrics.csv", trainer.metrics, cfg.deterministic)
    wall = time.perf_counter() - t_start
    if out_dir is not None:
        with open(out_dir / "timing.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "wall_seconds"])
            for r in trainer.metrics:
                w.writerow([r["epoch"], f"{r['wall_seconds']:.3f}"])
    best = GDPNet(trainer.model_cfg, seed=0)
    best.load_state_arrays(trainer.best_state)
    return TrainResult(best, trainer.model, trainer.geo, trainer.metrics, trainer.best_epoch,
                       trainer.best_val, wall, out_dir)


def load_model(path) -> tuple[GDPNet, GeoEncoder, dict]:
    """Model (float32), geometry encoder and header from any checkpoint."""
    header, blobs = load_checkpoint(path)
    cfg = ModelConfig.from_dict(header["model_config"])
    model = GDPNet(cfg, seed=0)
    model.load_state_arrays(blobs)
    geo = GeoEncoder.from_blob(blobs["geo_encoder"], header["geo_encoder"]["latent_dim"],
                               header["geo_encoder"]["provider_id"])
    return model, geo, header


# ---------------------------------------------------------------------------
# Ablation grid


@dataclass
class AblationRow:
    variant: str
    seed: int
    val_error: float
    test_error: float
    wall_seconds: float
    param_count: int


def run_ablation(dataset, variants="abcdef", seeds=(0, 1, 2), base: TrainConfig = TrainConfig(),
                 model_cfg: ModelConfig | None = None, out_dir=None) -> list[AblationRow]:
    rows = []
    test = dataset.part("test")
    for v in variants:
        for s in seeds:
            cfg = replace(base, variant=v, seed=s)
            sub = None if out_dir is None else Path(out_dir) / f"variant_{v}" / f"seed_{s}"
            res = train(cfg, dataset, sub, model_cfg)
            rows.append(AblationRow(v, s, res.best_val, split_error(res.model, test), res.wall_seconds,
                                    res.model.param_count()))
            log.info("ablation %s seed %d: val %.4f test %.4f (%.1fs)", v, s, rows[-1].val_error,
                     rows[-1].test_error, res.wall_seconds)
    if out_dir is not None:
        write_ablation(rows, out_dir)
    return rows


def ablation_table(rows: list[AblationRow]) -> list[dict]:
    """Per-variant means over seeds, with the constraint/dense/attention flags."""
    out = []
    for v in sorted({r.variant for r in rows}):
        sub = [r for r in rows if r.variant == v]
        flags = VARIANTS[v]
        out.append({
            "variant": v,
            "hsic": flags["constraint_mode"] == "hsic",
            "huber": flags["constraint_mode"] == "huber",
            "dense": flags["dense"],
            "attention": flags["attention"],
            "val_error": float(np.mean([r.val_error for r in sub])),
            "test_error": float(np.mean([r.test_error for r in sub])),
            "wall_seconds": float(np.mean([r.wall_seconds for r in sub])),
            "seeds": len(sub),
        })
    return out


def format_ablation(table: list[dict]) -> str:
    mark = lambda b: "x" if b else " "  # noqa: E731
    lines = ["| Variant | HSIC | Huber | Dense | Attention | Validation (mm) | Test (mm) | Training time (s) |",
             "|---|---|---|---|---|---|---|---|"]
    for r in table:
        lines.append(f"| ({r['variant']}) | {mark(r['hsic'])} | {mark(r['huber'])} | {mark(r['dense'])} | "
                     f"{mark(r['attention'])} | {r['val_error']:.4f} | {r['test_error']:.4f} | {r['wall_seconds']:.1f} |")
    return "\n".join(lines) + "\n"


def write_ablation(rows: list[AblationRow], out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation_runs.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "seed", "val_error", "test_error", "wall_seconds", "param_count"])
        for r in rows:
            w.writerow([r.variant, r.seed, f"{r.val_error:.6f}", f"{r.test_error:.6f}",
                        f"{r.wall_seconds:.2f}", r.param_count])
    table = ablation_table(rows)
    (out / "ablation.md").write_text(format_ablation(table), encoding="utf-8")
    (out / "ablation.json").write_text(json.dumps(table, indent=2) + "\n", encoding="utf-8")
