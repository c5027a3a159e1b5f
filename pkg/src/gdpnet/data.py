"""Synthetic speech/mesh sequences, on-disk formats and noise models.

The synthetic generator replaces a captured 4D face dataset.  Every subject
gets an ellipsoidal template on a shared icosphere topology; smooth random
feature curves drive a fixed blendshape rig through a known map
``g(window) = tanh(window-weighted linear projection)`` so the best
achievable error is measurable.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .numeric import make_rng

# ---------------------------------------------------------------------------
# Errors


class DataError(Exception):
    """Base class for dataset and file-format failures."""


class FeatureFileError(DataError):
    pass


class BadMagicError(FeatureFileError):
    pass


class TruncatedFileError(FeatureFileError):
    pass


class VersionMismatchError(FeatureFileError):
    pass


class MeshFormatError(DataError):
    def __init__(self, path, lineno: int, message: str):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {message}")


class SplitError(DataError):
    pass


# ---------------------------------------------------------------------------
# Feature files: "GDPF", u32 version, u32 F, u32 W, u32 D, float32[F*W*D]

FEATURE_MAGIC = b"GDPF"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sIIII")


def write_feature_file(path, windows) -> None:
    w = np.asarray(windows)
    if w.ndim != 3:
        raise ValueError(f"feature windows must be F x W x D, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ValueError("feature windows contain non-finite values")
    f, ww, d = w.shape
    with open(path, "wb") as fh:
        fh.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, f, ww, d))
        fh.write(np.ascontiguousarray(w, dtype="<f4").tobytes())


def load_feature_file(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != FEATURE_MAGIC:
        raise BadMagicError(f"{path}: bad magic {data[:4]!r}, expected {FEATURE_MAGIC!r}")
    if len(data) < _FEATURE_HEADER.size:
        raise TruncatedFileError(f"{path}: truncated header ({len(data)} bytes)")
    _, version, f, w, d = _FEATURE_HEADER.unpack_from(data)
    if version != FEATURE_VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {FEATURE_VERSION}")
    need = _FEATURE_HEADER.size + 4 * f * w * d
    if len(data) != need:
        raise TruncatedFileError(f"{path}: expected {need} bytes, found {len(data)}")
    body = np.frombuffer(data, dtype="<f4", offset=_FEATURE_HEADER.size)
    return body.reshape(f, w, d).astype(np.float32)


# ---------------------------------------------------------------------------
# Meshes


@dataclass
class Mesh:
    vertices: np.ndarray
    faces: list[str] = field(default_factory=list)
    topology_id: str = ""

    @property
    def N(self) -> int:
        return self.vertices.shape[0]


_IGNORED_OBJ = {"vn", "vt", "vp", "o", "g", "s", "usemtl", "mtllib", "l", "p"}


def load_mesh(path) -> Mesh:
    """Read ``v``/``f`` records, keeping vertex order and face lines verbatim."""
    verts = []
    faces = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s[0] == "#":
                continue
            key, _, rest = s.partition(" ")
            if key == "v":
                parts = rest.split()
                if len(parts) < 3:
                    raise MeshFormatError(path, lineno, f"vertex needs 3 coordinates: {s!r}")
                try:
                    verts.append((float(parts[0]), float(parts[1]), float(parts[2])))
                except ValueError:
                    raise MeshFormatError(path, lineno, f"non-numeric vertex: {s!r}") from None
            elif key == "f":
                if not rest.split():
                    raise MeshFormatError(path, lineno, "face without indices")
                faces.append(s)
            elif key not in _IGNORED_OBJ:
                raise MeshFormatError(path, lineno, f"unsupported record {key!r}")
    v = np.array(verts, dtype=np.float64).reshape(-1, 3)
    return Mesh(v, faces, topology_id=f"n{len(v)}-f{len(faces)}")


def format_obj(vertices, faces=(), header: str | None = None) -> str:
    v = np.asarray(vertices, dtype=np.float64)
    lines = [f"# {header}"] if header else []
    lines += ["v %.6f %.6f %.6f" % tuple(row) for row in v.tolist()]
    lines += list(faces)
    return "\n".join(lines) + "\n"


def write_mesh(mesh: Mesh, path, include_faces: bool = True) -> None:
    text = format_obj(mesh.vertices, mesh.faces if include_faces else ())
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def icosphere(subdivisions: int):
    """Unit icosphere vertices ``(10*4**k + 2, 3)`` and triangle indices."""
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
             (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
             (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    for _ in range(subdivisions):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return np.array(verts), np.array(faces, dtype=np.int64)


def icosphere_subdivisions(n_vertices: int) -> int:
    k = 0
    while 10 * 4 ** k + 2 < n_vertices:
        k += 1
    if 10 * 4 ** k + 2 != n_vertices:
        raise ValueError(f"N={n_vertices} is not an icosphere size (10*4**k + 2: 12, 42, 162, 642, ...)")
    return k


# ---------------------------------------------------------------------------
# Manifests and splits


@dataclass(frozen=True)
class SequenceManifest:
    subject_id: str
    sentence_id: str
    frame_count: int
    feature_path: str
    template_path: str
    mesh_dir: str
    fps: float = 60.0

    @property
    def key(self) -> str:
        return f"{self.subject_id}/{self.sentence_id}"


@dataclass
class DatasetSplit:
    train: list[SequenceManifest]
    val: list[SequenceManifest]
    test: list[SequenceManifest]

    def parts(self):
        return {"train": self.train, "val": self.val, "test": self.test}

    def subjects(self, part: str) -> list[str]:
        return sorted({m.subject_id for m in self.parts()[part]})


def held_out_count(n: int) -> int:
    # 12 -> 2 per held-out part (the 8/2/2 protocol), halves round up, never less than one
    return max(1, int(math.floor(n / 6 + 0.5)))


def split_dataset(manifests, seed: int = 0) -> DatasetSplit:
    """Subject- and sentence-disjoint train/val/test split.

    Subjects are divided 8/2/2 proportionally; val and test subjects only
    contribute held-out sentences, train subjects only training sentences.
    """
    manifests = list(manifests)
    subjects = sorted({m.subject_id for m in manifests})
    sentences = sorted({m.sentence_id for m in manifests})
    if len(subjects) < 4:
        raise SplitError(f"need >= 4 subjects, got {len(subjects)}")
    if len(sentences) < 3:
        raise SplitError(f"need >= 3 sentences, got {len(sentences)}")
    rng = make_rng([seed, 0x5117])
    subj = [subjects[i] for i in rng.permutation(len(subjects))]
    sent = [sentences[i] for i in rng.permutation(len(sentences))]
    ns, nk = held_out_count(len(subjects)), held_out_count(len(sentences))
    groups_s = {"val": set(subj[:ns]), "test": set(subj[ns : 2 * ns]), "train": set(subj[2 * ns :])}
    groups_k = {"val": set(sent[:nk]), "test": set(sent[nk : 2 * nk]), "train": set(sent[2 * nk :])}
    parts = {}
    for part in ("train", "val", "test"):
        parts[part] = sorted(
            (m for m in manifests if m.subject_id in groups_s[part] and m.sentence_id in groups_k[part]),
            key=lambda m: (m.subject_id, m.sentence_id),
        )
    return DatasetSplit(**parts)


def split_overlaps(split: DatasetSplit) -> dict[str, set]:
    """Pairwise subject and sentence intersections; all empty for a valid split."""
    out = {}
    parts = split.parts()
    names = list(parts)
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            sa, sb = parts[a], parts[b]
            out[f"subjects:{a}&{b}"] = {m.subject_id for m in sa} & {m.subject_id for m in sb}
            out[f"sentences:{a}&{b}"] = {m.sentence_id for m in sa} & {m.sentence_id for m in sb}
    return out


# ---------------------------------------------------------------------------
# Synthetic generation


@dataclass(frozen=True)
class SynthConfig:
    subjects: int = 4
    sentences: int = 10
    frames: int = 100
    N: int = 642
    blendshapes: int = 8
    noise_floor: float = 0.05
    seed: int = 0
    W: int = 16
    D: int = 29
    fps: float = 60.0
    feature_amplitude: float = 1.0
    blendshape_amplitude: float = 10.0
    feature_factors: int = 6
    max_freq: float = 6.0

    def __post_init__(self):
        for f in ("subjects", "sentences", "frames", "N", "blendshapes", "W", "D"):
            if getattr(self, f) < 1:
                raise ValueError(f"SynthConfig.{f} must be positive")
        if self.feature_factors < 0 or self.max_freq <= 0:
            raise ValueError("SynthConfig feature_factors must be >= 0 and max_freq > 0")
        if self.noise_floor < 0 or self.fps <= 0:
            raise ValueError("SynthConfig noise_floor must be >= 0 and fps > 0")
        icosphere_subdivisions(self.N)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise KeyError(f"unknown SynthConfig keys: {sorted(unknown)}")
        return cls(**d)


def window_offsets(W: int) -> np.ndarray:
    return np.arange(W) - W // 2


def make_windows(curve, W: int) -> np.ndarray:
    """``(F, W, D)`` frame-centred windows of a ``(F, D)`` curve with edge clamping."""
    curve = np.asarray(curve)
    f = curve.shape[0]
    idx = np.clip(np.arange(f)[:, None] + window_offsets(W)[None, :], 0, f - 1)
    return curve[idx]


@dataclass
class Rig:
    """Shared deformation model: blendshapes and the known window map."""

    unit: np.ndarray          # (N, 3) icosphere directions
    faces: list[str]
    blendshapes: np.ndarray   # (B, N, 3)
    temporal: np.ndarray      # (W,)
    loadings: np.ndarray      # (B, D)

    def weights(self, windows) -> np.ndarray:
        """Blendshape activations for ``(F, W, D)`` windows; zero input maps to zero."""
        pre = np.einsum("fwd,w,bd->fb", np.asarray(windows, dtype=np.float64), self.temporal, self.loadings)
        return np.tanh(pre)

    def displacements(self, windows) -> np.ndarray:
        return np.einsum("fb,bnk->fnk", self.weights(windows), self.blendshapes)


def build_rig(cfg: SynthConfig) -> Rig:
    rng = make_rng([cfg.seed, 0xB1E4D])
    unit, tri = icosphere(icosphere_subdivisions(cfg.N))
    faces = ["f %d %d %d" % tuple(t) for t in (tri + 1).tolist()]
    centers = rng.normal(size=(cfg.blendshapes, 3))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    support = rng.uniform(0.5, 0.9, size=cfg.blendshapes)
    amp = cfg.blendshape_amplitude * rng.uniform(0.5, 1.0, size=cfg.blendshapes)
    angle = np.arccos(np.clip(unit @ centers.T, -1, 1))            # (N, B)
    bump = np.where(angle < support, 0.5 * (1 + np.cos(np.pi * angle / support)), 0.0)
    shapes = (amp * bump).T[:, :, None] * unit[None, :, :]
    off = window_offsets(cfg.W)
    temporal = np.exp(-0.5 * (off / 3.0) ** 2)
    temporal /= temporal.sum()
    # the curves have per-channel std ~0.7; 1.5/sqrt(D) keeps tanh inputs ~unit scale
    loadings = rng.normal(size=(cfg.blendshapes, cfg.D)) * (1.5 / np.sqrt(cfg.D))
    return Rig(unit, faces, shapes, temporal, loadings)


def subject_template(cfg: SynthConfig, rig: Rig, subject_index: int) -> np.ndarray:
    rng = make_rng([cfg.seed, 0x7E3A, subject_index])
    radii = np.array([70.0, 90.0, 80.0]) * (1 + 0.08 * rng.normal(size=3))
    return rig.unit * radii


def feature_mixing(cfg: SynthConfig) -> np.ndarray:
    """``(K, D)`` map from latent articulation factors to feature channels."""
    rng = make_rng([cfg.seed, 0xF1C7])
    return rng.normal(size=(cfg.feature_factors, cfg.D)) / np.sqrt(cfg.feature_factors)


def feature_curve(cfg: SynthConfig, subject_index: int, sentence_index: int) -> np.ndarray:
    """``(F, D)`` smooth curve.

    With ``feature_factors == 0`` every channel is its own sum of at most five
    sinusoids.  Otherwise that many sinusoidal factors are mixed into D
    correlated channels plus a little jitter.
    """
    rng = make_rng([cfg.seed, subject_index, sentence_index])
    t = np.arange(cfg.frames) / cfg.fps

    def sinusoids(n, lo):
        out = np.zeros((cfg.frames, n))
        for c in range(n):
            k = int(rng.integers(lo, 6))
            amp = rng.uniform(0.5, 1.0, size=k) / np.sqrt(k)
            freq = rng.uniform(0.5, cfg.max_freq, size=k)
            phase = rng.uniform(0, 2 * np.pi, size=k)
            out[:, c] = np.sum(amp[:, None] * np.sin(2 * np.pi * freq[:, None] * t[None, :] + phase[:, None]), axis=0)
        return out

    if cfg.feature_factors == 0:
        curve = sinusoids(cfg.D, 1)
    else:
        curve = sinusoids(cfg.feature_factors, 2) @ feature_mixing(cfg)
        curve += 0.1 * rng.normal(size=(cfg.frames, cfg.D))
    return cfg.feature_amplitude * curve


def subject_name(i: int) -> str:
    return f"subject{i:02d}"


def sentence_name(i: int) -> str:
    return f"sentence{i:02d}"


@dataclass
class Sequence:
    manifest: SequenceManifest
    subject_index: int
    windows: np.ndarray       # (F, W, D) float32
    meshes: np.ndarray        # (F, N, 3)
    template: np.ndarray      # (N, 3)
    curve: np.ndarray | None = None

    @property
    def displacements(self) -> np.ndarray:
        return self.meshes - self.template


def synthesize_sequence(cfg: SynthConfig, rig: Rig, subject_index: int, sentence_index: int,
                        manifest: SequenceManifest) -> Sequence:
    curve = feature_curve(cfg, subject_index, sentence_index)
    windows = make_windows(curve, cfg.W).astype(np.float32)
    template = subject_template(cfg, rig, subject_index)
    rng = make_rng([cfg.seed, subject_index, sentence_index, 0x4E015E])
    meshes = template + rig.displacements(windows)
    if cfg.noise_floor > 0:
        meshes = meshes + cfg.noise_floor * rng.normal(size=meshes.shape)
    return Sequence(manifest, subject_index, windows, meshes, template, curve)


def all_manifests(cfg: SynthConfig) -> list[SequenceManifest]:
    out = []
    for s in range(cfg.subjects):
        for k in range(cfg.sentences):
            subj, sent = subject_name(s), sentence_name(k)
            out.append(SequenceManifest(
                subject_id=subj, sentence_id=sent, frame_count=cfg.frames,
                feature_path=f"features/{subj}_{sent}.gdpf",
                template_path=f"templates/{subj}.obj",
                mesh_dir=f"meshes/{subj}_{sent}",
                fps=cfg.fps,
            ))
    return out


@dataclass
class SyntheticDataset:
    cfg: SynthConfig
    rig: Rig
    split: DatasetSplit
    sequences: dict[str, Sequence]


def generate_synthetic_dataset(cfg: SynthConfig, out_dir=None) -> SyntheticDataset:
    """Generate the split's sequences in memory and, with ``out_dir``, on disk."""
    rig = build_rig(cfg)
    split = split_dataset(all_manifests(cfg), seed=cfg.seed)
    seqs = {}
    for part in split.parts().values():
        for m in part:
            si = int(m.subject_id.removeprefix("subject"))
            ki = int(m.sentence_id.removeprefix("sentence"))
            seqs[m.key] = synthesize_sequence(cfg, rig, si, ki, m)
    ds = SyntheticDataset(cfg, rig, split, seqs)
    if out_dir is not None:
        write_dataset(ds, out_dir)
    return ds


INDEX_NAME = "index.json"


def write_dataset(ds: SyntheticDataset, out_dir) -> Path:
    root = Path(out_dir)
    for sub in ("features", "templates", "meshes"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    written_templates = set()
    for seq in ds.sequences.values():
        m = seq.manifest
        if m.template_path not in written_templates:
            write_mesh(Mesh(seq.template, ds.rig.faces), root / m.template_path)
            written_templates.add(m.template_path)
        write_feature_file(root / m.feature_path, seq.windows)
        mesh_dir = root / m.mesh_dir
        mesh_dir.mkdir(parents=True, exist_ok=True)
        for t in range(m.frame_count):
            # frames share the template's faces; only vertices are stored
            (mesh_dir / f"{t:04d}.obj").write_text(format_obj(seq.meshes[t]), encoding="utf-8")
    index = {
        "format": "gdpnet-dataset",
        "version": 1,
        "config": ds.cfg.to_dict(),
        "split": {part: [asdict(m) for m in ms] for part, ms in ds.split.parts().items()},
    }
    path = root / INDEX_NAME
    path.write_text(json.dumps(index, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _index_path(path) -> Path:
    p = Path(path)
    return p / INDEX_NAME if p.is_dir() else p


def load_split(path) -> tuple[DatasetSplit, dict]:
    index_path = _index_path(path)
    try:
        index = json.loads(index_path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"dataset index not found: {index_path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{index_path}: invalid JSON ({exc})") from None
    if index.get("format") != "gdpnet-dataset":
        raise DataError(f"{index_path}: not a gdpnet dataset index")
    parts = {part: [SequenceManifest(**m) for m in index["split"][part]] for part in ("train", "val", "test")}
    return DatasetSplit(**parts), index


def load_mesh_vertices(path) -> np.ndarray:
    return load_mesh(path).vertices


def load_sequence(root, manifest: SequenceManifest, subject_index: int = -1) -> Sequence:
    root = Path(root)
    windows = load_feature_file(root / manifest.feature_path)
    if windows.shape[0] != manifest.frame_count:
        raise DataError(f"{manifest.feature_path}: {windows.shape[0]} frames, manifest says {manifest.frame_count}")
    template = load_mesh(root / manifest.template_path).vertices
    frames = sorted(os.listdir(root / manifest.mesh_dir))
    if len(frames) != manifest.frame_count:
        raise DataError(f"{manifest.mesh_dir}: {len(frames)} meshes, manifest says {manifest.frame_count}")
    meshes = np.stack([load_mesh(root / manifest.mesh_dir / f).vertices for f in frames]) if frames \
        else np.zeros((0,) + template.shape)
    if meshes.shape[1:] != template.shape:
        raise DataError(f"{manifest.mesh_dir}: vertex count differs from template")
    return Sequence(manifest, subject_index, windows, meshes, template)


@dataclass
class Dataset:
    root: Path
    split: DatasetSplit
    index: dict
    sequences: dict[str, Sequence]

    @property
    def train_subjects(self) -> list[str]:
        return self.split.subjects("train")

    @property
    def N(self) -> int:
        return next(iter(self.sequences.values())).template.shape[0]

    def part(self, name: str) -> list[Sequence]:
        return [self.sequences[m.key] for m in self.split.parts()[name]]


def load_dataset(path) -> Dataset:
    """Load every sequence of a dataset index into memory."""
    index_path = _index_path(path)
    split, index = load_split(index_path)
    root = index_path.parent
    subjects = split.subjects("train")
    seqs = {}
    for part in split.parts().values():
        for m in part:
            si = subjects.index(m.subject_id) if m.subject_id in subjects else -1
            seqs[m.key] = load_sequence(root, m, si)
    return Dataset(root, split, index, seqs)


def in_memory_dataset(ds: SyntheticDataset) -> Dataset:
    """Wrap a freshly generated dataset without going through the filesystem."""
    subjects = ds.split.subjects("train")
    seqs = {}
    for key, s in ds.sequences.items():
        si = subjects.index(s.manifest.subject_id) if s.manifest.subject_id in subjects else -1
        seqs[key] = Sequence(s.manifest, si, s.windows, s.meshes, s.template)
    index = {"format": "gdpnet-dataset", "version": 1, "config": ds.cfg.to_dict()}
    return Dataset(Path("."), ds.split, index, seqs)


# ---------------------------------------------------------------------------
# Noise


NOISE_KINDS = ("gaussian", "outlier", "dropout")


def inject_noise(windows, kind: str, level: float, rng: np.random.Generator | None = None) -> np.ndarray:
    """Corrupt ``(F, W, D)`` feature windows.

    ``gaussian`` adds ``N(0, level * channel_std)``; ``outlier`` replaces
    ``round(level * F)`` frames with +-5 channel-std spikes; ``dropout`` zeroes
    that many frames.
    """
    w = np.asarray(windows)
    if kind not in NOISE_KINDS:
        raise ValueError(f"unknown noise kind {kind!r}; expected one of {NOISE_KINDS}")
    if level < 0:
        raise ValueError(f"noise level must be >= 0, got {level}")
    if kind != "gaussian" and level > 1:
        raise ValueError(f"{kind} level is a fraction and must be <= 1, got {level}")
    out = np.array(w, copy=True)
    if level == 0 or w.shape[0] == 0:
        return out
    rng = rng if rng is not None else make_rng(0)
    std = w.reshape(-1, w.shape[-1]).std(axis=0)
    if kind == "gaussian":
        out = out + (level * std) * rng.normal(size=w.shape)
        return out.astype(w.dtype)
    count = int(round(level * w.shape[0]))
    frames = rng.choice(w.shape[0], size=count, replace=False)
    if kind == "dropout":
        out[frames] = 0
    else:
        signs = rng.choice(np.array([-1.0, 1.0]), size=(count,) + w.shape[1:])
        out[frames] = (5.0 * std * signs).astype(w.dtype)
    return out


# ---------------------------------------------------------------------------
# Reference errors


def mean_vertex_error(pred, truth) -> np.ndarray:
    """Per-frame mean Euclidean vertex distance for ``(..., N, 3)`` arrays."""
    return np.linalg.norm(np.asarray(pred) - np.asarray(truth), axis=-1).mean(axis=-1)


def zero_displacement_error(sequences) -> float:
    """Frame-weighted error of predicting the template for every frame."""
    errs = np.concatenate([mean_vertex_error(s.template, s.meshes) for s in sequences])
    return float(errs.mean())


ORACLE_RCONDS = (1e-1, 3e-2, 1e-2, 3e-3, 1e-3, 1e-4)


def _flat_design(seqs):
    x = np.concatenate([s.windows.reshape(s.windows.shape[0], -1) for s in seqs]).astype(np.float64)
    return np.hstack([x, np.ones((x.shape[0], 1))])


def _oracle_score(seqs, pred) -> float:
    errs = []
    start = 0
    for s in seqs:
        f = s.meshes.shape[0]
        errs.append(mean_vertex_error(s.template + pred[start : start + f].reshape(s.meshes.shape), s.meshes))
        start += f
    return float(np.concatenate(errs).mean())


def linear_oracle_error(train, heldout, val=None, rconds=ORACLE_RCONDS) -> float:
    """Linear map from flat windows to displacements, scored on ``heldout``.

    The windows overlap heavily so the design is near-singular; the map is a
    truncated-SVD least-squares fit whose cutoff (relative to the largest
    singular value) is picked on ``val``, or on ``heldout`` when no
    validation sequences are given.
    """
    x = _flat_design(train)
    y = np.concatenate([s.displacements.reshape(s.meshes.shape[0], -1) for s in train])
    u, sv, vt = np.linalg.svd(x, full_matrices=False)
    uty = u.T @ y
    pick = heldout if val is None else val
    xp, xh = _flat_design(pick), _flat_design(heldout)
    best = None
    for rc in rconds:
        keep = sv > rc * sv[0]
        coef = vt[keep].T @ (uty[keep] / sv[keep, None])
        score = _oracle_score(pick, xp @ coef)
        if best is None or score < best[0]:
            best = (score, coef)
    return _oracle_score(heldout, xh @ best[1])
