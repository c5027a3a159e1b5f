"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line PASS/FAIL verdict; the lines are echoed in the
terminal summary (see conftest.py) so a plain ``pytest -v`` run shows them.
"""

import contextlib
import time
import warnings
import zlib

import numpy as np
import pytest

from gdpnet.checkpoint import (CheckpointMagicError, CheckpointVersionError, CorruptBlobError, load_checkpoint,
                               save_checkpoint)
from gdpnet.data import (BadMagicError, SynthConfig, TruncatedFileError, VersionMismatchError,
                         generate_synthetic_dataset, in_memory_dataset, linear_oracle_error, load_feature_file,
                         write_feature_file, zero_displacement_error)
from gdpnet.evaluate import DEFAULT_NOISE_GRID, evaluate, predict_windows
from gdpnet.geometry import decode_geometry, encode_geometry, fit_geometry_encoder
from gdpnet.gradcheck import GradcheckConfig, run_gradcheck
from gdpnet.losses import KernelSpec, huber_elementwise, hsic_empirical
from gdpnet.model import VARIANTS, GDPNet, ModelConfig, encoder_input_channels, time_lengths
from gdpnet.train import TrainConfig, ablation_table, format_ablation, load_model, run_ablation, train

pytestmark = pytest.mark.slow

VERDICTS: dict[str, str] = {}
LIN = KernelSpec("linear")


@contextlib.contextmanager
def criterion(key, title):
    detail = []
    try:
        yield detail
    except BaseException as exc:
        VERDICTS[key] = f"criterion {key:>4} FAIL  {title}: {type(exc).__name__}: {str(exc).splitlines()[0][:160]}"
        raise
    VERDICTS[key] = f"criterion {key:>4} PASS  {title}" + (f" ({'; '.join(detail)})" if detail else "")


# ---------------------------------------------------------------------------
# Shared end-to-end runs on the default synthetic dataset


@pytest.fixture(scope="session")
def default_dataset():
    return in_memory_dataset(generate_synthetic_dataset(SynthConfig()))


@pytest.fixture(scope="session")
def ablation(default_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("ablation")
    t0 = time.perf_counter()
    rows = run_ablation(default_dataset, "abcdef", (0, 1, 2), TrainConfig(), None, out)
    return {"rows": rows, "dir": out, "seconds": time.perf_counter() - t0}


@pytest.fixture(scope="session")
def rerun(default_dataset, ablation, tmp_path_factory):
    """Second variant-f seed-0 run, recording the guidance latents after each epoch."""
    out = tmp_path_factory.mktemp("rerun")
    seen = []

    def record(trainer):
        seen.append((trainer.epoch, trainer.r_hat_crc, zlib.crc32(trainer.data.r_hat.tobytes())))

    res = train(TrainConfig(variant="f", seed=0), default_dataset, out, epoch_callback=record)
    return {"dir": out, "result": res, "crcs": seen}


# ---------------------------------------------------------------------------


def test_c1_gradient_correctness():
    with criterion("1", "gradcheck a-f, >= 20 seeds, worst rel err <= 1e-4, < 2 min") as d:
        cfg = GradcheckConfig()
        assert cfg.seeds >= 20 and cfg.variants == "abcdef"
        t0 = time.perf_counter()
        worst = run_gradcheck(cfg)
        dt = time.perf_counter() - t0
        top = max(worst.values())
        d += [f"worst {top:.2e}", f"{dt:.1f}s"]
        assert set(worst) == set("abcdef")
        assert top <= 1e-4
        assert dt < 120


def test_c2_hsic_suite():
    with criterion("2", "HSIC oracle, non-negativity, constant input, a^2 scaling"):
        v, _ = hsic_empirical(np.array([0.0, 1.0]), np.array([0.0, 1.0]), LIN, LIN)
        assert abs(v - 0.25) <= 1e-12
        r = np.random.default_rng(20)
        for _ in range(100):
            m = int(r.integers(2, 33))
            x, y = r.normal(size=(m, 5)), r.normal(size=(m, 3))
            for k1, k2 in ((KernelSpec(), KernelSpec()), (LIN, LIN), (KernelSpec(), LIN)):
                assert hsic_empirical(x, y, k1, k2)[0] >= -1e-12
        y = r.normal(size=(8, 3))
        for k in (KernelSpec(), LIN):
            assert abs(hsic_empirical(np.full((8, 4), 1.7), y, k, KernelSpec())[0]) <= 1e-12
        x, y = r.normal(size=(10, 4)), r.normal(size=(10, 2))
        base = hsic_empirical(x, y, LIN, LIN)[0]
        for a in (0.3, 2.0, 7.5):
            scaled = hsic_empirical(a * x, y, LIN, LIN)[0]
            assert abs(scaled - a * a * base) <= 1e-10 * abs(a * a * base)


def test_c3_huber_suite():
    with criterion("3", "Huber knee continuity, quadratic zone, exact values"):
        for xi in (0.5, 1.0, 2.0):
            for s in (1.0, -1.0):
                lo, dlo = huber_elementwise(np.array([s * xi - s * 1e-13]), xi)
                hi, dhi = huber_elementwise(np.array([s * xi + s * 1e-13]), xi)
                assert abs(lo[0] - hi[0]) <= 1e-12 and abs(dlo[0] - dhi[0]) <= 1e-12
            d = np.linspace(-xi, xi, 101)
            assert np.array_equal(huber_elementwise(d, xi)[0], d * d / 2)
        v, _ = huber_elementwise(np.array([0.0, 1.0, 2.0, -3.0]), 1.0)
        assert v.tolist() == [0.0, 0.5, 1.5, 2.5]


def test_c4_architecture_bookkeeping():
    with criterion("4", "encoder channels 31/47/95/191, time 16->1, audits a-f"):
        cfg = ModelConfig(D=29, S=2, base_filters=32)
        assert [encoder_input_channels(k, cfg) for k in (1, 2, 3, 4)] == [31, 47, 95, 191]
        assert time_lengths(16) == [16, 8, 4, 2, 1]
        for v in VARIANTS:
            GDPNet(cfg.with_variant(v)).audit()


def test_c5_learnability(default_dataset, ablation):
    with criterion("5", "variant f: test error <= 0.5 x baseline and <= 3 x oracle, < 10 min") as d:
        row = next(r for r in ablation["rows"] if r.variant == "f" and r.seed == 0)
        train_s, val_s, test_s = (default_dataset.part(p) for p in ("train", "val", "test"))
        baseline = zero_displacement_error(test_s)
        oracle = linear_oracle_error(train_s, test_s, val_s)
        d += [f"test {row.test_error:.4f}", f"baseline {baseline:.4f}", f"oracle {oracle:.4f}",
              f"{row.wall_seconds:.0f}s"]
        assert row.test_error <= 0.5 * baseline
        assert row.test_error <= 3.0 * oracle
        assert row.wall_seconds < 600


def test_c6_ablation_harness(ablation):
    with criterion("6", "a-f grid of val/test/wall; f within 5% of a over 3 seeds") as d:
        table = ablation_table(ablation["rows"])
        assert [r["variant"] for r in table] == list("abcdef")
        for r in table:
            for key in ("val_error", "test_error", "wall_seconds"):
                assert np.isfinite(r[key])
        text = format_ablation(table)
        assert text.count("\n") >= 8
        for name in ("ablation.md", "ablation_runs.csv", "ablation.json"):
            assert (ablation["dir"] / name).exists()
        errs = {r["variant"]: r["test_error"] for r in table}
        d += [f"a {errs['a']:.4f}", f"f {errs['f']:.4f}", f"{ablation['seconds']:.0f}s total"]
        assert errs["f"] <= 1.05 * errs["a"]


def test_c7_determinism(ablation, rerun):
    with criterion("7", "identical runs give byte-identical checkpoints and metrics"):
        first, second = ablation["dir"] / "variant_f" / "seed_0", rerun["dir"]
        for name in ("last.ckpt", "best.ckpt", "metrics.csv"):
            assert (first / name).read_bytes() == (second / name).read_bytes(), name


def test_c8_robustness_report(default_dataset, ablation):
    with criterion("8", "default noise grid runs; gaussian 0/.05/.1/.2 non-decreasing over 3 seeds") as d:
        levels = (0.0, 0.05, 0.1, 0.2)
        per_seed = []
        for s in (0, 1, 2):
            model, _, _ = load_model(ablation["dir"] / "variant_f" / f"seed_{s}" / "best.ckpt")
            rep = evaluate(model, default_dataset, list(DEFAULT_NOISE_GRID), seed=s)
            assert len(rep.noise_rows) == len(DEFAULT_NOISE_GRID)
            assert all(np.isfinite(r["error"]) for r in rep.noise_rows)
            by = {r["level"]: r["error"] for r in rep.noise_rows if r["kind"] == "gaussian"}
            by[0.0] = rep.overall["all"]
            per_seed.append([by[lv] for lv in levels])
        means = np.mean(per_seed, axis=0)
        d.append("means " + " ".join(f"{m:.4f}" for m in means))
        assert np.all(np.diff(means) >= 0)


def test_c8b_subject_conditioning(default_dataset, ablation):
    with criterion("8b", "subject one-hot changes trained output"):
        model, _, _ = load_model(ablation["dir"] / "variant_f" / "seed_0" / "best.ckpt")
        seq = default_dataset.part("test")[0]
        outs = [predict_windows(model, seq.windows, seq.template, s) for s in range(model.cfg.S)]
        assert model.cfg.S >= 2
        assert np.any(np.abs(outs[0] - outs[1]).max(axis=(1, 2)) > 0)


def test_c9_geometry_guidance(default_dataset, rerun):
    with criterion("9", "projection idempotence <= 1e-8; guidance latents bit-stable") as d:
        seqs = default_dataset.part("train")
        meshes = np.concatenate([s.meshes for s in seqs]).astype(np.float64)
        tmpls = np.concatenate([np.broadcast_to(s.template, s.meshes.shape) for s in seqs]).astype(np.float64)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            enc = fit_geometry_encoder(meshes, tmpls, 64)
        once = decode_geometry(encode_geometry(meshes, tmpls, enc), tmpls, enc)
        twice = decode_geometry(encode_geometry(once, tmpls, enc), tmpls, enc)
        gap = float(np.abs(twice - once).max())
        d.append(f"idempotence {gap:.1e}")
        assert gap <= 1e-8
        crcs = rerun["crcs"]
        assert len(crcs) == 50
        assert len({c for _, c, _ in crcs} | {c for _, _, c in crcs}) == 1
        header, _ = load_checkpoint(rerun["dir"] / "last.ckpt")
        assert header["r_hat_crc32"] == crcs[0][1]


def test_c10_formats(tmp_path):
    with criterion("10", "feature/checkpoint round-trips and distinct errors"):
        r = np.random.default_rng(10)
        w = r.normal(size=(5, 16, 29)).astype(np.float32)
        fp = tmp_path / "x.gdpf"
        write_feature_file(fp, w)
        back = load_feature_file(fp)
        assert back.tobytes() == w.tobytes() and back.dtype == np.float32
        raw = fp.read_bytes()
        cases = {BadMagicError: b"XXXX" + raw[4:], TruncatedFileError: raw[:-3],
                 VersionMismatchError: raw[:4] + (9).to_bytes(4, "little") + raw[8:]}
        for err, data in cases.items():
            fp.write_bytes(data)
            with pytest.raises(err):
                load_feature_file(fp)
        cp = tmp_path / "m.ckpt"
        blobs = {"a": r.normal(size=(3, 4)).astype(np.float32), "geo": r.normal(size=(2, 6))}
        save_checkpoint(cp, {"kind": "test"}, blobs, keep_float64=("geo",))
        header, got = load_checkpoint(cp)
        assert header["kind"] == "test"
        assert got["a"].tobytes() == blobs["a"].tobytes() and got["geo"].tobytes() == blobs["geo"].tobytes()
        raw = cp.read_bytes()
        flipped = bytearray(raw)
        flipped[-1] ^= 0xFF
        cases = [(CheckpointMagicError, b"NOPE" + raw[4:]),
                 (CheckpointVersionError, raw[:4] + (7).to_bytes(4, "little") + raw[8:]),
                 (CorruptBlobError, raw[:-5]), (CorruptBlobError, bytes(flipped)), (CorruptBlobError, raw + b"\0")]
        for err, data in cases:
            cp.write_bytes(data)
            with pytest.raises(err):
                load_checkpoint(cp)
        assert len({CheckpointMagicError, CheckpointVersionError, CorruptBlobError,
                    BadMagicError, TruncatedFileError, VersionMismatchError}) == 6
