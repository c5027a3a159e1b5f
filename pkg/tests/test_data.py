import filecmp
import struct
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from gdpnet.data import (BadMagicError, DataError, MeshFormatError, SequenceManifest, SplitError, SynthConfig,
                         TruncatedFileError, VersionMismatchError, build_rig, feature_curve, format_obj,
                         generate_synthetic_dataset, held_out_count, icosphere, in_memory_dataset, inject_noise,
                         linear_oracle_error, load_dataset, load_feature_file, load_mesh, make_windows, Mesh,
                         split_dataset, split_overlaps, write_feature_file, write_mesh, zero_displacement_error)

CUBE = "\n".join("v %d %d %d" % (x, y, z) for x in (0, 1) for y in (0, 1) for z in (0, 1)) + "\nf 1 2 3\n"


class TestFeatureFile:
    def test_roundtrip_bitwise(self, tmp_path, rng):
        w = rng.normal(size=(7, 16, 29)).astype(np.float32)
        write_feature_file(tmp_path / "a.gdpf", w)
        back = load_feature_file(tmp_path / "a.gdpf")
        assert back.dtype == np.float32 and back.tobytes() == w.tobytes()

    def test_layout(self, tmp_path):
        write_feature_file(tmp_path / "a.gdpf", np.zeros((2, 3, 4), dtype=np.float32))
        data = (tmp_path / "a.gdpf").read_bytes()
        assert struct.unpack_from("<4sIIII", data) == (b"GDPF", 1, 2, 3, 4)
        assert len(data) == 20 + 4 * 24

    def test_empty(self, tmp_path):
        write_feature_file(tmp_path / "e.gdpf", np.zeros((0, 16, 29), dtype=np.float32))
        assert load_feature_file(tmp_path / "e.gdpf").shape == (0, 16, 29)

    def test_distinct_errors(self, tmp_path):
        write_feature_file(tmp_path / "a.gdpf", np.ones((2, 2, 2), dtype=np.float32))
        good = (tmp_path / "a.gdpf").read_bytes()
        (tmp_path / "m").write_bytes(b"NOPE" + good[4:])
        (tmp_path / "t").write_bytes(good[:-1])
        (tmp_path / "h").write_bytes(good[:10])
        (tmp_path / "v").write_bytes(good[:4] + struct.pack("<I", 2) + good[8:])
        with pytest.raises(BadMagicError, match="bad magic"):
            load_feature_file(tmp_path / "m")
        with pytest.raises(TruncatedFileError):
            load_feature_file(tmp_path / "t")
        with pytest.raises(TruncatedFileError):
            load_feature_file(tmp_path / "h")
        with pytest.raises(VersionMismatchError):
            load_feature_file(tmp_path / "v")
        assert len({BadMagicError, TruncatedFileError, VersionMismatchError}) == 3


class TestMesh:
    def test_cube(self, tmp_path):
        (tmp_path / "c.obj").write_text(CUBE)
        m = load_mesh(tmp_path / "c.obj")
        assert m.N == 8 and m.faces == ["f 1 2 3"]

    def test_roundtrip(self, tmp_path, rng):
        v = 100 * rng.normal(size=(20, 3))
        write_mesh(Mesh(v, ["f 1 2 3", "f 3 2 4"]), tmp_path / "m.obj")
        back = load_mesh(tmp_path / "m.obj")
        assert np.max(np.abs(back.vertices - v)) <= 1e-6
        assert back.faces == ["f 1 2 3", "f 3 2 4"]

    def test_comments_and_normals_ignored(self, tmp_path):
        text = ("# exported\nmtllib x.mtl\no face\nv 1.0 2.0 3.0\nvn 0 0 1\nvt 0.5 0.5\n"
                "v 4 5 6 1.0\n\ng grp\ns off\nv -1 -2 -3\nf 1//1 2//1 3//1\n")
        (tmp_path / "n.obj").write_text(text)
        m = load_mesh(tmp_path / "n.obj")
        assert m.vertices.tolist() == [[1, 2, 3], [4, 5, 6], [-1, -2, -3]]
        assert m.faces == ["f 1//1 2//1 3//1"]

    @pytest.mark.parametrize("bad,line", [("v 1 2\n", 2), ("v 1 x 3\n", 2), ("bogus 1\n", 2), ("f\n", 2)])
    def test_malformed_line_number(self, tmp_path, bad, line):
        (tmp_path / "b.obj").write_text("v 0 0 0\n" + bad)
        with pytest.raises(MeshFormatError) as info:
            load_mesh(tmp_path / "b.obj")
        assert info.value.lineno == line and f":{line}:" in str(info.value)

    def test_icosphere_sizes(self):
        for k, n in enumerate((12, 42, 162, 642)):
            v, f = icosphere(k)
            assert v.shape == (n, 3) and len(f) == 20 * 4 ** k
            np.testing.assert_allclose(np.linalg.norm(v, axis=1), 1.0)


def manifests(n_subjects, n_sentences):
    return [SequenceManifest(f"s{i:02d}", f"k{j:02d}", 10, "", "", "") for i in range(n_subjects)
            for j in range(n_sentences)]


class TestSplit:
    @pytest.mark.parametrize("n,expect", [(12, (8, 2, 2)), (4, (2, 1, 1)), (6, (4, 1, 1)), (9, (5, 2, 2))])
    def test_proportions(self, n, expect):
        split = split_dataset(manifests(n, 10))
        assert tuple(len(split.subjects(p)) for p in ("train", "val", "test")) == expect
        assert held_out_count(n) == oracles.held_out(n)

    @given(n=st.integers(4, 30), k=st.integers(3, 20), seed=st.integers(0, 100))
    def test_disjoint(self, n, k, seed):
        split = split_dataset(manifests(n, k), seed)
        assert all(not v for v in split_overlaps(split).values())
        assert all(split.parts()[p] for p in ("train", "val", "test"))

    def test_too_few(self):
        with pytest.raises(SplitError, match="need >= 4 subjects"):
            split_dataset(manifests(3, 10))
        with pytest.raises(SplitError):
            split_dataset(manifests(5, 2))


class TestNoise:
    def test_level_zero_identity(self, rng):
        w = rng.normal(size=(30, 16, 4)).astype(np.float32)
        for kind in ("gaussian", "outlier", "dropout"):
            np.testing.assert_array_equal(inject_noise(w, kind, 0.0), w)

    def test_gaussian_statistics(self):
        r = np.random.default_rng(0)
        w = r.normal(size=(1000, 16, 5)) * np.array([0.5, 1, 2, 4, 8])
        out = inject_noise(w, "gaussian", 0.1, np.random.default_rng(1))
        ratio = (out - w).reshape(-1, 5).std(axis=0) / (0.1 * w.reshape(-1, 5).std(axis=0))
        assert np.all(np.abs(ratio - 1) <= 0.2)

    def test_outlier_count(self, rng):
        w = rng.normal(size=(100, 16, 4))
        out = inject_noise(w, "outlier", 0.5, np.random.default_rng(3))
        changed = np.any(out != w, axis=(1, 2))
        assert changed.sum() == 50
        std = w.reshape(-1, 4).std(axis=0)
        np.testing.assert_allclose(np.abs(out[changed]), np.broadcast_to(5 * std, out[changed].shape))

    def test_dropout(self, rng):
        w = rng.normal(size=(40, 16, 4)) + 3
        out = inject_noise(w, "dropout", 0.25, np.random.default_rng(0))
        zero = np.all(out == 0, axis=(1, 2))
        assert zero.sum() == 10
        np.testing.assert_array_equal(out[~zero], w[~zero])

    def test_seeded(self, rng):
        w = rng.normal(size=(20, 16, 4))
        a = inject_noise(w, "outlier", 0.2, np.random.default_rng(5))
        b = inject_noise(w, "outlier", 0.2, np.random.default_rng(5))
        np.testing.assert_array_equal(a, b)

    def test_errors(self, rng):
        w = rng.normal(size=(5, 16, 2))
        with pytest.raises(ValueError):
            inject_noise(w, "outlier", 1.5)
        with pytest.raises(ValueError):
            inject_noise(w, "gaussian", -0.1)
        with pytest.raises(ValueError):
            inject_noise(w, "babble", 0.1)


class TestSynthetic:
    @given(F=st.integers(1, 40), W=st.integers(1, 20), seed=st.integers(0, 1000))
    def test_windows_are_clamped_slices(self, F, W, seed):
        curve = np.random.default_rng(seed).normal(size=(F, 3))
        win = make_windows(curve, W)
        for t in range(F):
            for j in range(W):
                src = min(max(t + j - W // 2, 0), F - 1)
                assert np.array_equal(win[t, j], curve[src])

    def test_zero_amplitude_gives_template(self):
        cfg = SynthConfig(sentences=3, frames=10, N=42, feature_amplitude=0.0, noise_floor=0.0)
        ds = generate_synthetic_dataset(cfg)
        for s in ds.sequences.values():
            np.testing.assert_array_equal(s.meshes, np.broadcast_to(s.template, s.meshes.shape))

    def test_independent_channel_curves(self):
        cfg = SynthConfig(feature_factors=0, frames=30)
        c = feature_curve(cfg, 0, 0)
        assert c.shape == (30, cfg.D)

    def test_regenerate_byte_identical(self, tmp_path, tiny_synth):
        generate_synthetic_dataset(tiny_synth, tmp_path / "a")
        generate_synthetic_dataset(tiny_synth, tmp_path / "b")
        cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")

        def same(c):
            _, mismatch, errors = filecmp.cmpfiles(c.left, c.right, c.common_files, shallow=False)
            return not mismatch and not errors and not c.left_only and not c.right_only and \
                all(same(sub) for sub in c.subdirs.values())
        assert same(cmp)

    def test_disk_roundtrip(self, tmp_path, tiny_synth):
        ds = generate_synthetic_dataset(tiny_synth, tmp_path / "d")
        loaded = load_dataset(tmp_path / "d")
        mem = in_memory_dataset(ds)
        assert loaded.train_subjects == mem.train_subjects
        for key, s in mem.sequences.items():
            t = loaded.sequences[key]
            assert t.windows.tobytes() == s.windows.tobytes()
            assert np.max(np.abs(t.meshes - s.meshes)) <= 5e-7
            assert t.subject_index == s.subject_index

    def test_missing_index(self, tmp_path):
        with pytest.raises(DataError):
            load_dataset(tmp_path)

    def test_bad_config(self):
        with pytest.raises(ValueError):
            SynthConfig(N=100)
        with pytest.raises(KeyError):
            SynthConfig.from_dict({"nope": 1})

    def test_rig_zero_input(self):
        rig = build_rig(SynthConfig(N=42))
        assert not rig.displacements(np.zeros((3, 16, 29))).any()

    def test_oracle_reaches_noise_floor_in_linear_regime(self):
        # with tanh in its linear range the least-squares map is the generative map
        cfg = SynthConfig(feature_amplitude=0.05, blendshape_amplitude=200.0)
        ds = in_memory_dataset(generate_synthetic_dataset(cfg))
        noise_only = cfg.noise_floor * np.sqrt(8 / np.pi)  # mean norm of an isotropic 3-D gaussian
        oracle = linear_oracle_error(ds.part("train"), ds.part("test"), ds.part("val"))
        assert oracle <= 1.5 * noise_only
        assert oracle <= 0.2 * zero_displacement_error(ds.part("test"))
