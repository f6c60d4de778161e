import json

import numpy as np
import pytest

from hybridbnn import data


def _vols(arrays, labels=None):
    labels = labels or [i % 2 for i in range(len(arrays))]
    return [data.Volume(np.asarray(a, np.float32), y, f"v{i}") for i, (a, y) in enumerate(zip(arrays, labels))]


class TestGenerate:
    def test_null_signal(self):
        vols = data.generate(data.GenConfig(n_samples=60, side=16, amplitudes=(0.0, 0.0), seed=4))
        m0 = np.array([v.data.mean() for v in vols if v.label == 0], np.float64)
        m1 = np.array([v.data.mean() for v in vols if v.label == 1], np.float64)
        t = (m0.mean() - m1.mean()) / np.sqrt(m0.var(ddof=1) / len(m0) + m1.var(ddof=1) / len(m1))
        assert abs(t) < 3

    def test_central_probe_separates(self):
        cfg = data.GenConfig(seed=1)
        vols, _ = data.normalize_global(data.generate(cfg))
        c = cfg.side // 2
        r = cfg.side // 8
        feature = np.array([v.data[0, c - r:c + r, c - r:c + r, c - r:c + r].mean() for v in vols])
        labels = np.array([v.label for v in vols])
        fit, held = slice(0, len(vols) // 2), slice(len(vols) // 2, None)
        candidates = np.sort(feature[fit])
        accs = [np.mean((feature[fit] > t) == labels[fit]) for t in candidates]
        threshold = candidates[int(np.argmax(accs))]
        assert np.mean((feature[held] > threshold) == labels[held]) >= 0.9

    def test_balance_and_count(self):
        vols = data.generate(data.GenConfig(side=8, n_samples=376))
        labels = [v.label for v in vols]
        assert len(vols) == 376 and labels.count(0) == labels.count(1) == 188

    def test_deterministic(self):
        cfg = data.GenConfig(n_samples=6, side=16, seed=9, hard_fraction=0.5)
        a, b = data.generate(cfg), data.generate(cfg, threads=3)
        assert all(x.data.tobytes() == y.data.tobytes() and x.label == y.label and x.hard == y.hard
                   for x, y in zip(a, b))

    def test_hard_fraction(self):
        vols = data.generate(data.GenConfig(n_samples=400, side=8, hard_fraction=0.1, seed=2))
        frac = np.mean([v.hard for v in vols])
        assert 0.06 < frac < 0.14
        assert not any(v.hard for v in data.generate(data.GenConfig(n_samples=50, side=8)))

    def test_raw_side_crop(self):
        vols = data.generate(data.GenConfig(n_samples=2, side=8, raw_side=12))
        assert vols[0].data.shape == (1, 8, 8, 8)

    def test_config_errors(self):
        with pytest.raises(data.ConfigurationError):
            data.GenConfig(n_samples=1)
        with pytest.raises(data.ConfigurationError):
            data.GenConfig(balance=1.0)
        with pytest.raises(data.ConfigurationError):
            data.GenConfig(side=12)


class TestNormalize:
    def test_already_unit(self):
        a = np.linspace(0, 1, 8).reshape(1, 2, 2, 2)
        out, norm = data.normalize_global(_vols([a, a * 0.5]))
        np.testing.assert_allclose(out[0].data, a, atol=1e-7)
        assert norm == (0.0, 1.0)

    def test_shift_invariant(self):
        rng = np.random.default_rng(0)
        arrays = [rng.normal(size=(1, 4, 4, 4)) for _ in range(3)]
        base, _ = data.normalize_global(_vols(arrays))
        shifted, _ = data.normalize_global(_vols([a + 5 for a in arrays]))
        for x, y in zip(base, shifted):
            np.testing.assert_allclose(x.data, y.data, atol=1e-6)

    def test_extremes_and_idempotence(self):
        rng = np.random.default_rng(1)
        vols = _vols([rng.normal(size=(1, 4, 4, 4)) * 3 + 2 for _ in range(4)])
        once, _ = data.normalize_global(vols)
        assert min(v.data.min() for v in once) == 0.0
        assert max(v.data.max() for v in once) == 1.0
        twice, _ = data.normalize_global(once)
        for x, y in zip(once, twice):
            np.testing.assert_allclose(x.data, y.data, atol=1e-7)

    def test_degenerate(self):
        with pytest.raises(data.DegenerateDataError):
            data.normalize_global(_vols([np.ones((1, 2, 2, 2))] * 2))
        with pytest.raises(data.DegenerateDataError):
            data.normalize_global([])


class TestSplit:
    def test_stratified_counts(self):
        vols = _vols([np.zeros((1, 2, 2, 2))] * 10)
        tr, te = data.split(vols, 0.8, seed=3)
        assert len(tr) == 8 and len(te) == 2
        assert sorted(v.label for v in te) == [0, 1]
        ids = [v.id for v in tr + te]
        assert sorted(ids) == sorted(v.id for v in vols) and len(set(ids)) == 10

    def test_deterministic(self):
        vols = _vols([np.zeros((1, 2, 2, 2))] * 20)
        a = [v.id for v in data.split(vols, 0.8, 5)[1]]
        b = [v.id for v in data.split(vols, 0.8, 5)[1]]
        c = [v.id for v in data.split(vols, 0.8, 6)[1]]
        assert a == b and a != c

    @pytest.mark.parametrize("n", [11, 37, 376])
    def test_per_class_fraction(self, n):
        labels = [int(i < n // 3) for i in range(n)]
        vols = _vols([np.zeros((1, 2, 2, 2))] * n, labels)
        tr, _ = data.split(vols, 0.8, 1)
        for cls in (0, 1):
            total = labels.count(cls)
            got = sum(1 for v in tr if v.label == cls)
            assert abs(got / total - 0.8) <= 1 / total

    def test_tiny_class(self):
        with pytest.raises(data.ConfigurationError):
            data.split(_vols([np.zeros((1, 2, 2, 2))] * 3), 0.8, 1)


class TestCrop:
    def test_identity_and_faces(self):
        v = np.arange(100**3, dtype=np.float32).reshape(1, 100, 100, 100)
        assert data.center_crop(v, 100).tobytes() == v.tobytes()
        np.testing.assert_array_equal(data.center_crop(v, 96), v[:, 2:98, 2:98, 2:98])

    def test_odd_remainder_high_side(self):
        v = np.arange(5**3).reshape(5, 5, 5)
        np.testing.assert_array_equal(data.center_crop(v, 2), v[1:3, 1:3, 1:3])

    @pytest.mark.parametrize("mid,final", [(11, 7), (9, 5), (12, 6)])
    def test_composition(self, mid, final):
        # holds whenever the intermediate crop removes an even count
        v = np.random.default_rng(0).normal(size=(1, 13, 13, 13))
        np.testing.assert_array_equal(data.center_crop(data.center_crop(v, mid), final),
                                      data.center_crop(v, final))

    def test_too_large(self):
        with pytest.raises(data.InvalidShapeError):
            data.center_crop(np.zeros((4, 4, 4)), 5)


class TestIO:
    def test_volume_round_trip(self, tmp_path):
        v = data.Volume(np.random.default_rng(0).random((1, 8, 8, 8), dtype=np.float32), 1, "abc", hard=True)
        name = data.write_volume(tmp_path, v, (0.25, 3.0))
        header = json.loads((tmp_path / name).read_text())
        assert header["dtype"] == "f32le" and header["shape"] == [1, 8, 8, 8]
        assert header["normalization"] == {"min": 0.25, "max": 3.0}
        back = data.read_volume(tmp_path / name)
        assert back.data.tobytes() == v.data.tobytes() and back.label == 1 and back.hard

    def test_dataset_manifest(self, tmp_path):
        vols, norm = data.normalize_global(data.generate(data.GenConfig(n_samples=10, side=8)))
        tr, te = data.split(vols)
        manifest = data.write_dataset(tmp_path, tr, te, norm)
        assert len(manifest) == 10
        assert set(manifest[0]) == {"id", "file", "label", "split"}
        ds = data.load_dataset(tmp_path)
        assert [v.id for v in ds.test] == sorted(v.id for v in te)
        assert ds.by_id(te[0].id).data.tobytes() == te[0].data.tobytes()
        with pytest.raises(KeyError):
            ds.by_id("nope")

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="manifest"):
            data.load_dataset(tmp_path)
