import json

import numpy as np
import pytest

from bcl.dataio import FEW, MANY, MEDIUM
from bcl.evaluation import (
    GroupReport,
    ProbeError,
    ProbeSpec,
    extract_features,
    group_metrics,
    group_std,
    linear_probe,
    per_class_accuracy,
    probe_run,
    read_per_class,
    write_report,
)
from bcl.model import ContrastiveModel, EncoderSpec
from bcl.trainer import load_run, pretrain

PMAP = {0: MANY, 1: MANY, 2: MEDIUM, 3: FEW}


class TestGroupStd:
    @pytest.mark.parametrize("groups, printed", [
        ([48.70, 46.81, 44.02], 2.36),
        ([41.16, 32.91, 31.76], 5.13),
        ([31.12, 33.85, 35.62], 2.27),
    ])
    def test_published_rows(self, groups, printed):
        assert group_std(groups) == pytest.approx(printed, abs=0.01)
        # the n denominator misses every row
        assert abs(np.std(groups) - printed) > 0.3

    def test_matches_numpy_ddof1(self):
        v = np.random.default_rng(0).uniform(0, 1, 3)
        assert group_std(v) == pytest.approx(np.std(v, ddof=1), rel=1e-12)

    def test_equal_groups(self):
        assert group_std([0.3, 0.3, 0.3]) == 0.0

    def test_spread(self):
        assert group_std([0.0, 0.5, 1.0]) == pytest.approx(0.5)

    def test_single_group(self):
        assert group_std([0.7]) == 0.0

    def test_group_means(self):
        rep = group_metrics({0: 1.0, 1: 0.5, 2: 0.25, 3: 0.0}, PMAP)
        assert (rep.many, rep.medium, rep.few) == (0.75, 0.25, 0.0)
        assert rep.overall == pytest.approx(0.4375)
        assert rep.std == pytest.approx(np.std([0.75, 0.25, 0.0], ddof=1))

    def test_unmapped_class(self):
        with pytest.raises(ProbeError):
            group_metrics({7: 1.0}, PMAP)


class TestLinearProbe:
    def blobs(self, n, seed, spread=0.1):
        rng = np.random.default_rng(seed)
        centres = np.eye(4) * 3
        y = np.repeat(np.arange(4), n)
        return centres[y] + rng.normal(0, spread, (len(y), 4)), y

    def test_separable_is_perfect(self):
        xtr, ytr = self.blobs(20, 0)
        xte, yte = self.blobs(10, 1)
        rep, per_class = linear_probe(xtr, ytr, xte, yte, PMAP, ProbeSpec(epochs=50, batch_size=16))
        assert rep.overall == 1.0 and set(per_class.values()) == {1.0}
        assert rep.std == 0.0

    def test_noise_labels_near_chance(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(400, 8))
        y = np.tile(np.arange(4), 100)
        xte = rng.normal(size=(400, 8))
        yte = np.tile(np.arange(4), 100)
        rep, _ = linear_probe(x, y, xte, yte, PMAP, ProbeSpec(epochs=20, batch_size=64))
        # 400 test draws at p = 0.25: 5 standard errors is about 0.11
        assert abs(rep.overall - 0.25) < 0.11

    def test_absent_class(self):
        xtr, ytr = self.blobs(5, 0)
        keep = ytr != 2
        with pytest.raises(ProbeError, match="absent"):
            linear_probe(xtr[keep], ytr[keep], xtr, ytr, PMAP, ProbeSpec(epochs=1))

    def test_absent_test_class(self):
        with pytest.raises(ProbeError, match="absent"):
            per_class_accuracy(np.zeros(3, int), np.array([0, 1, 1]), 3)

    def test_seeded(self):
        xtr, ytr = self.blobs(10, 0, spread=2.0)
        xte, yte = self.blobs(10, 1, spread=2.0)
        a, _ = linear_probe(xtr, ytr, xte, yte, PMAP, ProbeSpec(epochs=5, batch_size=8, seed=3))
        b, _ = linear_probe(xtr, ytr, xte, yte, PMAP, ProbeSpec(epochs=5, batch_size=8, seed=3))
        assert a == b


class TestReports:
    def test_csv_recomputes_summary(self, tmp_path):
        per_class = {0: 0.9, 1: 0.7, 2: 0.4, 3: 0.1}
        rep = group_metrics(per_class, PMAP)
        write_report(tmp_path, rep, per_class, PMAP, shots=None, seed=4)
        acc, pmap = read_per_class(tmp_path / "per_class.csv")
        assert pmap == PMAP
        again = group_metrics(acc, pmap)
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["shots"] == "full" and summary["seed"] == 4
        for key, value in again.to_dict().items():
            assert summary[key] == pytest.approx(value, abs=1e-12)


class TestFeatures:
    def test_deterministic_and_mode_restored(self):
        model = ContrastiveModel(EncoderSpec(channels=(4, 8), hidden_dim=8, embed_dim=4), seed=1)
        images = np.random.default_rng(0).integers(0, 256, (6, 16, 16, 3), dtype=np.uint8)
        a = extract_features(model, images, batch_size=4)
        b = extract_features(model, images, batch_size=6)
        assert a.shape == (6, 8) and a.dtype == np.float64
        np.testing.assert_allclose(a, b, rtol=1e-12)
        assert model.training

    def test_channel_mismatch(self):
        model = ContrastiveModel(EncoderSpec(channels=(4,), hidden_dim=4, embed_dim=4))
        with pytest.raises(ProbeError):
            extract_features(model, np.zeros((2, 8, 8, 1), np.uint8))

    def test_checkpoint_roundtrip_features(self, tiny_config, tiny_pool):
        from bcl import dataio

        state = pretrain(tiny_config(epochs=2))
        _, restored = load_run(state.run_dir)
        images = dataio.load_dataset(tiny_pool / "test.bin", dataio.Geometry(16, 16, 10)).images
        np.testing.assert_array_equal(extract_features(state.model, images),
                                      extract_features(restored.model, images))


class TestProbeRun:
    def test_writes_report(self, tiny_config):
        state = pretrain(tiny_config(epochs=1))
        rep = probe_run(state.run_dir)
        assert isinstance(rep, GroupReport)
        out = state.run_dir / "probe_4_seed0"
        acc, pmap = read_per_class(out / "per_class.csv")
        assert sorted(acc) == list(range(10))
        assert group_metrics(acc, pmap).many == pytest.approx(rep.many)
        assert 0.0 <= rep.overall <= 1.0
