import csv
import json

import numpy as np
import pytest

from bcl import dataio
from bcl.cli import diagnose_tail, main
from bcl.memtrack import MemTable, tail_discovery


@pytest.fixture
def config_file(tiny_config, tmp_path):
    cfg = tiny_config("bcl-i", epochs=2)
    path = tmp_path / "cfg.json"
    doc = cfg.to_dict()
    doc.pop("out_dir")
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture
def trained_run(config_file, tmp_path):
    out = tmp_path / "cli_run"
    assert main(["pretrain", "--config", str(config_file), "--out-dir", str(out), "--deterministic"]) == 0
    return out


class TestExitCodes:
    def test_unknown_subcommand(self, capsys):
        assert main(["train"]) == 1

    def test_missing_required_option(self):
        assert main(["make-lt", "--imbalance", "10"]) == 1

    def test_unknown_override_key(self, config_file, tmp_path):
        assert main(["pretrain", "--config", str(config_file), "--set", "optim.lrate=0.1",
                     "--out-dir", str(tmp_path / "x")]) == 1

    def test_invalid_combination(self, config_file, tmp_path):
        assert main(["pretrain", "--config", str(config_file), "--set", "method=\"simclr\"", "--set", "k=2",
                     "--out-dir", str(tmp_path / "x")]) == 1

    def test_runtime_failure(self, tmp_path, capsys):
        code = main(["make-lt", "--input", str(tmp_path / "absent.bin"), "--imbalance", "10",
                     "--out", str(tmp_path / "o.bin")])
        assert code == 2
        assert "bcl:" in capsys.readouterr().err


class TestDataCommands:
    def test_make_shapes_then_lt(self, tmp_path):
        out = tmp_path / "shapes"
        assert main(["make-shapes", "--out-dir", str(out), "--train-per-class", "20",
                     "--test-per-class", "2"]) == 0
        assert (out / "pool.bin").stat().st_size == 200 * 3073
        lt = tmp_path / "lt.bin"
        assert main(["make-lt", "--input", str(out / "pool.bin"), "--imbalance", "10",
                     "--out", str(lt), "--seed", "1"]) == 0
        doc = json.loads(lt.with_suffix(".counts.json").read_text())
        assert doc["class_counts"] == dataio.long_tailed_counts(20, 10, 10)
        snap = json.loads(lt.with_suffix(".config.json").read_text())
        assert snap["imbalance"] == 10 and snap["seed"] == 1
        back = dataio.load_dataset(lt, dataio.Geometry())
        assert len(back) == sum(doc["class_counts"])


class TestRunCommands:
    def test_pretrain_snapshot_records_overrides(self, config_file, tmp_path):
        out = tmp_path / "o"
        assert main(["pretrain", "--config", str(config_file), "--set", "beta=0.9", "--set", "k=2",
                     "--out-dir", str(out)]) == 0
        snap = json.loads((out / "config.json").read_text())
        assert snap["beta"] == 0.9 and snap["k"] == 2 and snap["resolved"]["k"] == 2
        assert snap["out_dir"] == str(out)

    def test_workers_default_and_deterministic(self, config_file, tmp_path):
        import os

        out = tmp_path / "w"
        assert main(["pretrain", "--config", str(config_file), "--set", "epochs=1", "--out-dir", str(out)]) == 0
        assert json.loads((out / "config.json").read_text())["workers"] == (os.cpu_count() or 1)
        det = tmp_path / "d"
        assert main(["pretrain", "--config", str(config_file), "--set", "epochs=1", "--workers", "3",
                     "--deterministic", "--out-dir", str(det)]) == 0
        assert json.loads((det / "config.json").read_text())["workers"] == 0

    def test_diagnose_tail_matches_replay(self, trained_run, tmp_path):
        out = tmp_path / "tail.csv"
        assert main(["diagnose-tail", "--run", str(trained_run), "--r", "0.2", "--out", str(out)]) == 0
        with open(out, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 2 * 2 * 2  # epochs x score kinds x groups

        manifest = json.loads((trained_run / "dataset.json").read_text())
        cfg = json.loads((trained_run / "config.json").read_text())
        pool = dataio.load_dataset(cfg["dataset"]["pool"], dataio.Geometry(16, 16, 10))
        labels = pool.labels[manifest["source_index"]]
        pmap = {int(k): v for k, v in manifest["partition_map"].items()}
        groups = np.array(["head" if pmap[int(c)] == dataio.MANY else "tail" for c in labels])
        table = MemTable(len(labels), cfg["beta"])
        for epoch in range(2):
            table.record_epoch_losses(np.load(trained_run / "losses" / f"epoch_{epoch:04d}.npy"))
        want = tail_discovery(table.l_mom, groups, 0.2).phi["tail"]
        got = next(r for r in rows if r["epoch"] == "1" and r["score_kind"] == "momentum" and r["group"] == "tail")
        assert float(got["phi"]) == pytest.approx(want)
        assert diagnose_tail(trained_run, 0.2)[-1]["epoch"] == 1

    def test_inspect_ckpt(self, trained_run, capsys):
        assert main(["inspect-ckpt", str(trained_run / "checkpoints" / "last.bcl")]) == 0
        text = capsys.readouterr().out
        assert '"epoch": 1' in text and "model.block0.conv.weight" in text and "mem.l_mom" in text

    def test_probe(self, trained_run):
        assert main(["probe", "--run", str(trained_run), "--shots", "3", "--epochs", "2", "--seed", "5"]) == 0
        out = trained_run / "probe_3_seed5"
        summary = json.loads((out / "summary.json").read_text())
        assert summary["shots"] == 3 and summary["seed"] == 5
        assert json.loads((out / "probe.config.json").read_text())["epochs"] == 2

    def test_ablate_dotted_axis(self, config_file, tmp_path):
        root = tmp_path / "abl"
        assert main(["ablate", "--config", str(config_file), "--set", "epochs=1", "--axis", "model.tau",
                     "--values", "0.1", "0.5", "--no-probe", "--out-dir", str(root)]) == 0
        assert (root / "model.tau=0.1" / "metrics.csv").exists()
        assert len((root / "summary.csv").read_text().splitlines()) == 3
        assert json.loads((root / "ablate.config.json").read_text())["values"] == [0.1, 0.5]

    def test_ablate_needs_values_for_custom_axis(self, config_file, tmp_path):
        assert main(["ablate", "--config", str(config_file), "--axis", "model.tau",
                     "--out-dir", str(tmp_path / "a")]) == 1
