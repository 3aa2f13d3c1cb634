import json
import os

import numpy as np
import pytest

from stgcn_svs import cli
from stgcn_svs import datagen as dg
from stgcn_svs.checkpoint import load_checkpoint
from stgcn_svs.graph import load_topology, make_ring, save_topology


def run_cli(*argv):
    return cli.main(list(argv))


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def dataset_dir(workdir):
    out = workdir / "data"
    code = run_cli(
        "generate", "--gen", "ring", "--n", "6", "--count", "120",
        "--severity-range", "0.4", "1.0", "--motor-ratios", "0.7,0.9",
        "--seed", "3", "--out", str(out),
    )
    assert code == 0
    return out


@pytest.fixture(scope="module")
def trained_dir(workdir, dataset_dir):
    out = workdir / "run"
    code = run_cli(
        "train", "--data", str(dataset_dir), "--out", str(out), "--seed", "5",
        "--epochs", "10", "--steps", "6", "--batch", "40", "--lr", "0.01",
        "--hidden", "4", "--blocks", "2", "--test-fraction", "0.2",
    )
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["final_train_acc"] >= 0.9, "fixture model failed to converge"
    return out


class TestGenerate:
    def test_reproducible_bytes(self, workdir):
        a, b = workdir / "gen_a", workdir / "gen_b"
        for out in (a, b):
            assert run_cli("generate", "--gen", "ring", "--n", "5", "--count", "40",
                           "--seed", "7", "--out", str(out)) == 0
        for name in ("manifest.json", "samples.bin", "topology.txt"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_snr_recorded_in_manifest(self, workdir):
        out = workdir / "gen_snr"
        assert run_cli("generate", "--gen", "ring", "--n", "5", "--count", "10",
                       "--snr", "45", "--seed", "1", "--out", str(out)) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["snr_db"] == 45.0

    def test_perturb_recorded_in_manifest(self, workdir):
        out = workdir / "gen_pert"
        assert run_cli("generate", "--gen", "ring", "--n", "6", "--count", "10",
                       "--perturb", "2", "--seed", "2", "--out", str(out)) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["perturb_changes"] == 2

    def test_prints_seed_and_balance(self, workdir, capsys):
        out = workdir / "gen_print"
        run_cli("generate", "--gen", "ring", "--n", "5", "--count", "12",
                "--seed", "9", "--out", str(out))
        text = capsys.readouterr().out
        assert "seed: 9" in text
        assert "class balance" in text

    def test_topology_file_input(self, workdir):
        topo_path = workdir / "topo.txt"
        save_topology(make_ring(7, chords=1, seed=1), topo_path)
        out = workdir / "gen_file"
        assert run_cli("generate", "--topology", str(topo_path), "--count", "5",
                       "--seed", "0", "--out", str(out)) == 0
        assert load_topology(out / "topology.txt").n == 7

    def test_invalid_config_exit2(self, workdir, capsys):
        out = workdir / "gen_bad"
        code = run_cli("generate", "--gen", "ring", "--n", "5", "--count", "5",
                       "--sample-rate", "-1", "--seed", "0", "--out", str(out))
        assert code == 2

    def test_unknown_flag_rejected(self):
        with pytest.raises(SystemExit) as ei:
            run_cli("generate", "--gen", "ring", "--count", "5", "--out", "x",
                    "--never-a-flag", "1")
        assert ei.value.code == 2


class TestTrain:
    def test_defaults_echo(self, workdir, dataset_dir, capsys):
        out = workdir / "echo_run"
        run_cli("train", "--data", str(dataset_dir), "--out", str(out),
                "--epochs", "1", "--steps", "1", "--batch", "8", "--hidden", "2",
                "--blocks", "1")
        text = capsys.readouterr().out
        assert "K=2" in text and "lr=0.001" in text and "batch=8" in text

    def test_paper_defaults_in_parser(self):
        parser = cli.build_parser()
        args = parser.parse_args(["train", "--data", "d", "--out", "o"])
        assert args.cheb_order == 2 and args.blocks == 5
        assert args.batch == 100 and args.epochs == 30
        assert args.steps == 48 and args.lr == 1e-3

    def test_outputs_written(self, trained_dir):
        for name in ("checkpoint.json", "checkpoint_best.json", "metrics.csv",
                     "summary.json"):
            assert (trained_dir / name).exists()

    def test_single_class_exit3(self, workdir):
        flat = workdir / "flat_data"
        run_cli("generate", "--gen", "ring", "--n", "5", "--count", "10",
                "--severity-range", "0.0", "0.0", "--seed", "1", "--out", str(flat))
        code = run_cli("train", "--data", str(flat), "--out", str(workdir / "x"),
                       "--epochs", "1", "--steps", "1")
        assert code == 3

    def test_missing_dataset_exit3(self, workdir):
        code = run_cli("train", "--data", str(workdir / "nope"), "--out",
                       str(workdir / "y"))
        assert code == 3

    def test_bad_model_config_exit2(self, workdir, dataset_dir):
        code = run_cli("train", "--data", str(dataset_dir), "--out",
                       str(workdir / "z"), "--kernel", "2")
        assert code == 2


class TestCrossval:
    def test_folds_and_mean(self, workdir, dataset_dir, capsys):
        out = workdir / "cv"
        code = run_cli(
            "crossval", "--data", str(dataset_dir), "--out", str(out),
            "--folds", "3", "--seed", "4", "--epochs", "1", "--steps", "2",
            "--batch", "16", "--hidden", "2", "--blocks", "1", "--workers", "1",
        )
        assert code == 0
        report = json.loads((out / "crossval.json").read_text())
        assert len(report["folds"]) == 3
        accs = [f["test_acc"] for f in report["folds"]]
        assert report["mean_test_acc"] == pytest.approx(np.mean(accs))
        for i in range(3):
            assert (out / f"fold{i}_metrics.csv").exists()
            assert (out / f"fold{i}_checkpoint.json").exists()
        assert "mean:" in capsys.readouterr().out


class TestEval:
    def test_eval_on_train_split_not_below_reported(self, workdir, dataset_dir,
                                                    trained_dir):
        summary = json.loads((trained_dir / "summary.json").read_text())
        out = workdir / "eval_out"
        code = run_cli("eval", "--checkpoint", str(trained_dir / "checkpoint.json"),
                       "--data", str(dataset_dir), "--out", str(out))
        assert code == 0
        metrics = json.loads((out / "metrics.json").read_text())
        assert metrics["accuracy"] >= summary["final_train_acc"] - 1e-9
        assert metrics["count"] == 120

    def test_eval_dim_mismatch_exit3(self, workdir, trained_dir):
        other = workdir / "other_dims"
        run_cli("generate", "--gen", "ring", "--n", "9", "--count", "6",
                "--seed", "2", "--out", str(other))
        code = run_cli("eval", "--checkpoint", str(trained_dir / "checkpoint.json"),
                       "--data", str(other))
        assert code == 3


class TestAssess:
    def _write_case(self, workdir, dataset_dir, severity, name):
        topo = load_topology(dataset_dir / "topology.txt")
        cfg = dg.ScenarioConfig(severity=severity, motor_ratio=0.9, seed=11)
        sample, _, _ = dg.generate_case(topo, cfg, 0)
        path = workdir / name
        dg.save_sample_json(sample, path)
        return path, sample.label

    def test_stable_case_exit0(self, workdir, dataset_dir, trained_dir, capsys):
        path, label = self._write_case(workdir, dataset_dir, 0.1, "stable.json")
        assert label == 0
        code = run_cli("assess", "--checkpoint", str(trained_dir / "checkpoint.json"),
                       "--sample", str(path), "--topology",
                       str(dataset_dir / "topology.txt"))
        text = capsys.readouterr().out
        assert code == 0
        assert "verdict: stable" in text

    def test_unstable_case_exit10(self, workdir, dataset_dir, trained_dir):
        path, label = self._write_case(workdir, dataset_dir, 1.0, "unstable.json")
        assert label == 1
        code = run_cli("assess", "--checkpoint", str(trained_dir / "checkpoint.json"),
                       "--sample", str(path), "--topology",
                       str(dataset_dir / "topology.txt"))
        assert code == 10

    def test_dim_mismatch_exit2(self, workdir, dataset_dir, trained_dir):
        path, _ = self._write_case(workdir, dataset_dir, 0.1, "mismatch.json")
        other_topo = workdir / "small_topo.txt"
        save_topology(make_ring(4), other_topo)
        code = run_cli("assess", "--checkpoint", str(trained_dir / "checkpoint.json"),
                       "--sample", str(path), "--topology", str(other_topo))
        assert code == 2


class TestExplain:
    def test_zero_assignment_gives_zero_influence(self, workdir, dataset_dir,
                                                  trained_dir, capsys):
        ckpt = load_checkpoint(trained_dir / "checkpoint.json")
        ckpt.params.assign.data[...] = 0.0
        from stgcn_svs.checkpoint import save_checkpoint

        zero_path = workdir / "zero.ckpt"
        save_checkpoint(zero_path, ckpt.config, ckpt.params, ckpt.stats)
        code = run_cli("explain", "--checkpoint", str(zero_path))
        out = capsys.readouterr().out
        assert code == 0
        for line in out.splitlines():
            if line.strip() and line.split()[0].isdigit():
                assert float(line.split()[1]) == 0.0

    def test_influence_bounded_and_sorted_csv(self, workdir, trained_dir):
        csv_path = workdir / "influence.csv"
        code = run_cli("explain", "--checkpoint", str(trained_dir / "checkpoint.json"),
                       "--csv", str(csv_path))
        assert code == 0
        rows = csv_path.read_text().splitlines()[1:]
        values = [float(r.split(",")[1]) for r in rows]
        assert values == sorted(values)
        assert sum(abs(v) for v in values) <= len(values)


class TestGradcheckCommand:
    def test_tiny_passes(self, capsys):
        code = run_cli("gradcheck", "--buses", "3", "--window", "4",
                       "--hidden", "1", "--blocks", "1", "--seed", "1")
        out = capsys.readouterr().out
        assert code == 0
        assert "PASS" in out

    def test_impossible_tolerance_fails(self, capsys):
        # hidden=2 keeps gradients nonzero, so FD noise exceeds tol=1e-18
        code = run_cli("gradcheck", "--buses", "3", "--window", "4", "--hidden", "2",
                       "--blocks", "1", "--seed", "1", "--tol", "1e-18")
        assert code == 1
        assert "FAIL" in capsys.readouterr().out


def test_console_script_entry_point():
    import subprocess

    proc = subprocess.run(["stgcn-svs", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "generate" in proc.stdout
