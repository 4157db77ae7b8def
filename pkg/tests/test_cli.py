"""Command-line entry point: config resolution, outputs, exit codes."""

import csv
import io
import json

import pytest

from banded_attn import lm
from banded_attn.cli import main
from banded_attn.partition import SPA, build_mask, compute_partition, render_mask


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def run_json(capsys, *argv):
    code, out, err = run(capsys, *argv, "--json")
    return code, json.loads(out), err


class TestPartition:
    def test_table(self, capsys):
        code, out, _ = run(capsys, "partition", "--seq-len", "10", "--heads", "3")
        assert code == 0
        lines = out.splitlines()
        assert lines[0].startswith("# config: ")
        assert lines[2:] == ["0\t0\t4", "1\t4\t3", "2\t7\t3"]

    def test_json(self, capsys):
        code, obj, _ = run_json(capsys, "partition", "--seq-len", "10", "--heads", "3")
        assert code == 0
        assert [(b["head"], b["start"], b["width"]) for b in obj["bands"]] == [(0, 0, 4), (1, 4, 3), (2, 7, 3)]
        assert obj["config"]["seq_len"] == 10

    def test_single_head(self, capsys):
        _, obj, _ = run_json(capsys, "partition", "--seq-len", "10", "--heads", "1")
        assert obj["bands"] == [{"head": 0, "start": 0, "width": 10}]

    @pytest.mark.parametrize("argv", [["--heads", "0"], ["--seq-len", "4", "--heads", "5"],
                                      ["--variant", "nope"], ["--bogus"], ["--heads", "x"]])
    def test_invalid_exit_2(self, capsys, argv):
        code, _, err = run(capsys, "partition", *argv)
        assert code == 2
        assert "usage" in err

    def test_variant_bands(self, capsys):
        _, obj, _ = run_json(capsys, "partition", "--seq-len", "10", "--heads", "3", "--variant", "gbhalf")
        assert [b["width"] for b in obj["bands"]] == [2, 2, 2]


class TestConfigResolution:
    def test_file_then_flags(self, capsys, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"seq_len": 12, "heads": 4}))
        _, obj, _ = run_json(capsys, "partition", "--config", str(cfg), "--heads", "3")
        assert obj["config"]["seq_len"] == 12 and obj["config"]["heads"] == 3
        assert [b["width"] for b in obj["bands"]] == [4, 4, 4]

    def test_unknown_field(self, capsys, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"seq_len": 12, "colour": "red"}))
        code, _, err = run(capsys, "partition", "--config", str(cfg))
        assert code == 2 and "colour" in err

    def test_unreadable_config(self, capsys, tmp_path):
        code, _, _ = run(capsys, "partition", "--config", str(tmp_path / "none.json"))
        assert code == 2

    def test_threads_env_fallback(self, capsys, monkeypatch):
        monkeypatch.setenv("BANDED_ATTN_THREADS", "1")
        _, obj, _ = run_json(capsys, "flops", "--seq-len", "16", "--heads", "2", "--d-k", "2")
        assert obj["config"]["threads"] == 1
        _, obj, _ = run_json(capsys, "flops", "--seq-len", "16", "--heads", "2", "--d-k", "2", "--threads", "2")
        assert obj["config"]["threads"] == 2

    def test_bad_threads_env(self, capsys, monkeypatch):
        monkeypatch.setenv("BANDED_ATTN_THREADS", "many")
        assert run(capsys, "flops")[0] == 2


class TestMask:
    def test_ascii_file(self, capsys, tmp_path):
        out = tmp_path / "m.txt"
        code, _, _ = run(capsys, "mask", "--seq-len", "8", "--heads", "2", "--head", "1", "--out", str(out))
        assert code == 0
        expected = render_mask(build_mask(compute_partition(8, 2), SPA))[1]
        assert out.read_bytes() == expected

    def test_pgm_per_head(self, capsys, tmp_path):
        pattern = str(tmp_path / "h{h}.pgm")
        code, obj, _ = run_json(capsys, "mask", "--seq-len", "16", "--heads", "4", "--format", "pgm",
                                "--out", pattern)
        assert code == 0 and len(obj["files"]) == 4
        assert (tmp_path / "h3.pgm").read_bytes().startswith(b"P5\n16 16\n255\n")

    def test_stdout(self, capsysbinary):
        code = main(["mask", "--seq-len", "4", "--heads", "2", "--head", "0"])
        out, err = capsysbinary.readouterr()
        assert code == 0
        assert out == b"X...\nXX..\n.XX.\n..XX\n"
        assert err.startswith(b"# config: ")

    @pytest.mark.parametrize("head", ["2", "-1"])
    def test_bad_head(self, capsys, head):
        code, _, _ = run(capsys, "mask", "--seq-len", "8", "--heads", "2", "--head", head)
        assert code == 2

    def test_multi_head_needs_placeholder(self, capsys, tmp_path):
        code, _, _ = run(capsys, "mask", "--seq-len", "8", "--heads", "2", "--out", str(tmp_path / "a.txt"))
        assert code == 2


class TestVerify:
    def test_passes(self, capsys):
        code, out, _ = run(capsys, "verify", "--seq-len", "24", "--heads", "4", "--trials", "8")
        assert code == 0
        assert out.count("PASS") == 5

    def test_json(self, capsys):
        code, obj, _ = run_json(capsys, "verify", "--seq-len", "16", "--heads", "2", "--trials", "4")
        assert code == 0 and obj["passed"]
        assert [s["name"] for s in obj["suites"]] == [
            "coverage", "exclusivity", "balance", "oracle_equivalence", "gradient_check"]

    def test_failure_reports_counterexample(self, capsys):
        code, out, _ = run(capsys, "verify", "--seq-len", "16", "--heads", "4", "--trials", "4",
                           "--variant", "GBHALF")
        assert code == 1
        assert "counterexample (coverage)" in out
        assert '"missing_pairs"' in out


class TestFlops:
    def test_bench_config_ratio(self, capsys):
        code, obj, _ = run_json(capsys, "flops", "--seq-len", "4096", "--heads", "8", "--d-k", "128")
        assert code == 0
        assert obj["ratio"] == 8
        assert obj["standard"]["total"] == 8 * obj["variant_flops"]["total"]

    def test_text(self, capsys):
        _, out, _ = run(capsys, "flops", "--seq-len", "64", "--heads", "4", "--d-k", "8")
        assert out.splitlines()[-1] == "ratio 4"

    def test_non_integer_ratio(self, capsys):
        _, obj, _ = run_json(capsys, "flops", "--seq-len", "64", "--heads", "4", "--d-k", "8",
                             "--variant", "GBHALF")
        assert isinstance(obj["ratio"], float) and obj["ratio"] > 4


@pytest.fixture(scope="module")
def corpus_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("corpus") / "c.txt"
    path.write_text(("to be or not to be that is the question\n" * 200))
    return path


TINY = ["--layers", "1", "--heads", "2", "--d-model", "16", "--seq-len", "16", "--batch-size", "2"]


class TestTrainEvalMetrics:
    def test_zero_steps_writes_checkpoint(self, capsys, tmp_path, corpus_file):
        code, obj, _ = run_json(capsys, "train", *TINY, "--steps", "0", "--corpus", str(corpus_file),
                                "--out-dir", str(tmp_path))
        assert code == 0
        assert (tmp_path / "checkpoints" / "step_000000.ckpt").exists()
        assert obj["steps"] == 0 and obj["initial_loss"] == obj["final_loss"]

    def test_train_then_eval_and_metrics(self, capsys, tmp_path, corpus_file):
        code, obj, _ = run_json(capsys, "train", *TINY, "--steps", "3", "--corpus", str(corpus_file),
                                "--out-dir", str(tmp_path), "--seed", "5")
        assert code == 0
        ckpt = obj["checkpoint"]
        assert lm.read_checkpoint_header(ckpt)["step"] == 3
        assert obj["model"]["seed"] == 5
        rows = list(csv.reader(io.StringIO((tmp_path / "curve.csv").read_text())))
        assert rows[0] == ["step", "loss", "tokens_per_sec"] and len(rows) == 5

        code, ev, _ = run_json(capsys, "eval", "--checkpoint", ckpt, "--corpus", str(corpus_file))
        assert code == 0 and ev["step"] == 3
        assert ev["perplexity"] == pytest.approx(2.718281828459045 ** ev["loss"])

        csv_path = tmp_path / "heads.csv"
        code, met, _ = run_json(capsys, "metrics", "--checkpoint", ckpt, "--corpus", str(corpus_file),
                                "--csv", str(csv_path))
        assert code == 0
        assert len(met["layers"]) == 1
        assert csv_path.read_text().startswith("head,entropy,entropy_bound")

    def test_resume(self, capsys, tmp_path, corpus_file):
        args = [*TINY, "--corpus", str(corpus_file)]
        _, a, _ = run_json(capsys, "train", *args, "--steps", "2", "--out-dir", str(tmp_path / "a"))
        _, b1, _ = run_json(capsys, "train", *args, "--steps", "1", "--out-dir", str(tmp_path / "b"))
        _, b2, _ = run_json(capsys, "train", *args, "--steps", "1", "--out-dir", str(tmp_path / "b"),
                            "--resume", b1["checkpoint"])
        assert b2["steps"] == 2
        assert b2["params_hash"] == a["params_hash"]

    def test_resume_config_mismatch(self, capsys, tmp_path, corpus_file):
        _, a, _ = run_json(capsys, "train", *TINY, "--steps", "0", "--corpus", str(corpus_file),
                           "--out-dir", str(tmp_path))
        code, _, err = run(capsys, "train", *TINY, "--d-model", "32", "--steps", "1",
                           "--corpus", str(corpus_file), "--out-dir", str(tmp_path), "--resume", a["checkpoint"])
        assert code == 2 and "d_model" in err

    def test_model_config_file(self, capsys, tmp_path, corpus_file):
        cfg = lm.ModelConfig(layers=1, heads=2, d_model=16, seq_len=16, batch_size=2, steps=0).to_json()
        path = tmp_path / "model.json"
        path.write_text(json.dumps(cfg))
        code, obj, _ = run_json(capsys, "train", "--config", str(path), "--corpus", str(corpus_file),
                                "--out-dir", str(tmp_path))
        assert code == 0 and obj["model"]["d_model"] == 16

    def test_missing_corpus_exit_1(self, capsys, tmp_path):
        code, _, err = run(capsys, "train", *TINY, "--steps", "0", "--corpus", str(tmp_path / "none"),
                           "--out-dir", str(tmp_path))
        assert code == 1 and "CorpusError" in err

    def test_eval_needs_checkpoint(self, capsys):
        assert run(capsys, "eval")[0] == 2

    def test_metrics_fresh_model(self, capsys, corpus_file):
        code, obj, _ = run_json(capsys, "metrics", *TINY, "--corpus", str(corpus_file), "--variant", "Standard")
        assert code == 0
        assert obj["aggregate"]["config"]["variant"] == "Standard"


class TestBench:
    def test_two_rows_per_variant(self, capsys, tmp_path):
        out = tmp_path / "b.csv"
        code, text, _ = run(capsys, "bench", "--grid", "32,64", "--heads", "4", "--d-k", "4",
                            "--warmup", "0", "--out", str(out))
        assert code == 0
        rows = list(csv.DictReader(io.StringIO(out.read_text())))
        assert [(r["variant"], r["N"]) for r in rows] == [
            ("Standard", "32"), ("SPA", "32"), ("Standard", "64"), ("SPA", "64")]
        assert text.splitlines()[1].startswith("variant,N,H")

    def test_json_has_checksums(self, capsys):
        code, obj, _ = run_json(capsys, "bench", "--grid", "16", "--variants", "spa,eball", "--heads", "2",
                                "--d-k", "2", "--warmup", "0")
        assert code == 0
        assert [r["variant"] for r in obj["rows"]] == ["SPA", "EBALL"]
        assert all(len(r["checksum"]) == 16 for r in obj["rows"])

    @pytest.mark.parametrize("argv", [["--repeats", "3"], ["--grid", "4", "--heads", "8"], ["--grid", "a,b"]])
    def test_invalid(self, capsys, argv):
        assert run(capsys, "bench", *argv)[0] == 2
