import io
import json

import pytest

from eianet.checkpoint import load_checkpoint, read_header
from eianet.cli import EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_IO, EXIT_OK, main
from eianet.encoder import head_matrix

TINY_FLAGS = ["--K", "3", "--d", "6", "--image-size", "8", "--widths", "4,6", "--batch-size", "8", "--M", "2"]


def run(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = main([str(a) for a in argv], stdout=out, stderr=err)
    return code, out.getvalue(), err.getvalue()


def ok(*argv):
    code, out, err = run(*argv)
    assert code == EXIT_OK, err
    return json.loads(out)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    ok("gen-data", "--out", root / "data", "--classes", 3, "--per-class", 8, "--image-size", 8, "--seed", 1)
    ok("train-source", "--data", root / "data/source", "--out", root / "src", "--epochs-source", 2, *TINY_FLAGS)
    ok("adapt", "--checkpoint", root / "src/source.ckpt", "--data", root / "data/target", "--out", root / "ad",
       "--epochs-adapt", 2)
    return root


def test_gen_data_layout(workspace):
    for dom in ("source", "target"):
        assert {p.name for p in (workspace / "data" / dom).iterdir()} == {"manifest.json", "images.bin", "labels.bin"}


def test_metrics_streams(workspace):
    src = [json.loads(line) for line in (workspace / "src/metrics.jsonl").read_text().splitlines()]
    ad = [json.loads(line) for line in (workspace / "ad/metrics.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in src] == [0, 1, 2] and [r["epoch"] for r in ad] == [0, 1, 2]
    assert all(r["schema"] == "eianet.metrics/1" for r in src + ad)
    assert {"l_sim", "l_div", "l_t", "target_acc"} <= set(ad[-1])


def test_etf_byte_identical_across_phases(workspace):
    a = load_checkpoint(workspace / "src/source.ckpt")
    b = load_checkpoint(workspace / "ad/adapted.ckpt")
    assert head_matrix(a.head).data.tobytes() == head_matrix(b.head).data.tobytes()
    assert read_header(workspace / "ad/adapted.ckpt")["phase"] == "adapt"


def test_rerun_is_byte_identical(workspace, tmp_path):
    ok("gen-data", "--out", tmp_path / "data", "--classes", 3, "--per-class", 8, "--image-size", 8, "--seed", 1)
    for name in ("images.bin", "labels.bin", "manifest.json"):
        assert (tmp_path / "data/target" / name).read_bytes() == (workspace / "data/target" / name).read_bytes()
    ok("train-source", "--data", tmp_path / "data/source", "--out", tmp_path / "src", "--epochs-source", 2, *TINY_FLAGS)
    for name in ("source.ckpt", "metrics.jsonl"):
        assert (tmp_path / "src" / name).read_bytes() == (workspace / "src" / name).read_bytes()


def test_eval_matches_training_metric(workspace):
    last = json.loads((workspace / "src/metrics.jsonl").read_text().splitlines()[-1])
    rep = ok("eval", "--checkpoint", workspace / "src/source.ckpt", "--data", workspace / "data/source", "--split", "test")
    assert rep["accuracy"] == last["source_test_acc"]


def test_alpha_zero_stream(workspace, tmp_path):
    ok("adapt", "--checkpoint", workspace / "src/source.ckpt", "--data", workspace / "data/target", "--out", tmp_path,
       "--epochs-adapt", 2, "--alpha", 0)
    recs = [json.loads(line) for line in (tmp_path / "metrics.jsonl").read_text().splitlines()][1:]
    assert [r["l_t"] for r in recs] == [r["l_sim"] for r in recs]


def test_config_file_then_flags(workspace, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"epochs_adapt": 1, "M": 3, "lr_adapt": 0.002}))
    ok("adapt", "--checkpoint", workspace / "src/source.ckpt", "--data", workspace / "data/target", "--out", tmp_path,
       "--config", cfg, "--lr-adapt", 0.005)
    c = load_checkpoint(tmp_path / "adapted.ckpt").config
    assert (c.epochs_adapt, c.M, c.lr_adapt) == (1, 3, 0.005)
    assert c.alpha == pytest.approx(0.3)  # follows M when not given


def test_etf_check():
    rep = ok("etf-check", "--K", 65, "--d", 256)
    assert rep["passed"] is True
    code, out, _ = run("etf-check", "--K", 3, "--d", 4, "--tolerance", -1)
    assert code == EXIT_CHECK_FAILED and json.loads(out)["passed"] is False


def test_etf_check_on_checkpoint(workspace):
    assert ok("etf-check", "--checkpoint", workspace / "ad/adapted.ckpt")["passed"] is True


def test_nc_report(workspace):
    rep = ok("nc-report", "--checkpoint", workspace / "src/source.ckpt", "--data", workspace / "data/source")
    assert len(rep) == 4


def test_k_mismatch_exit_code(workspace, tmp_path):
    ok("gen-data", "--out", tmp_path, "--classes", 4, "--per-class", 8, "--image-size", 8)
    code, _, err = run("adapt", "--checkpoint", workspace / "src/source.ckpt", "--data", tmp_path / "target",
                       "--out", tmp_path / "o")
    assert code == EXIT_CONFIG and "K=3" in err


@pytest.mark.parametrize(
    "argv",
    [
        ["train-source", "--data", "x", "--out", "y", "--K", "10", "--d", "8"],
        ["gen-data", "--out", "x", "--shift", "sideways"],
        ["etf-check", "--K", "3"],
        ["frobnicate"],
        ["eval", "--checkpoint", "x"],
    ],
)
def test_config_errors_exit_2(argv, tmp_path):
    code, _, _ = run(*[a.replace("x", str(tmp_path / "x")) for a in argv])
    assert code == EXIT_CONFIG


def test_io_errors_exit_3(tmp_path):
    assert run("eval", "--checkpoint", tmp_path / "missing.ckpt", "--data", tmp_path)[0] == EXIT_IO
    (tmp_path / "bad.ckpt").write_bytes(b"not a checkpoint")
    assert run("etf-check", "--checkpoint", tmp_path / "bad.ckpt")[0] == EXIT_IO
    assert run("train-source", "--data", tmp_path / "nodata", "--out", tmp_path / "o")[0] == EXIT_IO


def test_threads_env_does_not_change_results(workspace, monkeypatch):
    args = ("eval", "--checkpoint", workspace / "ad/adapted.ckpt", "--data", workspace / "data/target")
    single = ok(*args)
    monkeypatch.setenv("EIANET_THREADS", "3")
    assert ok(*args) == single
    monkeypatch.setenv("EIANET_THREADS", "many")
    assert run(*args)[0] == EXIT_CONFIG


def test_module_entry_point(tmp_path):
    import subprocess
    import sys

    proc = subprocess.run([sys.executable, "-m", "eianet", "etf-check", "--K", "3", "--d", "3"], capture_output=True, text=True)
    assert proc.returncode == 0 and json.loads(proc.stdout)["passed"] is True
