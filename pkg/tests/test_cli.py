import numpy as np
import pytest

from peftlab.cli import main
from peftlab.data import load_manifest
from peftlab.train import read_results


def run_cli(*argv):
    return main([str(a) for a in argv])


# -- synth ---------------------------------------------------------------------


def test_synth_generates_both_tasks(tmp_path, capsys):
    spec = tmp_path / "spec.txt"
    spec.write_text("num_classes=3\nsamples_per_class=8\nseed=5\n")
    out = tmp_path / "data"
    assert run_cli("synth", "--spec", spec, "--out", out) == 0
    for task in ("source", "target"):
        man = load_manifest(out / task / "manifest.csv")
        assert man.num_classes == 3
        assert len(man.items) == 24


def test_synth_rerun_byte_identical(tmp_path):
    spec = tmp_path / "spec.txt"
    spec.write_text("num_classes=2\nsamples_per_class=6\nseed=9\n")
    out = tmp_path / "data"
    run_cli("synth", "--spec", spec, "--out", out, "--task", "source")
    manifest_bytes = (out / "source" / "manifest.csv").read_bytes()
    img = sorted((out / "source" / "images").iterdir())[0]
    img_bytes = img.read_bytes()
    run_cli("synth", "--spec", spec, "--out", out, "--task", "source")
    assert (out / "source" / "manifest.csv").read_bytes() == manifest_bytes
    assert img.read_bytes() == img_bytes


# -- pretrain -------------------------------------------------------------------


def test_pretrain_cli(fast_dirs, tmp_path, capsys):
    ckpt = tmp_path / "bb.peft"
    code = run_cli("pretrain", "--data", fast_dirs / "source", "--steps", 5, "--seed", 3,
                   "--out", ckpt)
    assert code == 0
    assert ckpt.exists()
    out = capsys.readouterr().out
    assert "source test top-1" in out and "hash" in out


# -- probe / lora ------------------------------------------------------------------


def test_probe_and_lora_cli_idempotent(fast_dirs, fast_ckpt, tmp_path, capsys):
    out = tmp_path / "results.csv"
    args = ["--backbone", fast_ckpt, "--data", fast_dirs / "target", "--shots", 1,
            "--seeds", "0", "--lr-grid", "1e-2", "--steps", 10, "--out", out]
    assert run_cli("probe", *args) == 0
    assert run_cli("lora", *args, "--rank", 2, "--targets", "q,v") == 0
    rows = read_results(out)
    assert {r.mode for r in rows} == {"linear_probe", "lora"}
    first = out.read_bytes()
    # rerun: dedup keeps the file byte-identical
    assert run_cli("probe", *args) == 0
    assert out.read_bytes() == first
    # run manifests are written next to the results file
    manifests = list(tmp_path.glob("*.manifest"))
    assert len(manifests) == 2
    text = manifests[0].read_text()
    assert "backbone_hash=" in text


def test_config_file_with_flag_precedence(fast_dirs, fast_ckpt, tmp_path):
    cfgfile = tmp_path / "run.cfg"
    cfgfile.write_text("steps=10\nseeds=0\nlr-grid=1e-2\nrank=2\n")
    out = tmp_path / "results.csv"
    assert run_cli("lora", "--config", cfgfile, "--backbone", fast_ckpt,
                   "--data", fast_dirs / "target", "--shots", 1, "--targets", "q",
                   "--out", out, "--steps", 6) == 0
    rows = read_results(out)
    assert len(rows) == 1  # one seed from file
    # the flag steps=6 won over the file's 10: quick sanity via wall time is
    # flaky, so assert through the run manifest instead
    manifest = next(tmp_path.glob("*.manifest")).read_text()
    assert "max_steps=6" in manifest


# -- scale --------------------------------------------------------------------------


def test_scale_cli(fast_dirs, fast_ckpt, tmp_path):
    out = tmp_path / "scale.csv"
    assert run_cli("scale", "--backbone", fast_ckpt, "--data", fast_dirs / "target",
                   "--fractions", "0.5,1.0", "--seeds", "0", "--lr-grid", "1e-2",
                   "--epochs", 1, "--rank", 2, "--out", out) == 0
    rows = read_results(out)
    assert [r.k_or_fraction for r in rows] == ["0.5", "1"]


# -- report --------------------------------------------------------------------------


def _write_results(path):
    path.write_text(
        "mode,dataset,k_or_fraction,lr,seed,test_top1,params_trainable,wall_ms\n"
        "linear_probe,target,4,0.01,0,0.40,160,100\n"
        "linear_probe,target,4,0.01,1,0.44,160,100\n"
        "lora,target,4,0.01,0,0.70,672,900\n"
        "lora,target,4,0.01,1,0.72,672,900\n"
        "lora,target,16,0.01,0,0.80,672,900\n"
        "lora,target,16,0.01,1,0.84,672,900\n"
    )


def test_report_table(tmp_path, capsys):
    csv = tmp_path / "r.csv"
    _write_results(csv)
    assert run_cli("report", "--in", csv, "--shape", "table") == 0
    out = capsys.readouterr().out
    assert "dataset" in out and "target" in out
    assert "42.00±2.83" in out       # probe cell, percent, 2 decimals
    assert "lora[4]" in out and "lora[16]" in out


def test_report_series_sorted_with_baseline(tmp_path, capsys):
    csv = tmp_path / "r.csv"
    _write_results(csv)
    assert run_cli("report", "--in", csv, "--shape", "series", "--mode", "lora",
                   "--baseline", "66.5") == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "x,mean,std"
    xs = [ln.split(",")[0] for ln in lines[1:]]
    assert xs == ["4", "16", "baseline"]
    assert lines[-1] == "baseline,66.50,0.00"


def test_report_empty_warns_exit_zero(tmp_path, capsys):
    csv = tmp_path / "empty.csv"
    csv.write_text("mode,dataset,k_or_fraction,lr,seed,test_top1,params_trainable,wall_ms\n")
    assert run_cli("report", "--in", csv, "--shape", "table") == 0
    assert "warning" in capsys.readouterr().err


def test_report_to_file(tmp_path):
    csv = tmp_path / "r.csv"
    _write_results(csv)
    dest = tmp_path / "series.csv"
    assert run_cli("report", "--in", csv, "--shape", "series", "--mode", "lora",
                   "--out", dest) == 0
    assert dest.read_text().startswith("x,mean,std\n")


# -- verify ----------------------------------------------------------------------------


@pytest.mark.slow
def test_verify_green(capsys):
    assert run_cli("verify") == 0
    out = capsys.readouterr().out
    assert out.count("PASS") >= 5 and "FAIL" not in out


@pytest.mark.slow
def test_verify_debug_nonzero_b_fails(capsys):
    assert run_cli("verify", "--debug-nonzero-b") == 5
    out = capsys.readouterr().out
    assert '"check": "zero_init_identity"' in out


def test_verify_corrupt_checkpoint(fast_ckpt, tmp_path, capsys):
    bad = tmp_path / "bad.peft"
    raw = bytearray(fast_ckpt.read_bytes())
    raw[100] ^= 0x01
    bad.write_bytes(bytes(raw))
    # only run the cheap checkpoint check by corrupting; full suite still runs first
    from peftlab.verify import check_checkpoint

    res = check_checkpoint(bad)
    assert not res.ok and "checksum" in res.detail


# -- exit codes --------------------------------------------------------------------------


def test_exit_code_config_error(fast_dirs, fast_ckpt, tmp_path, capsys):
    assert run_cli("lora", "--backbone", fast_ckpt, "--data", fast_dirs / "target",
                   "--shots", 1, "--targets", "q,z", "--out", tmp_path / "r.csv") == 2


def test_exit_code_data_error(fast_ckpt, tmp_path, capsys):
    missing = tmp_path / "nope"
    code = run_cli("probe", "--backbone", fast_ckpt, "--data", missing,
                   "--shots", 1, "--out", tmp_path / "r.csv")
    assert code == 3


def test_exit_code_insufficient_shots(fast_dirs, fast_ckpt, tmp_path, capsys):
    code = run_cli("probe", "--backbone", fast_ckpt, "--data", fast_dirs / "target",
                   "--shots", 500, "--seeds", "0", "--lr-grid", "1e-2",
                   "--out", tmp_path / "r.csv")
    assert code == 3