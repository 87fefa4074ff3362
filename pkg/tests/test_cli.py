import json

import pytest
import yaml

from ruladapt.cli import main
from ruladapt.serialization import blob_hash


def run_cli(*argv) -> int:
    return main([str(a) for a in argv])


TOY_RUN = (
    "--toy", "--epochs", "1", "--batch-size", "16", "--seeds", "1",
    "--no-latents",
)


# ---------------------------------------------------------------------------
# ingest

def test_ingest_prints_counts_and_is_hash_stable(cmapss_dir, tmp_path, capsys):
    out = tmp_path / "cache"
    assert run_cli("ingest", "--subset", "FD001", "--window", "40",
                   "--data-dir", cmapss_dir, "--out", out) == 0
    first = capsys.readouterr().out
    assert "100 train trajectories" in first and "100 test trajectories" in first
    h1 = blob_hash(out / "FD001.cache")
    assert run_cli("ingest", "--subset", "FD001", "--window", "40",
                   "--data-dir", cmapss_dir, "--out", out) == 0
    assert blob_hash(out / "FD001.cache") == h1


def test_ingest_bad_path_names_the_file(tmp_path, capsys):
    rc = run_cli("ingest", "--subset", "FD009", "--data-dir", tmp_path / "nowhere")
    assert rc == 2
    err = capsys.readouterr().err
    assert "FD009" in err and "nowhere" in str(err)


# ---------------------------------------------------------------------------
# train

def test_train_toy_run_writes_artifact_tree(cmapss_tiny_dir, tmp_path, capsys):
    out = tmp_path / "runs"
    rc = run_cli(
        "train", "--source", "FD001", "--target", "FD002", "--variant", "no_da",
        "--data-dir", cmapss_tiny_dir, "--out-dir", out, *TOY_RUN,
    )
    assert rc == 0
    run_dir = out / "FD001-FD002" / "no_da" / "1"
    for name in ("report.json", "train_log.csv", "checkpoint.bin", "metrics.csv"):
        assert (run_dir / name).exists()
    report = json.loads((out / "FD001-FD002" / "no_da" / "report.json").read_text())
    assert report["variant"] == "no_da" and report["config_hash"]
    assert (out / "FD001-FD002" / "no_da" / "metrics.csv").exists()


def test_train_no_da_log_has_no_adaptation_terms(cmapss_tiny_dir, tmp_path):
    out = tmp_path / "runs"
    run_cli(
        "train", "--source", "FD001", "--target", "FD002", "--variant", "no_da",
        "--data-dir", cmapss_tiny_dir, "--out-dir", out, *TOY_RUN,
    )
    log = (out / "FD001-FD002" / "no_da" / "1" / "train_log.csv").read_text().splitlines()
    header = log[0].split(",")
    d_col = header.index("discrepancy")
    r_col = header.index("recon")
    for line in log[1:]:
        cells = line.split(",")
        assert cells[d_col] == "" and cells[r_col] == ""


def test_train_is_idempotent(cmapss_tiny_dir, tmp_path):
    out = tmp_path / "runs"
    args = (
        "train", "--source", "FD001", "--target", "FD002", "--variant", "no_da",
        "--data-dir", cmapss_tiny_dir, "--out-dir", out, *TOY_RUN,
    )
    assert run_cli(*args) == 0
    ckpt = out / "FD001-FD002" / "no_da" / "1" / "checkpoint.bin"
    h1 = blob_hash(ckpt)
    assert run_cli(*args) == 0
    assert blob_hash(ckpt) == h1


def test_train_writes_latents_by_default(cmapss_tiny_dir, tmp_path):
    out = tmp_path / "runs"
    rc = run_cli(
        "train", "--source", "FD001", "--target", "FD002", "--variant", "no_da",
        "--data-dir", cmapss_tiny_dir, "--out-dir", out,
        "--toy", "--epochs", "1", "--batch-size", "16", "--seeds", "1",
    )
    assert rc == 0
    run_dir = out / "FD001-FD002" / "no_da" / "1"
    assert (run_dir / "latents_C.csv").exists()
    assert (run_dir / "latents_O.csv").exists()


def test_config_file_defaults_and_unknown_key_rejection(cmapss_tiny_dir, tmp_path, capsys):
    cfg = tmp_path / "run.yaml"
    cfg.write_text(yaml.safe_dump({"epochs": 1, "batch_size": 16, "seeds": [1]}))
    out = tmp_path / "runs"
    rc = run_cli(
        "train", "--source", "FD001", "--target", "FD002", "--variant", "no_da",
        "--config", cfg, "--data-dir", cmapss_tiny_dir, "--out-dir", out,
        "--toy", "--no-latents",
    )
    assert rc == 0

    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"epochs": 1, "learning_rate_typo": 3}))
    with pytest.raises(ValueError, match="unknown"):
        run_cli(
            "train", "--source", "FD001", "--target", "FD002",
            "--config", bad, "--data-dir", cmapss_tiny_dir, "--out-dir", out, "--toy",
        )


# ---------------------------------------------------------------------------
# ablate

def test_ablate_emits_three_variant_columns(cmapss_tiny_dir, tmp_path, capsys):
    out = tmp_path / "runs"
    rc = run_cli(
        "ablate", "--source", "FD001", "--target", "FD002",
        "--data-dir", cmapss_tiny_dir, "--out-dir", out, *TOY_RUN,
    )
    assert rc == 0
    pair_dir = out / "FD001-FD002" / "ablate"
    rmse_rows = (pair_dir / "rmse.csv").read_text().splitlines()
    header = rmse_rows[0].split(",")
    assert header == ["pair", "full", "mmd", "mmd_ae"]
    points = (pair_dir / "ablate_points.csv").read_text().splitlines()
    assert points[0] == "variant,seed,rmse,score"
    assert len(points) == 1 + 3  # one row per (variant, seed)


def test_ablate_row_weights_match_term_sets(cmapss_tiny_dir, tmp_path):
    """mmd row trains without recon/smooth columns; mmd_ae adds recon only."""
    out = tmp_path / "runs"
    run_cli(
        "ablate", "--source", "FD001", "--target", "FD002",
        "--data-dir", cmapss_tiny_dir, "--out-dir", out,
        "--toy", "--epochs", "1", "--batch-size", "16", "--seeds", "1",
        "--no-latents",
    )
    base = out / "FD001-FD002"

    def active_columns(variant_dir):
        lines = (base / variant_dir / "1" / "train_log.csv").read_text().splitlines()
        header = lines[0].split(",")
        last = lines[-2].split(",")  # final iteration row (last line is val row)
        return {
            name for name, cell in zip(header, last)
            if cell and name in ("discrepancy", "recon", "smooth")
        }

    # da_start=200 exceeds this 1-epoch toy budget, so adaptation columns are
    # blank everywhere; the weight columns still differ per row in the config.
    for row, expect_weights in (
        ("ablate-mmd", (0.35, 0.0, 0.0)),
        ("ablate-mmd_ae", (0.35, 0.2, 0.0)),
        ("ablate-full", (0.35, 0.2, 0.35)),
    ):
        report = json.loads((base / row / "1" / "report.json").read_text())
        weights = report["config"]["weights"]
        assert (weights["lambda_m"], weights["lambda_r"], weights["lambda_s"]) == expect_weights


# ---------------------------------------------------------------------------
# sweep

def test_sweep_requires_confirmation(cmapss_tiny_dir, tmp_path, capsys):
    rc = run_cli(
        "sweep", "--source", "FD001", "--target", "FD002",
        "--data-dir", cmapss_tiny_dir, "--out-dir", tmp_path / "runs", "--toy",
    )
    assert rc == 2
    out = capsys.readouterr().out
    assert "384 points" in out  # 4*4*4 * 2 * 3


def test_sweep_runs_tiny_grid_and_ranks_by_source_val(cmapss_tiny_dir, tmp_path, capsys):
    out = tmp_path / "runs"
    rc = run_cli(
        "sweep", "--source", "FD001", "--target", "FD002",
        "--grid", "lambda_m=0.1,0.5;lambda_r=0.2;lambda_s=0.35;gamma_noise=0.1;autoencoder=gru",
        "--confirm", "--data-dir", cmapss_tiny_dir, "--out-dir", out, *TOY_RUN,
    )
    assert rc == 0
    stdout = capsys.readouterr().out
    assert "2 points" in stdout
    results = (out / "FD001-FD002" / "sweep" / "sweep_results.csv").read_text().splitlines()
    assert results[0].endswith("val_rmse")
    assert len(results) == 3  # header + 2 grid points
    vals = [float(line.split(",")[-1]) for line in results[1:]]
    assert vals == sorted(vals)


def test_sweep_rejects_unknown_grid_key(cmapss_tiny_dir, tmp_path, capsys):
    rc = run_cli(
        "sweep", "--source", "FD001", "--target", "FD002",
        "--grid", "bogus=1", "--confirm",
        "--data-dir", cmapss_tiny_dir, "--out-dir", tmp_path / "runs",
    )
    assert rc == 2
    assert "bogus" in capsys.readouterr().err
