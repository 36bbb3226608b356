import subprocess
import sys
from pathlib import Path

import pytest

from splatloop.cli import EXIT_CONFIG, EXIT_RUNTIME, EXIT_USAGE, main
from splatloop.io import read_ppm

SYNTH = ["--frames", "3", "--resolution", "16", "--static", "20", "--dynamic", "2"]


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(Path(root).rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert main(["synth", "--out", str(root), *SYNTH]) == 0
    return root


def test_usage_errors(capsys):
    assert main([]) == EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        main(["train", "--bogus"])
    assert exc.value.code == EXIT_USAGE


def test_module_entry_point_exit_code():
    proc = subprocess.run([sys.executable, "-m", "splatloop.cli"], capture_output=True, text=True)
    assert proc.returncode == EXIT_USAGE and "subcommand" in proc.stderr


def test_config_errors_exit_three(tmp_path, dataset, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[pipeline]\nstage1_iters = 'many'\n")
    assert main(["train", "--config", str(bad), "--data", str(dataset), "--out", str(tmp_path / "r")]) == EXIT_CONFIG
    assert "pipeline.stage1_iters" in capsys.readouterr().err
    assert main(["train", "--set", "run.colour=1", "--data", str(dataset)]) == EXIT_CONFIG


def test_missing_data_is_a_runtime_error(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "r")]) == EXIT_RUNTIME


def test_synth_is_byte_reproducible(tmp_path, dataset):
    assert main(["synth", "--out", str(tmp_path / "again"), *SYNTH]) == 0
    assert tree_bytes(tmp_path / "again") == tree_bytes(dataset)


def test_train_eval_render(tmp_path, dataset):
    run = tmp_path / "run"
    args = ["train", "--data", str(dataset), "--out", str(run), "--set", "pipeline.stage1_iters=6",
            "--set", "pipeline.stage2_iters=4", "--set", "pipeline.novel_pool_size=2"]
    assert main(args) == 0
    for name in ("scene.gr4d", "metrics.csv", "config.toml", "run.jsonl"):
        assert (run / name).is_file()
    csv = tmp_path / "eval.csv"
    assert main(["eval", "--scene", str(run / "scene.gr4d"), "--data", str(dataset), "--out", str(csv)]) == 0
    lines = csv.read_text().splitlines()
    assert lines[0] == "frame_index,psnr,ssim" and len(lines) == 3 + 2
    img = tmp_path / "view.ppm"
    assert main(["render", "--scene", str(run / "scene.gr4d"), "--cameras", str(dataset / "cameras.txt"),
                 "--camera", "3", "--time", "1.5", "--out", str(img)]) == 0
    assert read_ppm(img).shape == (16, 16, 3)
    assert main(["render", "--scene", str(run / "scene.gr4d"), "--cameras", str(dataset / "cameras.txt"),
                 "--camera", "99", "--out", str(img)]) == EXIT_RUNTIME
    # the saved config reproduces the run
    again = tmp_path / "again"
    assert main(["train", "--config", str(run / "config.toml"), "--data", str(dataset), "--out", str(again)]) == 0
    assert (again / "scene.gr4d").read_bytes() == (run / "scene.gr4d").read_bytes()


def test_rectifier_train_and_learned_run(tmp_path, dataset):
    net = tmp_path / "rect.grnt"
    assert main(["rectifier-train", "--data", str(dataset), "--sparse-scene", str(dataset / "gt_scene.gr4d"),
                 "--out", str(net), "--steps", "2", "--batch", "1", "--max-pairs", "2"]) == 0
    assert net.is_file() and net.with_suffix(".jsonl").is_file()
    run = tmp_path / "learned"
    assert main(["train", "--data", str(dataset), "--out", str(run), "--set", "run.rectifier='learned'",
                 "--set", f"run.rectifier_checkpoint='{net}'", "--set", "pipeline.stage1_iters=2",
                 "--set", "pipeline.stage2_iters=2", "--set", "pipeline.novel_pool_size=2"]) == 0


def test_ablate_writes_csv(tmp_path, dataset):
    out = tmp_path / "abl"
    assert main(["ablate", "--data", str(dataset), "--out", str(out), "--seeds", "0", "--variants", "full",
                 "no-roi", "--set", "pipeline.stage1_iters=3", "--set", "pipeline.stage2_iters=2",
                 "--set", "pipeline.novel_pool_size=2"]) == 0
    rows = (out / "ablation.csv").read_text().splitlines()
    assert rows[0] == "variant,seed,psnr,ssim,temporal_consistency" and len(rows) == 3
