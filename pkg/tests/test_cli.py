import argparse
import json
from pathlib import Path

import jsonschema
import numpy as np
import pytest

from sdsinpaint.cli import build_parser, main
from sdsinpaint.imaging import read_pfm
from sdsinpaint.scene import SceneSpec, generate_synthetic_scene, load_dataset, load_schema

SNAPSHOTS = Path(__file__).parent / "snapshots"
COMMANDS = ["", "make-scene", "train", "render", "eval", "mock-prior"]

SMALL_TOML = """
rays_per_step = 32
n_samples = 8
trunk = [16, 16]
head = 8
pos_frequencies = 3
dir_frequencies = 2
prior_resolution = 8
lr = 5e-3
"""


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A scene, a short training run and gt renders shared by the flow tests."""
    root = tmp_path_factory.mktemp("cli")
    (root / "small.toml").write_text(SMALL_TOML)
    assert main(["make-scene", str(root / "scene"), "--width", "8", "--height", "8", "--frames", "3"]) == 0
    assert main(["train", "--scene", str(root / "scene"), "--out", str(root / "run"), "--config", str(root / "small.toml"),
                 "--ablation", "ii", "--iterations", "4", "--seed", "3"]) == 0
    assert main(["render", "--checkpoint", str(root / "run" / "field.ckpt"), "--scene", str(root / "scene"),
                 "--out", str(root / "renders"), "--frames", "gt", "--samples", "16", "--normals"]) == 0
    return root


@pytest.mark.parametrize("command", COMMANDS)
def test_help_matches_snapshot(command, capsys, monkeypatch):
    monkeypatch.setenv("COLUMNS", "100")
    argv = [command, "--help"] if command else ["--help"]
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 0
    expected = (SNAPSHOTS / f"help_{command or 'main'}.txt").read_text()
    assert capsys.readouterr().out == expected


def test_help_lists_every_flag():
    parser = build_parser()
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    for name, p in [("", parser), *sub.choices.items()]:
        text = p.format_help()
        for action in p._actions:
            for flag in action.option_strings:
                assert flag in text, (name, flag)


def test_version(capsys):
    with pytest.raises(SystemExit):
        main(["--version"])
    assert capsys.readouterr().out.startswith("sdsinpaint ")


def test_make_scene_layout_and_dilation(tmp_path, capsys):
    code, out, _ = run(capsys, "make-scene", tmp_path / "s", "--frames", "12", "--dilate", "3", "--width", "16", "--height", "12")
    assert code == 0 and "12 frames" in out
    ds = load_dataset(tmp_path / "s")
    assert len(ds.frames) == 12 and len(ds.gt_frames) == 12
    # independently dilate the analytic silhouette with a 7x7 box
    sc = generate_synthetic_scene(SceneSpec(width=16, height=12, frames=12, dilate=0))
    for f, sil in zip(ds.frames, sc.silhouettes):
        pad = np.pad(sil, 3)
        ref = np.zeros_like(sil)
        for dv in range(7):
            for du in range(7):
                ref |= pad[dv:dv + 12, du:du + 16]
        np.testing.assert_array_equal(f.mask, ref)


def test_make_scene_without_object(tmp_path, capsys):
    code, *_ = run(capsys, "make-scene", tmp_path / "s", "--no-object", "--frames", "2", "--width", "8", "--height", "8")
    assert code == 0
    ds = load_dataset(tmp_path / "s")
    for f, g in zip(ds.frames, ds.gt_frames):
        assert not f.mask.any()
        assert f.image.tobytes() == g.image.tobytes()


def test_train_writes_outputs(workdir):
    run_dir = workdir / "run"
    assert (run_dir / "field.ckpt").exists()
    rows = (run_dir / "loss.csv").read_text().splitlines()
    assert len(rows) == 5
    cfg = json.loads((run_dir / "config.json").read_text())
    assert cfg["iterations"] == 4 and cfg["seed"] == 3 and cfg["geometry_sds"] is False


def test_train_is_deterministic(workdir, tmp_path, capsys):
    code, *_ = run(capsys, "train", "--scene", workdir / "scene", "--out", tmp_path / "again", "--config", workdir / "small.toml",
                   "--ablation", "ii", "--iterations", "4", "--seed", "3")
    assert code == 0
    assert (tmp_path / "again" / "loss.csv").read_bytes() == (workdir / "run" / "loss.csv").read_bytes()
    assert (tmp_path / "again" / "field.ckpt").read_bytes() == (workdir / "run" / "field.ckpt").read_bytes()


def test_render_outputs(workdir):
    ds = load_dataset(workdir / "scene")
    for g in ds.gt_frames:
        assert (workdir / "renders" / "images" / f"{g.index:04d}.png").exists()
        d = read_pfm(workdir / "renders" / "depth" / f"{g.index:04d}.pfm")
        assert d.shape == (8, 8) and np.all(np.isfinite(d))
        n = read_pfm(workdir / "renders" / "normals" / f"{g.index:04d}.pfm")
        norms = np.linalg.norm(n, axis=-1)
        valid = norms > 0
        assert valid.any()
        np.testing.assert_allclose(norms[valid], 1.0, atol=1e-5)


def test_eval_writes_valid_report(workdir, tmp_path, capsys):
    code, out, _ = run(capsys, "eval", "--renders", workdir / "renders", "--gt", workdir / "scene", "--json", tmp_path / "r.json")
    assert code == 0
    assert out.splitlines()[-1].lstrip().startswith("mean")
    doc = json.loads((tmp_path / "r.json").read_text())
    jsonschema.validate(doc, load_schema("report"))
    assert len(doc["frames"]) == 3


def test_missing_scene_is_dataset_error(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--scene", tmp_path / "nothing", "--out", tmp_path / "o", "--iterations", "1")
    assert code == 2
    assert err.startswith("ERROR E_DATASET:") and "poses.json" in err
    assert len(err.strip().splitlines()) == 1


def test_bad_config_is_config_error(workdir, tmp_path, capsys):
    (tmp_path / "bad.toml").write_text("learning_rate = 3\n")
    code, _, err = run(capsys, "train", "--scene", workdir / "scene", "--out", tmp_path / "o", "--config", tmp_path / "bad.toml")
    assert code == 2 and err.startswith("ERROR E_CONFIG:") and "learning_rate" in err
    (tmp_path / "broken.toml").write_text("lr = [\n")
    code, _, err = run(capsys, "train", "--scene", workdir / "scene", "--out", tmp_path / "o", "--config", tmp_path / "broken.toml")
    assert code == 2 and err.startswith("ERROR E_CONFIG:")


def test_remote_without_endpoint_is_config_error(workdir, tmp_path, capsys):
    code, _, err = run(capsys, "train", "--scene", workdir / "scene", "--out", tmp_path / "o", "--config", workdir / "small.toml",
                       "--ablation", "ii", "--iterations", "1", "--prior", "remote")
    assert code == 2 and err.startswith("ERROR E_CONFIG:")


def test_corrupt_checkpoint_names_offset(workdir, tmp_path, capsys):
    data = (workdir / "run" / "field.ckpt").read_bytes()
    (tmp_path / "cut.ckpt").write_bytes(data[: len(data) // 2])
    code, _, err = run(capsys, "render", "--checkpoint", tmp_path / "cut.ckpt", "--scene", workdir / "scene", "--out", tmp_path / "r")
    assert code == 2 and err.startswith("ERROR E_CHECKPOINT:") and "offset" in err
    (tmp_path / "magic.ckpt").write_bytes(b"JUNK" + data[4:])
    code, _, err = run(capsys, "render", "--checkpoint", tmp_path / "magic.ckpt", "--scene", workdir / "scene", "--out", tmp_path / "r")
    assert code == 2 and "offset 0" in err


def test_missing_checkpoint_is_io_error(workdir, tmp_path, capsys):
    code, _, err = run(capsys, "render", "--checkpoint", tmp_path / "none.ckpt", "--scene", workdir / "scene", "--out", tmp_path / "r")
    assert code == 2 and err.startswith("ERROR E_")


def test_eval_count_mismatch(workdir, tmp_path, capsys):
    run(capsys, "make-scene", tmp_path / "other", "--width", "8", "--height", "8", "--frames", "4")
    code, _, err = run(capsys, "eval", "--renders", workdir / "renders", "--gt", tmp_path / "other")
    assert code == 2 and err.startswith("ERROR E_INPUT:")


def test_train_against_mock_prior_server(workdir, tmp_path, capsys):
    from sdsinpaint.prior import GaussianPredictor
    from sdsinpaint.remote import MockPriorServer

    srv = MockPriorServer(GaussianPredictor(np.full(3, 0.5), 0.01))
    srv.start_background()
    try:
        code, *_ = run(capsys, "train", "--scene", workdir / "scene", "--out", tmp_path / "remote", "--config", workdir / "small.toml",
                       "--ablation", "ii", "--iterations", "3", "--prior", "remote", "--endpoint", srv.url)
    finally:
        srv.stop()
    assert code == 0
    code, *_ = run(capsys, "train", "--scene", workdir / "scene", "--out", tmp_path / "local", "--config", workdir / "small.toml",
                   "--ablation", "ii", "--iterations", "3", "--prior", "gaussian", "--mu", "0.5")
    assert code == 0
    assert (tmp_path / "remote" / "loss.csv").read_bytes() == (tmp_path / "local" / "loss.csv").read_bytes()


def test_unreachable_prior_is_unavailable(workdir, tmp_path, capsys):
    code, _, err = run(capsys, "train", "--scene", workdir / "scene", "--out", tmp_path / "o", "--config", workdir / "small.toml",
                       "--ablation", "ii", "--iterations", "2", "--prior", "remote", "--endpoint", "http://127.0.0.1:9",
                       "--timeout", "0.5", "--retries", "0")
    assert code == 2 and err.startswith("ERROR E_PRIOR_UNAVAILABLE:")
