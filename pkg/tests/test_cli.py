import dataclasses
import math

import numpy as np
import pytest
import yaml

from sddf import cli
from sddf.config import SECTIONS, ConfigError, describe_defaults, load_config, parse_config
from sddf.evaluation import read_ply, read_sddi
from sddf.scans import read_scan

SMALL_2D = {
    "shape": {"type": "circle", "id": "c", "radius": 1.0},
    "sensor": {"views": 4, "rays": 91, "max_finite": 40, "max_infinite": 30},
    "arch": {"layers": 2, "width": 8},
    "train": {"iterations": 20, "batch_size": 64},
    "augment": {"views": 0},
    "eval": {"views": 2},
}


def write_config(path, data):
    path.write_text(yaml.safe_dump(data))
    return path


def run(*argv):
    return cli.main([str(a) for a in argv])


def folder_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_help_lists_every_key(capsys):
    with pytest.raises(SystemExit):
        run("train", "--help")
    text = capsys.readouterr().out
    for name, cls in SECTIONS.items():
        for f in dataclasses.fields(cls):
            assert f"{name}.{f.name} = " in text
    for line in describe_defaults().splitlines():
        assert line.strip() in text


def test_unknown_keys_rejected(tmp_path, capsys):
    with pytest.raises(ConfigError):
        parse_config({"train": {"iteratons": 5}})
    with pytest.raises(ConfigError):
        parse_config({"bogus": {}})
    with pytest.raises(ConfigError):
        parse_config({"shape": {"type": "circle", "colour": 1}}).instances()
    cfg = write_config(tmp_path / "bad.yaml", {"sensor": {"fov": 3}})
    assert run("generate", "--config", cfg, "--out", tmp_path / "o") == 2
    assert "sensor.fov" in capsys.readouterr().err


def test_shape_path_resolved_against_config_dir(tmp_path):
    sub = tmp_path / "cfg"
    sub.mkdir()
    (sub / "poly.yaml").write_text(yaml.safe_dump({"type": "polygon", "vertices": [[0, 0], [1, 0], [0, 1]]}))
    cfg = load_config(write_config(sub / "run.yaml", {"shape": {"id": "tri", "path": "poly.yaml"}}))
    (ident, shape), = cfg.shapes()
    assert ident == "tri" and shape.dim == 2


def test_generate_deterministic_and_capped(tmp_path):
    cfg = write_config(tmp_path / "c.yaml", SMALL_2D)
    assert run("generate", "--config", cfg, "--out", tmp_path / "a", "--seed", 3) == 0
    assert run("generate", "--config", cfg, "--out", tmp_path / "b", "--seed", 3) == 0
    a, b = folder_bytes(tmp_path / "a"), folder_bytes(tmp_path / "b")
    assert a == b
    scans = sorted((tmp_path / "a" / "scans").glob("*.sdsc"))
    assert len(scans) == 4
    for p in scans:
        s = read_scan(p)
        assert len(s.finite) <= 40 and len(s.infinite) <= 30


def test_generate_3d_ring_elevation(tmp_path):
    cfg = write_config(tmp_path / "s.yaml", {
        "shape": {"type": "sphere", "id": "s", "radius": 1.0},
        "sensor": {"views": 2, "radius": 2.5, "width": 8, "height": 8, "focal": 8},
    })
    assert run("generate", "--config", cfg, "--out", tmp_path) == 0
    p = read_scan(tmp_path / "scans" / "s_v1.sdsc").origins[0]
    assert abs(math.asin(p[2] / np.linalg.norm(p)) + math.pi / 4) < 1e-12
    assert abs(math.atan2(p[1], p[0]) - math.pi / 4) < 1e-12


def test_augment_zero_views_is_identity(tmp_path):
    cfg = write_config(tmp_path / "c.yaml", SMALL_2D)
    run("generate", "--config", cfg, "--out", tmp_path)
    src = tmp_path / "scans" / "c_v0.sdsc"
    assert run("augment", "--config", cfg, "--out", tmp_path, "--scans", src) == 0
    a, b = read_scan(src), read_scan(tmp_path / "augmented" / "c.sdsc")
    assert np.array_equal(a.origins, b.origins) and np.array_equal(a.directions, b.directions)
    assert np.array_equal(a.distances, b.distances)


def test_augment_seeded_reproducible(tmp_path):
    data = dict(SMALL_2D, augment={"views": 3, "max_points": 200})
    cfg = write_config(tmp_path / "c.yaml", data)
    run("generate", "--config", cfg, "--out", tmp_path)
    outs = []
    for name in ("x", "y"):
        (tmp_path / name).mkdir()
        assert run("augment", "--config", cfg, "--out", tmp_path / name, "--seed", 5,
                   "--scans", *sorted((tmp_path / "scans").glob("*.sdsc"))) == 0
        outs.append((tmp_path / name / "augmented" / "c.sdsc").read_bytes())
    assert outs[0] == outs[1]
    assert len(read_scan(tmp_path / "x" / "augmented" / "c.sdsc")) > 4 * 40


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("trained")
    cfg = write_config(root / "c.yaml", SMALL_2D)
    assert run("generate", "--config", cfg, "--out", root) == 0
    assert run("train", "--config", cfg, "--out", root, "--scans", *sorted((root / "scans").glob("*.sdsc"))) == 0
    return root, cfg


def test_train_outputs(trained):
    root, _ = trained
    for name in ("model.sddf", "loss.csv", "loss.png"):
        assert (root / name).stat().st_size > 0


def test_render_is_pure(trained, tmp_path):
    root, cfg = trained
    for name in ("r1", "r2"):
        assert run("render", "--config", cfg, "--out", tmp_path / name, "--checkpoint", root / "model.sddf") == 0
    a, b = folder_bytes(tmp_path / "r1"), folder_bytes(tmp_path / "r2")
    assert a == b
    assert any(k.endswith(".sddi") for k in a)


def test_missing_checkpoint(tmp_path, capsys):
    assert run("render", "--out", tmp_path, "--checkpoint", tmp_path / "nope.sddf") == 2
    assert "missing checkpoint" in capsys.readouterr().err


def test_eval_on_checkpoint_writes_reports(trained, tmp_path):
    root, cfg = trained
    assert run("eval", "--config", cfg, "--out", tmp_path, "--checkpoint", root / "model.sddf") == 0
    assert (tmp_path / "metrics.json").exists() and (tmp_path / "freespace.json").exists()


def test_eval_oracle_vs_oracle_is_zero(tmp_path):
    from sddf.evaluation import write_ply
    pts = np.random.default_rng(0).standard_normal((200, 3))
    write_ply(tmp_path / "a.ply", pts)
    assert run("eval", "--out", tmp_path, "--pred", tmp_path / "a.ply", "--gt", tmp_path / "a.ply") == 0
    import json
    rep = json.loads((tmp_path / "metrics.json").read_text())
    assert rep == {"chamfer_l1": 0.0, "chamfer_l2": 0.0, "completeness": 0.0, "accuracy": 0.0}
    assert np.array_equal(read_ply(tmp_path / "a.ply"), pts)


def test_category_interpolation_endpoint_matches_render(tmp_path):
    data = {
        "dataset": {"instances": [
            {"id": "a", "shape": {"type": "circle", "radius": 0.5}},
            {"id": "b", "shape": {"type": "circle", "radius": 1.0}},
        ]},
        "sensor": {"views": 2, "rays": 61},
        "arch": {"layers": 2, "width": 8, "latent_dim": 2},
        "train": {"iterations": 10, "batch_size": 64, "code_iterations": 5},
        "augment": {"views": 0},
        "eval": {"views": 1},
    }
    cfg = write_config(tmp_path / "cat.yaml", data)
    assert run("generate", "--config", cfg, "--out", tmp_path) == 0
    assert run("train", "--config", cfg, "--out", tmp_path, "--scans", *sorted((tmp_path / "scans").glob("*.sdsc"))) == 0
    assert run("render", "--config", cfg, "--out", tmp_path, "--instance", "a") == 0
    assert run("interpolate", "--config", cfg, "--out", tmp_path, "--a", "a", "--b", "b", "--weights", 1) == 0
    ra = read_sddi(tmp_path / "render" / "a_r0.sddi")
    rw = read_sddi(tmp_path / "interpolation" / "w1_r0.sddi")
    assert np.array_equal(ra[0], rw[0])
    assert (tmp_path / "render" / "a_r0.sddi").read_bytes() == (tmp_path / "interpolation" / "w1_r0.sddi").read_bytes()

    held = tmp_path / "heldout" / "a_h0.sdsc"
    assert run("complete", "--config", cfg, "--out", tmp_path, "--scan", held, "--id", "a2") == 0
    assert (tmp_path / "completed.sddf").exists() and (tmp_path / "completion.json").exists()
    assert run("render", "--config", cfg, "--out", tmp_path, "--instance", "zzz") == 2


def test_threads_fallback(monkeypatch):
    monkeypatch.setenv("SDDF_THREADS", "3")
    assert cli.resolve_threads(None) == 3
    assert cli.resolve_threads(2) == 2
    monkeypatch.delenv("SDDF_THREADS")
    assert cli.resolve_threads(None) == 1
    monkeypatch.setenv("SDDF_THREADS", "x")
    with pytest.raises(cli.CommandError):
        cli.resolve_threads(None)
    with pytest.raises(cli.CommandError):
        cli.resolve_threads(0)
