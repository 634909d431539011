"""End-to-end tests of the command line interface via main()."""

import numpy as np
import pytest

import anisoflow.cli as cli
from anisoflow import StabilizerTable, make_cuboid
from anisoflow.cli import main, manifest_text, parse_config_text, parse_model
from anisoflow.diagnostics import ConvergenceReport
from anisoflow.errors import ConfigError


def _evolve_config(tmp_path, _name="run.cfg", **overrides):
    values = {
        "shape": "cuboid",
        "extent": "2,2,1",
        "model": "isotropic",
        "k": "2.5",
        "h": "0.5",
        "T": "0.1",
        "outdir": str(tmp_path / "run"),
    }
    values.update(overrides)
    path = tmp_path / _name
    path.write_text("".join(f"{k} = {v}\n" for k, v in values.items()))
    return path


def test_parse_config_text_errors():
    with pytest.raises(ConfigError, match="key = value"):
        parse_config_text("h 0.5\n")
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config_text("h = 1\nh = 2\n")
    got = parse_config_text("# note\nh = 0.5  # trailing\n\nT = 1\n")
    assert got == {"h": "0.5", "T": "1"}


def test_parse_model_specs():
    assert parse_model("isotropic").family == "isotropic"
    assert parse_model("fourfold:0.25").beta == 0.25
    assert parse_model("lrnorm:4").r == 4.0
    ell = parse_model("ellipsoidal:1,1,2")
    assert np.allclose(ell.G, np.diag([1.0, 1.0, 2.0]))
    bgn = parse_model("bgn:2:1,1,2;2,1,1")
    assert len(bgn.G_list) == 2
    for bad in ("nope", "fourfold:x", "ellipsoidal:1,2", "bgn:2:"):
        with pytest.raises(ConfigError):
            parse_model(bad)


def test_evolve_run(tmp_path, capsys):
    cfg = _evolve_config(tmp_path)
    assert main(["evolve", "--config", str(cfg)]) == 0
    out = tmp_path / "run"
    series = (out / "series.csv").read_text()
    lines = series.splitlines()
    assert lines[0] == "step,t,V,dV_rel,W,W_rel,newton_iters,min_quality"
    assert len(lines) == 7  # header + steps 0..5 at tau = 0.02
    assert (out / "mesh_0.obj").exists()
    assert (out / "mesh_5.obj").exists()
    assert (out / "volume_drift.png").exists()
    assert (out / "energy_ratio.png").exists()
    assert "completed 5 steps" in capsys.readouterr().out
    # the manifest re-parses to the same resolved configuration
    manifest = parse_config_text((out / "manifest.txt").read_text())
    rc = cli.resolve_run_config(manifest)
    assert manifest_text(rc.values) == (out / "manifest.txt").read_text()


def test_evolve_deterministic_series(tmp_path):
    cfg_a = _evolve_config(tmp_path, _name="a.cfg", outdir=str(tmp_path / "a"))
    cfg_b = _evolve_config(tmp_path, _name="b.cfg", outdir=str(tmp_path / "b"))
    assert main(["evolve", "--config", str(cfg_a)]) == 0
    assert main(["evolve", "--config", str(cfg_b)]) == 0
    assert (tmp_path / "a" / "series.csv").read_bytes() == (
        tmp_path / "b" / "series.csv"
    ).read_bytes()


def test_evolve_flag_overrides_config(tmp_path):
    cfg = _evolve_config(tmp_path)
    assert main(["evolve", "--config", str(cfg), "--T", "0.04"]) == 0
    lines = (tmp_path / "run" / "series.csv").read_text().splitlines()
    assert len(lines) == 4  # header + steps 0..2
    manifest = parse_config_text((tmp_path / "run" / "manifest.txt").read_text())
    assert manifest["T"] == "0.040000000000000001"


def test_evolve_error_reporting(tmp_path, capsys):
    bad = _evolve_config(tmp_path, h="zero")
    assert main(["evolve", "--config", str(bad)]) == 2
    assert "'h'" in capsys.readouterr().err
    missing = _evolve_config(tmp_path)
    text = missing.read_text().replace("model = isotropic\n", "")
    missing.write_text(text)
    assert main(["evolve", "--config", str(missing)]) == 2
    assert "model" in capsys.readouterr().err
    unknown = _evolve_config(tmp_path, banana="1")
    assert main(["evolve", "--config", str(unknown)]) == 2
    assert "banana" in capsys.readouterr().err


def test_evolve_from_obj_and_vtk_output(tmp_path):
    mesh_path = tmp_path / "start.obj"
    make_cuboid(2, 2, 1, 1.0).write_obj(mesh_path)
    cfg = _evolve_config(
        tmp_path,
        shape="obj",
        mesh_file=str(mesh_path),
        tau="0.02",
        formats="obj,vtk",
        figures="false",
    )
    assert main(["evolve", "--config", str(cfg)]) == 0
    out = tmp_path / "run"
    assert (out / "mesh_5.vtk").exists()
    assert not (out / "volume_drift.png").exists()


def test_k0_command_caches_and_repeats(tmp_path, monkeypatch, capsys):
    def fake_build(model, strategy="exact", tol=1e-3, progress=None):
        return StabilizerTable(
            np.full((11, 11), 2.5), strategy, tol, cli.model_hash(model)
        )

    monkeypatch.setattr(cli, "build_table", fake_build)
    out = tmp_path / "table.txt"
    assert main(["k0", "isotropic", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "k0 range [2.5, 2.5]" in text
    first = out.read_bytes()
    assert main(["k0", "isotropic", "--out", str(out)]) == 0
    assert out.read_bytes() == first
    loaded = StabilizerTable.load(out)
    assert loaded.values.min() == 2.5


def test_classify_command(capsys):
    assert main(["classify", "fourfold:0.5"]) == 0
    text = capsys.readouterr().out
    assert text.splitlines()[0] == "Strong"
    assert "witness normal" in text
    assert main(["classify", "ellipsoidal:1,1,2"]) == 0
    assert capsys.readouterr().out.splitlines()[0] == "Weak"


def test_distance_command(tmp_path, capsys):
    a = tmp_path / "a.obj"
    b = tmp_path / "b.obj"
    make_cuboid(1, 1, 1, 0.5).write_obj(a)
    make_cuboid(2, 2, 2, 0.5).write_obj(b)
    assert main(["distance", str(a), str(b)]) == 0
    out = capsys.readouterr().out
    value = float(out.splitlines()[0].split("=")[1])
    assert value == pytest.approx(7.0, abs=1e-2)
    assert "converged = true" in out

    assert main(["distance", str(a), str(a)]) == 0
    value = float(capsys.readouterr().out.splitlines()[0].split("=")[1])
    assert value == 0.0


def test_distance_rejects_open_mesh(tmp_path, capsys):
    bad = tmp_path / "open.obj"
    bad.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
    good = tmp_path / "cube.obj"
    make_cuboid(1, 1, 1, 0.5).write_obj(good)
    assert main(["distance", str(bad), str(good)]) == 5
    assert "closed" in capsys.readouterr().err


def test_convergence_command_outputs(tmp_path, monkeypatch, capsys):
    report = ConvergenceReport(
        2,
        (0.5, 1.0),
        ((0.5, 0.02, (0.1, 0.2)), (0.25, 0.005, (0.025, 0.05))),
        ((0.5, 0.25, (2.0, 2.0)),),
    )
    monkeypatch.setattr(cli, "convergence_suite", lambda case, **kw: report)
    out = tmp_path / "conv"
    assert main(["convergence", "2", "--outdir", str(out)]) == 0
    assert (out / "convergence_case2.csv").exists()
    assert (out / "convergence_case2.txt").exists()
    assert (out / "convergence_case2.png").exists()
    assert "case 2" in capsys.readouterr().out

    failed = ConvergenceReport(2, (0.5,), (), (), ((0.0625, "boom"),))
    monkeypatch.setattr(cli, "convergence_suite", lambda case, **kw: failed)
    assert main(["convergence", "2", "--outdir", str(out)]) == 1


def test_convergence_rejects_bad_case(capsys):
    assert main(["convergence", "7"]) == 2
    assert "case" in capsys.readouterr().err
