import json
import shutil

import numpy as np
import pytest

from purcellkit.cli import main
from purcellkit.io import read_csv, read_manifest_tag


@pytest.fixture(autouse=True)
def workspace(tmp_path, monkeypatch):
    monkeypatch.setenv("PURCELLKIT_WORKSPACE", str(tmp_path))
    monkeypatch.chdir(tmp_path)
    return tmp_path


def run(*argv):
    return main([*argv, "--quiet"])


def test_tmm_sweep_writes_csv_and_svg(workspace):
    assert run("tmm", "--points", "21", "--range", "700", "800") == 0
    out = workspace / "out"
    table = read_csv(out / "tmm.csv", required=("wavelength_nm", "T_fiber_ppm", "T_planar_ppm", "finesse"))
    assert table["wavelength_nm"].size == 21
    assert np.all(table["finesse"] > 0)
    assert (out / "tmm_transmission.svg").read_text().lstrip().startswith("<?xml")
    assert read_manifest_tag(out / "tmm.csv") is not None


def test_empty_sweep_gives_header_only(workspace):
    assert run("tmm", "--points", "0", "--format", "csv") == 0
    lines = (workspace / "out" / "tmm.csv").read_text().splitlines()
    assert [ln for ln in lines if not ln.startswith("#")] == [
        "wavelength_nm,T_fiber_ppm,phase_fiber_rad,T_planar_ppm,phase_planar_rad,finesse"
    ]


def test_design_table(workspace):
    assert run("design", "--format", "csv") == 0
    table = read_csv(workspace / "out" / "design.csv", required=("id", "C_eff"))
    assert table["id"][:2] == ["ND1", "ND2"]
    np.testing.assert_allclose(table["C_eff"][:2], [9.04, 6.05], atol=0.01)


def test_simulate_is_byte_deterministic(workspace):
    assert run("simulate", "nd1_cw.toml", "--seed", "3", "--out", "a") == 0
    assert run("simulate", "nd1_cw.toml", "--seed", "3", "--out", "b") == 0
    files = sorted(p.relative_to(workspace / "a") for p in (workspace / "a").rglob("*") if p.is_file())
    assert files
    for rel in files:
        assert (workspace / "a" / rel).read_bytes() == (workspace / "b" / rel).read_bytes(), rel


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as info:
        main(["tmm", "--bogus"])
    assert info.value.code == 2


def test_parse_error_exit_code(workspace, capsys):
    (workspace / "bad.stack").write_text("substrate 1.45\nlayer 1.5 x\n")
    assert run("tmm", "bad.stack") == 3
    assert "bad.stack:2" in capsys.readouterr().err


def test_schema_error_exit_code(workspace):
    (workspace / "bad.csv").write_text("a,b\n1,2\n")
    assert run("analyze", "lifetime", "bad.csv") == 4


def test_convergence_exit_code(workspace):
    tau = np.linspace(-100, 100, 400)
    rows = "".join(f"{t:.17g},{1 + 0.001 * np.sin(t):.17g}\n" for t in tau)
    (workspace / "flat.csv").write_text("tau_ns,g2\n" + rows)
    assert run("analyze", "g2", "flat.csv") == 5


def test_missing_input_exit_codes(workspace):
    assert run("simulate", "no_such.toml") == 6
    assert run("report", "--results", str(workspace / "nothing")) == 6


def test_invalid_input_exit_code():
    assert run("tmm", "--range", "800", "700") == 7


@pytest.mark.slow
def test_pipeline_quick_and_partial_report(workspace):
    assert run("pipeline", "--quick") == 0
    out = workspace / "out"
    for name in ("table_I", "table_II", "table_III", "table_IV"):
        assert (out / "report" / f"{name}.csv").exists()
    t2 = read_csv(out / "report" / "table_II.csv", required=("id", "C_exp"))
    assert len(t2["id"]) == 4
    g2 = json.loads((out / "analysis" / "g2_global.json").read_text())
    assert g2["kind"] == "g2_global"

    # a results folder with lifetimes only still reports, with the gaps listed
    part = workspace / "part"
    part.mkdir()
    for p in (out / "analysis").glob("lifetime_*.json"):
        shutil.copy(p, part)
    assert run("report", "--results", str(part), "--out", "partial") == 0
    assert read_csv(workspace / "partial" / "report" / "table_III.csv")["id"][0] == "ND1"
    lines = (workspace / "partial" / "report" / "table_II.csv").read_text().splitlines()
    assert [ln for ln in lines if not ln.startswith("#")] == ["id,I_m_fs_MHz,I_m_c_MHz,I_fs_MHz,I_c_MHz,C_th,C_exp"]
