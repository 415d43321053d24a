import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from mfrbsde import registry
from mfrbsde.cli import main
from mfrbsde.config import config_hash, load_schema, resolve
from mfrbsde.obstacle import make_affine

REPO = Path(__file__).resolve().parents[1]


def scalar_config(**solver):
    return {
        "problem": {
            "driver": {"kind": "constant", "c": -1.0},
            "terminal": {"kind": "constant", "value": 0.0},
            "obstacle": {"kind": "affine", "alpha": 1.0},
        },
        "solver": {"N": 20, "M": 400, "m": 50, "basis_degree": 0, **solver},
    }


def run(tmp_path, cfg, command="solve", *extra, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    out = tmp_path / f"out_{command}_{len(list(tmp_path.iterdir()))}"
    code = main([command, "--config", str(path), "--out", str(out), *extra])
    return code, out


def load(out, name):
    return json.loads((out / name).read_text())


def test_solve_scalar_family(tmp_path):
    code, out = run(tmp_path, scalar_config())
    assert code == 0
    summary = load(out, "summary.json")
    assert summary["total_penalty_mass"] == pytest.approx(1.0, rel=0.05)
    manifest = load(out, "manifest.json")
    assert set(manifest["files"]) == {
        "config.resolved.json", "summary.json", "series.csv", "plot_mean_Y.csv", "plot_mean_K.csv",
        "plot_sup_H_minus.csv", "plot_partial_defect.csv",
    }
    for name in manifest["files"]:
        if name.endswith(".csv"):
            header = (out / name).read_text().splitlines()[0].split(",")
            assert all(h.endswith("]") and " [" in h for h in header)
    assert (out / "plot_mean_Y.csv").read_text().splitlines()[0] == "t [time],mean_Y [state]"


def test_solve_counterexample(tmp_path):
    cfg = json.loads((REPO / "configs" / "counterexample.json").read_text())
    cfg["solver"].update({"N": 100, "M": 200})
    code, out = run(tmp_path, cfg)
    assert code == 0
    summary = load(out, "summary.json")
    assert summary["Y0_mean"][0] == pytest.approx(1.0, abs=1e-10)
    assert summary["total_penalty_mass"] == 0.0
    assert any("sampled structural checks" in w for w in summary["warnings"])


def test_zero_alpha_is_a_validation_error(tmp_path, capsys):
    cfg = json.loads((REPO / "configs" / "zero_alpha.json").read_text())
    code, _ = run(tmp_path, cfg)
    assert code == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "validation" and "beta > 0" in err["message"]


@pytest.mark.parametrize(
    "name, code",
    [("theta_mixture.json", 0), ("counterexample.json", 1), ("scalar_obstacle.json", 0)],
)
def test_check_assumptions_examples(tmp_path, name, code):
    cfg = json.loads((REPO / "configs" / name).read_text())
    got, out = run(tmp_path, cfg, "check-assumptions")
    assert got == code
    report = load(out, "assumptions.json")
    status = {c["condition"]: c for c in report["conditions"]}
    if code == 1:
        assert {c for c, e in status.items() if e["status"] == "fail"} == {"sign_15", "strict_38"}
        assert status["sign_15"]["witness"]["y"] is not None
    if name == "scalar_obstacle.json":
        assert report["lions_identically_zero"] and report["notes"]


def test_penalty_study_reports_both_rates(tmp_path):
    cfg = scalar_config(N=5, M=2000)
    cfg["study"] = {"penalty": {"m_grid": [25, 50, 100, 200]}}
    code, out = run(tmp_path, cfg, "study", "--kind", "penalty")
    result = load(out, "study_penalty.json")
    checks = result["checks"]
    assert checks["m2_int_bounded"]
    # m sup H^-^2 = (1 - e^{-m})^2 / m, so its spread over an 8x grid is 8
    assert checks["m_sup_spread"] == pytest.approx(8.0, rel=1e-3)
    assert code == (0 if result["passed"] else 1) == 1


def test_chaos_study_with_reference_in_grid_is_invalid(tmp_path):
    cfg = scalar_config()
    cfg["study"] = {"chaos": {"N_grid": [10, 20], "N_ref": 20}}
    assert run(tmp_path, cfg, "study", "--kind", "chaos")[0] == 2


def test_missing_study_block_is_invalid(tmp_path):
    assert run(tmp_path, scalar_config(), "study", "--kind", "stability")[0] == 2


def test_stability_zero_row(tmp_path):
    cfg = scalar_config(N=5, M=2000, m=100)
    cfg["study"] = {"stability": {"eps_grid": [0.0, 0.1, 0.01], "dxi": 1.0}}
    code, out = run(tmp_path, cfg, "study", "--kind", "stability")
    assert code == 0
    rows = load(out, "study_stability.json")["rows"]
    assert rows[0]["sup_mean_dY_sq"] == 0.0 and rows[0]["int_mean_dZ_sq"] == 0.0
    csv_rows = (out / "study_stability.csv").read_text().splitlines()
    assert csv_rows[1].startswith("0.0,0.0,0.0")


def quadratic_config(N=5000):
    cfg = json.loads((REPO / "configs" / "decoupling_quadratic.json").read_text())
    cfg["solver"]["N"] = N
    return cfg


def test_decoupling_command(tmp_path):
    code, out = run(tmp_path, quadratic_config(), "decoupling")
    assert code == 0
    lines = (out / "field.csv").read_text().splitlines()
    header = lines[0].split(",")
    assert header[:3] == ["t [time]", "x0 [state]", "lambda_id [1]"]
    rows = [dict(zip([h.split(" ")[0] for h in header], line.split(","))) for line in lines[1:]]
    at_zero = next(r for r in rows if float(r["t"]) == 0.0 and float(r["x0"]) == 0.0)
    assert float(at_zero["u"]) == pytest.approx(1.0, abs=0.05)
    for r in rows:
        if float(r["t"]) == 1.0:
            assert float(r["u"]) == float(r["x0"]) ** 2
    assert load(out, "decoupling.json")["passed"]


def test_decoupling_rejects_wrong_signs(tmp_path, capsys):
    cfg = quadratic_config(100)
    cfg["problem"]["obstacle"] = {"kind": "affine", "alpha": 1.0, "b": 50.0}
    assert run(tmp_path, cfg, "decoupling")[0] == 2
    assert "decreasing obstacle" in json.loads(capsys.readouterr().err)["message"]


def test_decoupling_rejects_vector_state(tmp_path):
    cfg = {
        "problem": {
            "dims": {"n": 2},
            "driver": {"kind": "zero"},
            "terminal": {"kind": "constant", "value": [0.0, 0.0]},
            "obstacle": {"kind": "affine", "alpha": [-1.0, -1.0], "b": 5.0},
        },
        "solver": {"N": 10, "M": 2},
    }
    assert run(tmp_path, cfg, "decoupling")[0] == 2


def test_numerical_failure_exit_code(tmp_path, capsys):
    cfg = scalar_config(N=5, M=10, m=10000, picard_iters=20)
    assert run(tmp_path, cfg)[0] == 3
    assert json.loads(capsys.readouterr().err)["error"] == "NumericalError"


@pytest.mark.parametrize(
    "mutate",
    [
        lambda c: c.update({"unknown": 1}),
        lambda c: c["solver"].update({"N": 0}),
        lambda c: c["problem"]["obstacle"].update({"kind": "banana"}),
    ],
)
def test_schema_rejections(tmp_path, mutate):
    cfg = scalar_config()
    mutate(cfg)
    assert run(tmp_path, cfg)[0] == 2


def test_unreadable_configs(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["solve", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert main(["solve", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o")]) == 2


def test_outputs_are_byte_identical_across_threads(tmp_path):
    cfg = json.loads((REPO / "configs" / "call_never_binding.json").read_text())
    cfg["solver"]["N"] = 600
    _, a = run(tmp_path, cfg, "solve", "--threads", "1")
    _, b = run(tmp_path, cfg, "solve", "--threads", "4")
    ma, mb = load(a, "manifest.json"), load(b, "manifest.json")
    assert ma["files"] == mb["files"]
    for name in ma["files"]:
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_resolved_config_round_trip(tmp_path):
    _, first = run(tmp_path, scalar_config(), "solve", "--seed", "9")
    resolved = load(first, "config.resolved.json")
    assert resolved["solver"]["seed"] == 9
    assert resolve(resolved).resolved == resolved
    second = tmp_path / "again"
    assert main(["solve", "--config", str(first / "config.resolved.json"), "--out", str(second)]) == 0
    assert load(first, "manifest.json")["files"] == load(second, "manifest.json")["files"]
    assert load(first, "manifest.json")["config_sha256"] == config_hash(resolved)


def test_output_root_override(tmp_path, monkeypatch):
    monkeypatch.setenv("MFRBSDE_OUTPUT_ROOT", str(tmp_path / "root"))
    cfg = scalar_config()
    cfg["output"] = {"directory": "relative/run"}
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    assert main(["solve", "--config", str(path)]) == 0
    assert (tmp_path / "root" / "relative" / "run" / "manifest.json").exists()


def test_custom_obstacle_from_registry(tmp_path):
    registry.register("obstacle", "shifted_identity", lambda p: make_affine([1.0], 0.0, [0.0], p["shift"]))
    try:
        cfg = scalar_config()
        cfg["problem"]["obstacle"] = {"kind": "custom", "name": "shifted_identity", "params": {"shift": 1.0}}
        code, out = run(tmp_path, cfg)
        assert code == 0
        assert load(out, "summary.json")["Y0_mean"][0] == pytest.approx(-1.0, abs=0.05)
    finally:
        registry.unregister("obstacle", "shifted_identity")
    assert run(tmp_path, cfg)[0] == 2


def test_shipped_schema_copy_matches():
    assert json.loads((REPO / "docs" / "config.schema.json").read_text()) == load_schema()


def test_shipped_configs_validate():
    for path in sorted((REPO / "configs").glob("*.json")):
        if path.name != "zero_alpha.json":
            resolve(json.loads(path.read_text()))


def test_module_entry_point(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(scalar_config(N=5, M=100, m=1)))
    proc = subprocess.run(
        [sys.executable, "-m", "mfrbsde", "solve", "--config", str(path), "--out", str(tmp_path / "o")],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert np.isfinite(load(tmp_path / "o", "summary.json")["Y0_mean"][0])
