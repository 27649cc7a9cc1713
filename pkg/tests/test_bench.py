import csv
import io
import json

import numpy as np
import pytest

from beclod.bench import (
    DYNAMICS_COLUMNS,
    GROUNDSTATE_COLUMNS,
    REFERENCE_ENERGIES,
    TIME_COLUMNS,
    ConfigError,
    ExperimentConfig,
    build_space_for_row,
    emit_report,
    lsq_slope,
    pairwise_eoc,
    rows_to_csv,
    rows_to_text,
    run_dynamics_experiment,
    run_groundstate_experiment,
    write_density_csv,
    write_trace_csv,
)
from beclod.cli import EXIT_CONFIG, EXIT_FP_DIVERGENCE, EXIT_OK, main


def gs_config(**over):
    d = {
        "kind": "groundstate",
        "domain": {"lower": [-4.0], "upper": [4.0]},
        "rows": [{"H": 0.5, "factor": 2, "ell": 4}],
        "potential": "harmonic",
        "form": "potential",
        "beta": 1.0,
        "groundstate": {"tol_energy": 1e-9},
    }
    d.update(over)
    return d


def evolve_config(**over):
    d = {
        "kind": "evolve",
        "domain": {"lower": [-20.0], "upper": [20.0]},
        "rows": [{"H": 0.625, "factor": 2, "ell": 4}],
        "beta": -2.0,
        "kinetic_factor": 1.0,
        "dynamics": {"T": 0.0625, "taus": [0.015625], "qs": [1],
                     "initial": "soliton"},
    }
    d.update(over)
    return d


# ------------------------------------------------------------ config


def test_config_parses_and_round_trips(tmp_path):
    cfg = ExperimentConfig.from_dict(gs_config())
    assert cfg.kind == "groundstate"
    assert cfg.dim == 1
    assert cfg.rows[0]["cells"] == (16,)
    assert cfg.rows[0]["H"] == 0.5
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg.to_dict()))
    cfg2 = ExperimentConfig.from_json(path)
    assert cfg2 == cfg


def test_config_accepts_cells_spec():
    d = gs_config()
    d["rows"] = [{"cells": 16, "factor": 2, "ell": 4}]
    cfg = ExperimentConfig.from_dict(d)
    assert cfg.rows[0]["cells"] == (16,)
    assert cfg.rows[0]["H"] == 0.5


def test_config_rejects_nontiling_H():
    d = gs_config()
    d["rows"] = [{"H": 0.7, "factor": 2, "ell": 4}]
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(d)


def test_config_rejects_nondividing_tau():
    d = evolve_config()
    d["dynamics"]["taus"] = [0.03]
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(d)


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(gs_config(typo_key=1))
    d = gs_config()
    d["rows"][0]["typo"] = 2
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(d)


def test_config_rejects_bad_values():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(gs_config(kind="nonsense"))
    d = gs_config()
    d["domain"] = {"lower": [0.0], "upper": [-1.0]}
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(d)
    d = evolve_config()
    d["dynamics"]["qs"] = [7]
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(d)
    d = gs_config(form="potential")
    d.pop("potential")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(d)


def test_reference_key_lookup():
    cfg = ExperimentConfig.from_dict(
        gs_config(reference_energy="harmonic_2d")
    )
    assert cfg.reference_energy == REFERENCE_ENERGIES["harmonic_2d"]["value"]
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(gs_config(reference_energy="no_such_ref"))


def test_reference_table_has_provenance():
    for key, entry in REFERENCE_ENERGIES.items():
        assert isinstance(entry["value"], float)
        assert "published reference computation" in entry["provenance"]


# ----------------------------------------------------------- reports


def test_csv_headers_are_stable():
    assert GROUNDSTATE_COLUMNS[:4] == ["H", "ell", "factor", "form"]
    assert "E_lod" in GROUNDSTATE_COLUMNS
    assert DYNAMICS_COLUMNS[:2] == ["tau", "q"]
    assert TIME_COLUMNS <= set(GROUNDSTATE_COLUMNS) | set(DYNAMICS_COLUMNS)


def test_rows_round_trip_through_csv():
    rows = [
        {"tau": 0.5, "q": 1, "rel_l2": 0.125, "rel_h1": None,
         "eoc_l2": None, "energy_drift": 1e-12, "mass_drift": 2e-6,
         "fp_iters_mean": 3.5, "t_online_s": 0.01},
        {"tau": 0.25, "q": 1, "rel_l2": "ERROR:FixedPointDivergence",
         "rel_h1": None, "eoc_l2": None, "energy_drift": None,
         "mass_drift": None, "fp_iters_mean": None, "t_online_s": 0.02},
    ]
    text = rows_to_csv(rows, DYNAMICS_COLUMNS)
    back = list(csv.DictReader(io.StringIO(text)))
    assert back[0]["tau"] == "0.5"
    assert float(back[0]["rel_l2"]) == 0.125
    assert back[0]["rel_h1"] == ""  # None prints empty
    assert back[1]["rel_l2"] == "ERROR:FixedPointDivergence"
    # floats survive a parse round trip exactly (repr formatting)
    assert float(back[0]["energy_drift"]) == 1e-12


def test_text_report_is_aligned():
    rows = [{"tau": 0.5, "q": 1, "rel_l2": 0.125}]
    txt = rows_to_text(rows, ["tau", "q", "rel_l2"])
    lines = txt.splitlines()
    assert lines[0].split() == ["tau", "q", "rel_l2"]
    assert lines[1].split() == ["0.5", "1", "0.125"]


def test_emit_report_writes_companions(tmp_path):
    cfg = ExperimentConfig.from_dict(
        gs_config(reference_energy="harmonic_2d")
    )
    rows = [{"H": 0.5, "ell": 4, "factor": 2, "form": "potential",
             "E_lod": 1.0}]
    out = tmp_path / "report.csv"
    csv_text = emit_report(rows, GROUNDSTATE_COLUMNS, out_csv=out, cfg=cfg,
                           text=True, manifest=True)
    assert out.read_text() == csv_text
    assert out.with_suffix(".txt").exists()
    manifest = json.loads(out.with_suffix(".manifest.json").read_text())
    assert manifest["columns"] == GROUNDSTATE_COLUMNS
    assert manifest["config"]["kind"] == "groundstate"
    assert "harmonic_2d" in manifest["references"]
    for col in TIME_COLUMNS:
        assert col in manifest["determinism"]
    with pytest.raises(ValueError):
        emit_report([], GROUNDSTATE_COLUMNS)


def test_eoc_helpers():
    taus = [0.4, 0.2, 0.1]
    errs = [1.6e-2, 4e-3, 1e-3]  # exactly second order
    eoc = pairwise_eoc(taus, errs)
    assert eoc[0] is None
    assert eoc[1] == pytest.approx(2.0, abs=1e-12)
    assert eoc[2] == pytest.approx(2.0, abs=1e-12)
    assert lsq_slope(taus, errs) == pytest.approx(2.0, abs=1e-12)


# ------------------------------------------------------- experiments


def test_groundstate_experiment_rows():
    cfg = ExperimentConfig.from_dict(gs_config())
    rows = run_groundstate_experiment(cfg)
    assert len(rows) == 1
    row = rows[0]
    assert isinstance(row["E_lod"], float)
    assert row["iters"] >= 1
    assert row["lambda"] > row["E_lod"]  # repulsive: lambda = E + extra
    assert row["t_online_s"] > 0.0
    assert row["err_vs_ref"] is None  # no reference configured


def test_groundstate_determinism_excluding_time_columns():
    cfg = ExperimentConfig.from_dict(gs_config())
    r1 = run_groundstate_experiment(cfg)[0]
    r2 = run_groundstate_experiment(cfg)[0]
    for col in GROUNDSTATE_COLUMNS:
        if col in TIME_COLUMNS:
            continue
        assert r1[col] == r2[col], col


def test_dynamics_experiment_rows_and_divergence_tag():
    d = evolve_config()
    d["dynamics"]["taus"] = [0.015625, 0.0625]  # second step diverges
    d["dynamics"]["fp_max"] = 40
    cfg = ExperimentConfig.from_dict(d)
    rows = run_dynamics_experiment(cfg)
    assert len(rows) == 2
    good, bad = rows
    assert 0.0 < good["rel_l2"] < 1.0
    assert good["energy_drift"] < 1e-9
    assert good["eoc_l2"] is None  # first row of the ladder
    assert bad["rel_l2"] == "ERROR:FixedPointDivergence"
    assert bad["energy_drift"] is None


def test_dynamics_eoc_chains_previous_row():
    d = evolve_config()
    d["dynamics"]["taus"] = [0.03125, 0.015625]
    cfg = ExperimentConfig.from_dict(d)
    rows = run_dynamics_experiment(cfg)
    assert rows[0]["eoc_l2"] is None
    # spatial error dominates here, so just check the chaining arithmetic
    expected = float(
        np.log(rows[0]["rel_l2"] / rows[1]["rel_l2"]) / np.log(2.0)
    )
    assert rows[1]["eoc_l2"] == pytest.approx(expected, rel=1e-12)


def test_space_cache_cold_warm_and_corrupt(tmp_path):
    d = gs_config(cache_dir=str(tmp_path))
    cfg = ExperimentConfig.from_dict(d)
    row = cfg.rows[0]
    space_cold, t_basis_cold, t_omega_cold = build_space_for_row(cfg, row)
    cached = list(tmp_path.glob("lod_*.npz"))
    assert len(cached) == 1
    space_warm, _, t_omega_warm = build_space_for_row(cfg, row)
    assert t_omega_warm == 0.0  # loaded, not assembled
    assert np.array_equal(space_cold.Phi.toarray(), space_warm.Phi.toarray())
    assert np.array_equal(space_cold.omega.V, space_warm.omega.V)

    e_cold = run_groundstate_experiment(cfg)[0]["E_lod"]
    e_warm = run_groundstate_experiment(cfg)[0]["E_lod"]
    assert abs(e_cold - e_warm) < 1e-13

    cached[0].write_bytes(b"not a numpy file")
    space_again, _, _ = build_space_for_row(cfg, row)
    assert np.array_equal(space_cold.omega.V, space_again.omega.V)
    assert cached[0].exists()  # rebuilt and re-saved


def test_trace_and_density_csv(tmp_path):
    cfg = ExperimentConfig.from_dict(evolve_config())
    space, _, _ = build_space_for_row(cfg, cfg.rows[0])
    from beclod.dynamics import integrate
    from beclod.groundstate import make_problem
    from beclod.bench import _initial_data

    prob = make_problem(space, cfg.beta, kinetic_factor=cfg.kinetic_factor)
    traj = integrate(prob, _initial_data(cfg, space.pair), T=cfg.T,
                     tau=cfg.taus[0], q=1)
    tpath = tmp_path / "trace.csv"
    write_trace_csv(tpath, traj)
    trace = list(csv.DictReader(open(tpath)))
    assert len(trace) == len(traj.times)
    assert float(trace[0]["t"]) == 0.0
    assert abs(float(trace[-1]["E_lod"]) - traj.energy_mod[-1]) == 0.0

    dpath = tmp_path / "density.csv"
    write_density_csv(dpath, space, traj.final)
    dens = list(csv.DictReader(open(dpath)))
    assert len(dens) == space.pair.fine.vertices.shape[0]
    assert set(dens[0]) == {"x0", "density"}
    assert all(float(r["density"]) >= 0.0 for r in dens)


# -------------------------------------------------------------- CLI


def test_cli_lodinfo_ok(tmp_path, capsys):
    rc = main([
        "lodinfo", "--domain=-4,4", "--H", "0.5", "--factor", "2",
        "--ell", "2",
    ])
    assert rc == EXIT_OK
    out = capsys.readouterr().out
    assert "space dimension" in out
    assert "tensor triples" in out


def test_cli_config_error_exit_code(tmp_path):
    bad_domain = gs_config()
    bad_domain["domain"] = {"lower": [0.0], "upper": [-1.0]}
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(bad_domain))
    rc = main(["groundstate", "--config", str(bad)])
    assert rc == EXIT_CONFIG
    rc = main(["groundstate", "--config", str(tmp_path / "missing.json")])
    assert rc == EXIT_CONFIG
    bad.write_text(json.dumps(gs_config(typo_key=1)))
    assert main(["groundstate", "--config", str(bad)]) == EXIT_CONFIG


def test_cli_groundstate_writes_csv(tmp_path):
    cfgp = tmp_path / "gs.json"
    cfgp.write_text(json.dumps(gs_config()))
    out = tmp_path / "gs.csv"
    rc = main(["groundstate", "--config", str(cfgp), "--out", str(out)])
    assert rc == EXIT_OK
    rows = list(csv.DictReader(open(out)))
    assert len(rows) == 1
    assert float(rows[0]["E_lod"]) > 0.0


def test_cli_flag_overrides_config(tmp_path, capsys):
    cfgp = tmp_path / "gs.json"
    cfgp.write_text(json.dumps(gs_config()))
    out = tmp_path / "gs.csv"
    rc = main([
        "groundstate", "--config", str(cfgp), "--H", "1.0",
        "--out", str(out),
    ])
    assert rc == EXIT_OK
    rows = list(csv.DictReader(open(out)))
    assert rows[0]["H"] == "1.0"


def test_cli_evolve_divergence_exit_code(tmp_path):
    d = evolve_config()
    d["dynamics"]["taus"] = [0.0625]
    d["dynamics"]["fp_max"] = 40
    cfgp = tmp_path / "ev.json"
    cfgp.write_text(json.dumps(d))
    rc = main(["evolve", "--config", str(cfgp),
               "--out", str(tmp_path / "ev.csv")])
    assert rc == EXIT_FP_DIVERGENCE


def test_cli_evolve_ok(tmp_path):
    cfgp = tmp_path / "ev.json"
    cfgp.write_text(json.dumps(evolve_config()))
    out = tmp_path / "ev.csv"
    rc = main(["evolve", "--config", str(cfgp), "--out", str(out)])
    assert rc == EXIT_OK
    rows = list(csv.DictReader(open(out)))
    assert rows[0]["q"] == "1"
    assert float(rows[0]["energy_drift"]) < 1e-9
