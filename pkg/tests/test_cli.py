import csv
import io
import json

import numpy as np
import pytest

from openkpz import acceptance as acc
from openkpz import cli
from openkpz import wedge_lab as wl
from openkpz.errors import InputError
from openkpz.grid_paths import RngStream, load_jsonl
from openkpz.orchestrator import SEED_ENV, build_config
from openkpz.sigma_variance import fit_scaling


def _run(capsys, argv):
    code = cli.main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def _rows(text):
    return list(csv.DictReader(io.StringIO(text)))


SIGMA = ["sigma", "--L", "4", "--u", "0", "--v", "0", "--n", "1000", "--seed", "7"]


def test_sigma_twice_is_byte_identical(capsys):
    c1, o1, _ = _run(capsys, SIGMA)
    c2, o2, _ = _run(capsys, SIGMA)
    assert c1 == c2 == 0
    assert o1 == o2
    row = _rows(o1)[0]
    assert set(row) == {"L", "u", "v", "n", "mean", "stderr"}
    assert float(row["stderr"]) > 0


def test_worker_count_does_not_change_output(capsys):
    _, o1, _ = _run(capsys, SIGMA + ["--n-workers", "1"])
    _, o4, _ = _run(capsys, SIGMA + ["--n-workers", "4"])
    assert o1 == o4


def test_stdout_run_echoes_seed_and_config_on_stderr(capsys):
    _, _, err = _run(capsys, SIGMA)
    line = [ln for ln in err.splitlines() if ln.startswith("openkpz: meta ")][0]
    meta = json.loads(line[len("openkpz: meta "):])
    assert meta["config"]["seed"] == 7
    assert meta["config"]["params"]["L"] == 4.0
    assert "Philox" in meta["provenance"]["rng"]


def test_missing_required_field_exits_2_naming_it(capsys):
    code, out, err = _run(capsys, ["sigma", "--u", "0", "--v", "0", "--n", "10"])
    assert code == 2
    assert "--L" in err
    assert out == ""


def test_build_config_reports_every_missing_field():
    with pytest.raises(InputError, match="--L"):
        build_config("sigma", {"u": "0", "v": "0"})


def test_unknown_kind_is_rejected(capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["nonsense"])
    assert e.value.code == 2
    with pytest.raises(InputError):
        build_config("nonsense", {})


@pytest.mark.parametrize("argv", [
    ["sigma", "--L", "-1", "--u", "0", "--v", "0", "--n", "10"],
    ["sigma", "--L", "abc", "--u", "0", "--v", "0", "--n", "10"],
    ["kernel", "--L", "2", "--u", "0", "--v", "0", "--t", "-1", "--x", "0", "--y", "0"],
    ["report", "--dir", "/nonexistent/dir"],
    ["wedge", "survival", "--q", "1"],
])
def test_bad_inputs_exit_2(capsys, argv):
    code, _, err = _run(capsys, argv)
    assert code == 2
    assert "input error" in err


def test_clipped_she_exits_3(capsys):
    with pytest.warns(UserWarning, match="clip fraction"):
        code, _, err = _run(capsys, ["she", "--L", "1", "--u", "0", "--v", "0", "--t", "5", "--dt", "0.5",
                                     "--replicas", "20", "--seed", "1"])
    assert code == 3
    assert "numerical error" in err


def test_config_file_and_flag_override(tmp_path, capsys):
    ini = tmp_path / "run.ini"
    ini.write_text("[common]\nseed = 7\n\n[sigma]\nL = 4\nu = 0\nv = 0\nn = 50\n")
    _, o_file, _ = _run(capsys, ["sigma", "--config", str(ini), "--n", "1000"])
    _, o_flags, _ = _run(capsys, SIGMA)
    assert o_file == o_flags
    cfg = build_config("sigma", {"n": "20"}, str(ini))
    assert cfg.params["n"] == 20 and cfg.params["L"] == 4.0 and cfg.seed == 7


def test_bad_config_file_exits_2(tmp_path, capsys):
    ini = tmp_path / "bad.ini"
    ini.write_text("[sigma]\nL = 4\nbogus_key = 1\n")
    code, _, err = _run(capsys, ["sigma", "--config", str(ini), "--u", "0", "--v", "0", "--n", "100"])
    assert code == 2
    assert "bogus_key" in err
    code, _, _ = _run(capsys, ["sigma", "--config", str(tmp_path / "missing.ini")])
    assert code == 2


def test_seed_defaults_to_environment(monkeypatch, capsys):
    monkeypatch.setenv(SEED_ENV, "7")
    _, o_env, _ = _run(capsys, [a for a in SIGMA if a not in ("--seed", "7")])
    monkeypatch.delenv(SEED_ENV)
    _, o_flag, _ = _run(capsys, SIGMA)
    assert o_env == o_flag
    monkeypatch.setenv(SEED_ENV, "not-a-number")
    code, _, _ = _run(capsys, [a for a in SIGMA if a not in ("--seed", "7")])
    assert code == 2


def test_meta_sidecar_has_seed_config_and_provenance(tmp_path, capsys):
    out = tmp_path / "s.csv"
    code, stdout, _ = _run(capsys, SIGMA + ["--out", str(out)])
    assert code == 0 and stdout == ""
    meta = json.loads((tmp_path / "s.csv.meta.json").read_text())
    assert meta["config"]["seed"] == 7
    assert meta["config"]["kind"] == "sigma"
    assert meta["config"]["params"]["n"] == 1000
    for k in ("git_describe", "timestamp", "wall_time_s", "rng"):
        assert k in meta["provenance"]


def test_report_matches_in_process_fit(tmp_path, capsys):
    Ls = [2.0, 4.0, 16.0]
    d = tmp_path / "runs"
    d.mkdir()
    for i, L in enumerate(Ls):
        code, _, _ = _run(capsys, ["sigma", "--L", str(L), "--u", "0", "--v", "0", "--n", "300", "--seed", "11",
                                   "--substream", str(i), "--out", str(d / f"L{i}.csv")])
        assert code == 0
    code, out, _ = _run(capsys, ["report", "--dir", str(d)])
    assert code == 0
    rep = json.loads(out)
    fit = fit_scaling(Ls, 0.0, 0.0, 300, RngStream(11), None, 0.05)
    assert rep["slope"] == pytest.approx(fit.slope, abs=1e-12)
    assert rep["intercept"] == pytest.approx(fit.intercept, abs=1e-12)


def test_kernel_command_is_exact(tmp_path, capsys):
    from openkpz.robin_heat import RobinSpec, find_eigenvalues, kernel, modes_needed

    bj = tmp_path / "basis.json"
    code, out, _ = _run(capsys, ["kernel", "--L", "3", "--u", "0.5", "--v", "0.5", "--t", "0.2", "--x", "1",
                                 "--y", "1.5", "--basis-json", str(bj)])
    assert code == 0
    row = _rows(out)[0]
    assert row["stderr"] == "exact"
    spec = RobinSpec.from_uv(3.0, 0.5, 0.5)
    ref = kernel(find_eigenvalues(spec, modes_needed(spec, 0.2)), 0.2, 1.0, 1.5)
    assert float(row["kernel"]) == pytest.approx(ref, rel=1e-14)
    basis = json.loads(bj.read_text())
    assert len(basis["modes"]) == int(row["n_modes"])


def test_wedge_kernel_command(capsys):
    code, out, _ = _run(capsys, ["wedge", "kernel", "--q", "1", "--t", "0.5", "--start", "0.1,0", "--end", "0.3,0.1"])
    assert code == 0
    row = _rows(out)[0]
    assert row["stderr"] == "exact"
    ref = wl.killed_kernel_bessel(wl.WedgeConfig(1.0), 0.5, [0.1, 0.0], [0.3, 0.1])
    assert float(row["kernel"]) == pytest.approx(ref, rel=1e-14)
    assert 0 < float(row["kernel"]) <= float(row["free_kernel"])


def test_wedge_survival_sweep(capsys):
    code, out, _ = _run(capsys, ["wedge", "survival", "--q", "1", "--Ls", "16,32,64"])
    assert code == 0
    rows = _rows(out)
    assert [float(r["L"]) for r in rows] == [16.0, 32.0, 64.0]
    p = [float(r["p"]) for r in rows]
    assert p[0] > p[1] > p[2] > 0
    assert all(r["stderr"] == "exact" for r in rows)


def test_wedge_hit_tail_rows_carry_stderr(capsys):
    code, out, _ = _run(capsys, ["wedge", "hit-tail", "--q", "1", "--b", "1", "--n-paths", "400", "--seed", "3"])
    assert code == 0
    rows = _rows(out)
    assert rows and all("stderr" in r for r in rows)


def test_sample_jsonl_roundtrip(tmp_path, capsys):
    out = tmp_path / "s.jsonl"
    code, _, _ = _run(capsys, ["sample", "--L", "2", "--u", "0.5", "--v", "0.5", "--n-samples", "3", "--seed", "5",
                               "--out", str(out)])
    assert code == 0
    with open(out, encoding="utf-8") as fh:
        header, paths = load_jsonl(fh)
    assert header["seed"] == 5 and header["layers"][0] == "lambda"
    assert len(paths) == 3 * len(header["layers"])
    assert all(p.values[0] == 0.0 for p in paths[:3])
    assert all(np.all(np.isfinite(p.values)) for p in paths)


def test_gram_check_detects_sign_tampering():
    ok, _ = acc.gram_check()
    assert ok
    bad, detail = acc.gram_check(v1=-wl.V1)
    assert not bad, detail
    bad, _ = acc.gram_check(v2=np.array([wl.V2[0], -wl.V2[1]]))
    assert not bad


def test_full_tier_lists_every_criterion_once():
    assert list(acc.FULL) == [f"A{i}" for i in range(1, 14)]
    with pytest.raises(InputError):
        acc.acceptance_suite("bogus", 0)
    with pytest.raises(InputError):
        acc.acceptance_suite("full", 0, only=["A99"])


def test_quick_tier_passes_under_check(capsys):
    code, out, err = _run(capsys, ["acceptance", "--tier", "quick", "--check"])
    rows = _rows(out)
    assert code == 0, err
    assert [r["id"] for r in rows] == list(acc.QUICK)
    assert all(r["passed"] == "true" for r in rows)


def test_check_flag_exits_4_on_failure(monkeypatch, capsys):
    monkeypatch.setitem(acc.QUICK, "QX", lambda seed, map_fn=map: (False, 0.0, "forced failure"))
    code, out, _ = _run(capsys, ["acceptance", "--tier", "quick", "--only", "QX", "--check"])
    assert code == 4
    assert _rows(out)[0]["passed"] == "false"
    code, _, _ = _run(capsys, ["acceptance", "--tier", "quick", "--only", "QX"])
    assert code == 0


def test_hit_tail_table_survives_a_failed_fit(capsys):
    code, out, err = _run(capsys, ["wedge", "hit-tail", "--q", "1", "--b", "1", "--n-paths", "20", "--seed", "3",
                                   "--r-min", "1e4", "--r-max", "1e5"])
    assert code == 0
    assert _rows(out)
    meta = json.loads([ln for ln in err.splitlines() if ln.startswith("openkpz: meta ")][0][len("openkpz: meta "):])
    assert "error" in meta["fit"]
