import csv
import json

import numpy as np
import pytest

from biphoton.cli import main


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_no_arguments_prints_usage(capsys):
    assert main([]) == 2
    assert "usage" in capsys.readouterr().err


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "reproduce" in capsys.readouterr().out


def test_unknown_subcommand_is_usage_error():
    assert main(["frobnicate"]) == 2


def test_missing_required_option():
    assert main(["spectrum"]) == 2


def test_bad_thread_count(tmp_path):
    assert main(["--threads", "0", "spectrum", "--out", str(tmp_path)]) == 2


def test_spectrum_writes_fwhm_column(tmp_path):
    assert main(["spectrum", "--out", str(tmp_path)]) == 0
    rows = read_rows(tmp_path / "summary.csv")
    assert len(rows) == 1
    fwhm = float(rows[0]["fwhm_mhz"])
    sidecar = json.loads((tmp_path / "spectrum.json").read_text())
    assert fwhm == pytest.approx(sidecar["summary"]["fwhm_mhz"], rel=1e-9)
    assert sidecar["config"]["od"] == 15.0
    spec = np.loadtxt(tmp_path / "spectrum.csv", delimiter=",", skiprows=1)
    assert spec.shape[1] == 3 and spec[:, 2].max() == pytest.approx(1.0)
    wave = np.loadtxt(tmp_path / "waveform.csv", delimiter=",", skiprows=1)
    assert wave[:, 0].min() >= -50 and wave[:, 0].max() <= 400


def test_spectrum_overrides_and_config(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"od": 30.0, "omega_c_gamma": 2.8, "pump_power_nw": 14.0}))
    assert main(["spectrum", "--config", str(cfg), "--omega-c-gamma", "4", "--out", str(tmp_path / "a")]) == 0
    doc = json.loads((tmp_path / "a" / "spectrum.json").read_text())
    assert doc["config"]["od"] == 30.0 and doc["config"]["omega_c_gamma"] == 4.0


@pytest.mark.parametrize("content", ["[1, 2]", "{not json", '{"bogus": 1}'])
def test_bad_config_reports_error(tmp_path, capsys, content):
    cfg = tmp_path / "bad.json"
    cfg.write_text(content)
    assert main(["spectrum", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert capsys.readouterr().err.startswith("error:")


def test_missing_config_file(tmp_path):
    assert main(["spectrum", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == 1


SOURCE = {
    "pair_rate": 2e5,
    "n_cycles": 2,
    "thermal": True,
    "channels": {"S": {"efficiency": 0.3, "base_rate": 3e4}, "AS": {"efficiency": 0.3, "base_rate": 3e4}},
    "schedule": {"windows_per_cycle": 2000},
    "delay_from_spectrum": {},
}


def generate(tmp_path, name, extra=()):
    cfg = tmp_path / "source.json"
    cfg.write_text(json.dumps(SOURCE))
    out = tmp_path / name
    assert main(["generate-tags", "--config", str(cfg), "--seed", "3", "--out", str(out), *extra]) == 0
    return out


def test_generate_tags_is_deterministic(tmp_path):
    a = generate(tmp_path, "a")
    b = generate(tmp_path, "b", ["--cycles", "2"])
    c = generate(tmp_path, "c")
    assert (a / "tags.csv").read_bytes() == (c / "tags.csv").read_bytes()
    assert (a / "source.json").read_bytes() == (c / "source.json").read_bytes()
    assert (a / "tags.csv").read_bytes() == (b / "tags.csv").read_bytes()


def test_generate_tags_threads_do_not_change_output(tmp_path):
    a = generate(tmp_path, "a")
    cfg = tmp_path / "source.json"
    out = tmp_path / "t"
    assert main(["--threads", "2", "generate-tags", "--config", str(cfg), "--seed", "3", "--out", str(out)]) == 0
    assert (a / "tags.csv").read_bytes() == (out / "tags.csv").read_bytes()


def test_generate_tags_rejects_two_delays(tmp_path):
    cfg = tmp_path / "s.json"
    cfg.write_text(json.dumps({"delay": {"tau": [0.0], "prob": [1.0]}, "delay_from_spectrum": {}}))
    assert main(["generate-tags", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1


def test_analyze_round_trip(tmp_path):
    src = generate(tmp_path, "g")
    out = tmp_path / "an"
    args = ["analyze", "--tags", str(src / "tags.csv"), "--source", str(src / "source.json"),
            "--bandwidth-mhz", "10.9", "--out", str(out)]
    assert main(args) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["cross_peak"]["g2"] > 5
    assert 0 < report["cross_peak"]["delay_ps"] < 60_000
    assert report["rates"]["gsb"] > 0
    assert report["heralded"]["heralded"] > 0
    for name in ("cross.csv", "auto_S.csv", "auto_AS.csv", "heralded.csv"):
        assert (out / name).exists()
    first = (out / "report.json").read_bytes()
    assert main(args) == 0
    assert (out / "report.json").read_bytes() == first


def test_analyze_rejects_malformed_tags(tmp_path):
    tags = tmp_path / "t.csv"
    tags.write_text("a,b,c\n1,2,3\n")
    assert main(["analyze", "--tags", str(tags), "--out", str(tmp_path / "o")]) == 1


def test_fit_noise_recovers_alpha(tmp_path):
    from biphoton.noise_model import NoiseModelParams, g2_vs_gsb

    params = NoiseModelParams(alpha=80.0)
    gsb = np.array([300.0, 1e3, 3e3, 1e4])
    power = gsb / 1e3  # nW
    g2 = g2_vs_gsb(gsb, params, power=power * 1e-9)
    data = tmp_path / "d.csv"
    np.savetxt(data, np.column_stack([gsb, g2, power]), delimiter=",", header="gsb,g2,power_nw", comments="")
    assert main(["fit-noise", "--data", str(data), "--out", str(tmp_path / "f")]) == 0
    fit = json.loads((tmp_path / "f" / "fit.json").read_text())
    assert fit["alpha"] == pytest.approx(80.0, rel=1e-4)
    assert fit["n_points"] == 4


def test_fit_noise_missing_column(tmp_path):
    data = tmp_path / "d.csv"
    data.write_text("gsb,g2\n1,2\n3,4\n")
    assert main(["fit-noise", "--data", str(data), "--out", str(tmp_path / "f")]) == 1


def test_reproduce_fig4c_small(tmp_path):
    out = tmp_path / "r"
    assert main(["reproduce", "fig4c", "--cycles", "5", "--out", str(out)]) == 0
    rows = read_rows(out / "fig4c_table.csv")
    assert [float(r["pair_rate"]) for r in rows] == [3e4, 2e5, 1e6]
    gsb = [float(r["gsb"]) for r in rows]
    assert gsb == sorted(gsb)
    model = [float(r["model_g2"]) for r in rows]
    assert all(m > 1 for m in model)
    first = (out / "fig4c.json").read_bytes()
    assert main(["reproduce", "fig4c", "--cycles", "5", "--out", str(out)]) == 0
    assert (out / "fig4c.json").read_bytes() == first


def test_reproduce_fig3_writes_heralded(tmp_path):
    out = tmp_path / "r"
    assert main(["reproduce", "fig3", "--cycles", "5", "--out", str(out)]) == 0
    table = np.loadtxt(out / "fig3_heralded.csv", delimiter=",", skiprows=1)
    assert 0 in table[:, 0]
    row = read_rows(out / "fig3_table.csv")[0]
    assert float(row["pair_rate"]) == 1e6 and float(row["noise_rate"]) == 3e4


def test_simulate_zeeman_small(tmp_path):
    cfg = tmp_path / "z.json"
    cfg.write_text(json.dumps({"z_nodes": 5, "duration": 2.0}))
    out = tmp_path / "z"
    assert main(["simulate-zeeman", "--config", str(cfg), "--trajectories", "2", "--seed", "1", "--out", str(out)]) == 0
    doc = json.loads((out / "summary.json").read_text())
    assert doc["config"]["trajectories"] == 2 and doc["summary"]["trajectories"] == 2
    data = np.loadtxt(out / "trajectory_000.csv", delimiter=",", skiprows=1)
    assert data.shape[1] == 17
    assert np.all(np.diff(data[:, 0]) > 0)
    first = (out / "trajectory_001.csv").read_bytes()
    assert main(["simulate-zeeman", "--config", str(cfg), "--trajectories", "2", "--seed", "1", "--out", str(out)]) == 0
    assert (out / "trajectory_001.csv").read_bytes() == first
