import json

import numpy as np
import pandas as pd
import pytest

from main import HIST_BINS, build_config, exactness_frame, main, parse_args
from utils import Settings, manifest_path, scaled_exactness, thinning_stride


@pytest.fixture(autouse=True)
def isolated_env(tmp_path, monkeypatch):
    # .env 와 출력 디렉터리를 테스트 디렉터리로 격리
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv("BETS_OUTPUT_DIR", str(tmp_path))
    monkeypatch.setenv("BETS_HIDDEN", "4")
    return tmp_path


def write_config(path, values):
    path.write_text(json.dumps(values))
    return str(path)


def test_scaled_exactness_and_stride():
    assert np.isnan(scaled_exactness(0.3, 1))
    assert scaled_exactness(0.5, 100) == pytest.approx(0.25 * np.sqrt(100 / np.log(100)))
    assert thinning_stride(10000, 2000) == 5
    assert thinning_stride(10, 2000) == 1


def test_config_precedence(tmp_path):
    cfg_path = write_config(tmp_path / "cfg.json", {"seed": 5, "T": 300, "eta": 0.2})
    args = parse_args(["run-exactness", "--config", cfg_path, "--T", "40"])
    cfg = build_config(args, Settings(eta=0.05, output_dir=str(tmp_path)))
    assert (cfg.seed, cfg.T, cfg.eta) == (5, 40, 0.2)
    assert cfg.out == str(tmp_path / "run-exactness.csv")
    audit = build_config(parse_args(["run-audit", "--seed", "1"]), Settings(output_dir=str(tmp_path)))
    assert audit.out.endswith("run-audit.json")


def test_exactness_smoke(tmp_path, capsys):
    out = tmp_path / "exact.csv"
    assert main(["run-exactness", "--seed", "3", "--T", "2", "--out", str(out)]) == 0
    assert capsys.readouterr().out.strip() == str(out)
    lines = out.read_text().splitlines()
    assert len(lines) == 3
    assert lines[0] == "t,cum_payout,avg_payout,avg_payout_sq_scaled,c_t,lambda_t,mu_t,mu_star_t,b_t"
    manifest = json.loads(manifest_path(str(out)).read_text())
    assert manifest["seed"] == 3 and manifest["rng_algorithm"] == "PCG64"
    assert manifest["config"]["T"] == 2 and manifest["rounds"] == 2


def test_same_seed_same_bytes(tmp_path):
    first, second = tmp_path / "a.csv", tmp_path / "b.csv"
    for out in (first, second):
        assert main(["run-exactness", "--seed", "11", "--T", "60", "--stride", "7", "--out", str(out)]) == 0
    assert first.read_bytes() == second.read_bytes()
    frame = pd.read_csv(first)
    assert frame["t"].tolist() == [7, 14, 21, 28, 35, 42, 49, 56, 60]


def test_unknown_config_key_fails(tmp_path, capsys):
    cfg = write_config(tmp_path / "bad.json", {"seed": 1, "horizon": 10})
    assert main(["run-exactness", "--config", cfg]) == 2
    err = capsys.readouterr().err
    assert err.startswith("error: ConfigError")
    assert "horizon" in err


def test_missing_seed_fails(capsys):
    assert main(["run-exactness", "--T", "5"]) == 2
    assert "seed" in capsys.readouterr().err


def test_monotone_needs_nonnegative_agents(capsys):
    assert main(["run-exactness", "--seed", "1", "--T", "5", "--mode", "monotone"]) == 2
    assert "mode" in capsys.readouterr().err


def test_exactness_frame_columns():
    log = pd.DataFrame({"t": [1, 2, 3], "cum_payout": [0.5, 0.2, 0.3], "c_t": 0.0, "lambda_t": 0.0,
                        "mu_t": 0.5, "mu_star_t": 0.5, "b_t": 1.0})
    frame = exactness_frame(log, 2)
    assert frame["t"].tolist() == [2, 3]
    assert frame["avg_payout"].tolist() == pytest.approx([0.1, 0.1])
    assert exactness_frame(log.iloc[0:0], 2).empty


def test_audit_two_point(tmp_path):
    cfg = write_config(tmp_path / "audit.json", {
        "seed": 1,
        "audit": {
            "distribution": [
                {"id": "x1", "weight": 0.5, "mu_star": 0.4, "mu": 0.5},
                {"id": "x2", "weight": 0.5, "mu_star": 0.6, "mu": 0.5},
            ],
            "subsets": {"first": ["x1"]},
            "bins": 4,
        },
    })
    out = tmp_path / "audit-report.json"
    assert main(["run-audit", "--config", cfg, "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert report["gaps"]["standard"] == pytest.approx(0.0, abs=1e-12)
    assert report["gaps"]["pointwise"] == pytest.approx(0.1)
    assert report["multicalibration"]["multicalibrated"] is False
    assert report["binned"]["bins"] == 4


def test_audit_from_sample_csv(tmp_path):
    sample = tmp_path / "sample.csv"
    sample.write_text("id,y,mu\n1,1,0.5\n2,0,0.5\n1,1,0.5\n")
    cfg = write_config(tmp_path / "audit.json", {"seed": 1, "audit": {"sample": str(sample), "subsets": {"one": [1]}}})
    out = tmp_path / "sample-report.json"
    assert main(["run-audit", "--config", cfg, "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert report["mce"] == pytest.approx(1 / 6)
    assert report["multicalibration"]["gaps"]["one"] == pytest.approx(2 / 3 * 0.5)


def test_audit_without_input_fails(capsys):
    assert main(["run-audit", "--seed", "1"]) == 2
    assert "audit" in capsys.readouterr().err


def test_histogram_bins(tmp_path):
    out = tmp_path / "hist.csv"
    assert main(["run-histogram", "--seed", "2", "--T", "40", "--out", str(out)]) == 0
    frame = pd.read_csv(out)
    assert list(frame.columns) == ["bin_left", "bin_right", "count"]
    assert len(frame) == HIST_BINS
    assert frame["bin_left"].iloc[0] == -0.5 and frame["bin_right"].iloc[-1] == 1.5
    manifest = json.loads(manifest_path(str(out)).read_text())
    assert frame["count"].sum() + manifest["below_range"] + manifest["above_range"] == 20


def test_market_without_cautious_passengers(tmp_path):
    cfg = write_config(tmp_path / "market.json", {
        "seed": 4, "market": {"cautious_fracs": [0.0], "mechanisms": ["on", "off"], "n_flights": 6},
    })
    out = tmp_path / "market.csv"
    assert main(["run-market", "--config", cfg, "--out", str(out)]) == 0
    frame = pd.read_csv(out)
    on = frame[frame["mechanism"] == "on"].drop(columns="mechanism").reset_index(drop=True)
    off = frame[frame["mechanism"] == "off"].drop(columns="mechanism").reset_index(drop=True)
    assert len(on) == 6
    pd.testing.assert_frame_equal(on, off)


def test_ablation_quantile_columns(tmp_path):
    cfg = write_config(tmp_path / "ablation.json", {
        "seed": 9, "T": 20, "stride": 10,
        "ablation": {"selectors": ["swap", "none"], "seeds": 2, "families": ["one-sided"]},
    })
    out = tmp_path / "ablation.csv"
    assert main(["run-ablation", "--config", cfg, "--out", str(out)]) == 0
    frame = pd.read_csv(out)
    assert list(frame.columns) == ["selector", "t", "q10", "q25", "q50", "q75", "q90"]
    assert sorted(frame["selector"].unique()) == ["none", "swap"]
    assert sorted(frame["t"].unique()) == [10, 20]
    assert (frame["q10"] <= frame["q90"]).all()


def test_loss_gap_bounds_in_strict_mode(tmp_path):
    out = tmp_path / "gap.csv"
    assert main(["run-loss-gap", "--seed", "6", "--T", "50", "--mode", "strict", "--out", str(out)]) == 0
    frame = pd.read_csv(out)
    assert list(frame.columns) == ["t", "L_forecast", "L_true", "L_with_payment", "L_min", "L_max"]
    assert len(frame) == 50
    assert (frame["L_with_payment"] >= frame["L_min"] - 1e-8).all()
    assert (frame["L_with_payment"] <= frame["L_max"] + 1e-8).all()


def test_loss_gap_needs_known_probabilities(tmp_path, capsys):
    data = tmp_path / "flights.csv"
    data.write_text("origin,late\nICN,1\nGMP,0\nICN,0\n")
    cfg = write_config(tmp_path / "gap.json", {
        "seed": 1, "T": 3, "stream": {"kind": "csv", "path": str(data), "features": ["origin"], "outcome": "late"},
    })
    assert main(["run-loss-gap", "--config", cfg]) == 2
    assert "error: ConfigError" in capsys.readouterr().err


def test_audit_creates_nested_output_dir(tmp_path):
    cfg = write_config(tmp_path / "audit.json", {
        "seed": 1,
        "audit": {"distribution": [{"id": "x1", "weight": 1.0, "mu_star": 0.4, "mu": 0.5}]},
    })
    out = tmp_path / "nested" / "dir" / "r.json"
    assert main(["run-audit", "--config", cfg, "--out", str(out)]) == 0
    assert json.loads(out.read_text())["gaps"]["standard"] == pytest.approx(0.1)
    assert manifest_path(str(out)).exists()


def test_market_manifest_reports_unquotable_share(tmp_path):
    cfg = write_config(tmp_path / "market.json", {
        "seed": 2, "market": {"cautious_fracs": [0.5], "mechanisms": ["on", "off"], "n_flights": 5},
    })
    out = tmp_path / "market.csv"
    assert main(["run-market", "--config", cfg, "--out", str(out)]) == 0
    manifest = json.loads(manifest_path(str(out)).read_text())
    assert manifest["series"] == 2
    assert len(manifest["unquotable"]) == 1
    entry = manifest["unquotable"][0]
    assert entry["selector"] == "swap" and entry["cautious_frac"] == 0.5
    assert 0.0 <= entry["unquotable_share"] <= 1.0


def test_ablation_separation_config(tmp_path):
    # 학습하지 않는 기반 예측기 + 고정 스테이크 에이전트 + 뒤집히는 mu*
    cfg = write_config(tmp_path / "separation.json", {
        "seed": 3, "T": 3000, "stride": 1000, "eta": 0.0, "init": "zeros",
        "stream": {"kind": "adversarial-flip", "d": 4, "period": 10},
        "agents": {"weights": {"constant": 1.0}, "options": {"constant": {"b": 1.0}}},
        "ablation": {"selectors": ["swap", "none"], "seeds": 3, "families": ["random"]},
    })
    out = tmp_path / "separation.csv"
    assert main(["run-ablation", "--config", cfg, "--out", str(out)]) == 0
    frame = pd.read_csv(out)
    final = frame[frame["t"] == 3000].set_index("selector")
    assert abs(final.loc["swap", "q50"]) <= 0.05
    assert final.loc["none", "q50"] >= 0.10
