import argparse
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field, fields
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from agents import AgentMix
from core import BetsError, ConfigError, expected_loss, loss_bounds, payment_guarantee
from forecaster import SELECTORS, ExactForecaster, run_protocol
from market import MarketSimulation
from offline import audit_report, sample_from_csv, table_from_records
from streams import DecisionTaskSpec, make_stream
from utils import (load_settings, make_rng, scaled_exactness, setup_logging, thinning_stride,
                   write_csv, write_manifest, write_report)

logger = logging.getLogger(__name__)

MODES = ("exactness", "strict", "monotone")
STREAM_KINDS = ("iid-logistic", "drift", "digit-latent", "adversarial-flip", "route", "csv")
TASK_FAMILIES = ("random", "one-sided", "different-stakes")
EXACTNESS_COLUMNS = ["t", "cum_payout", "avg_payout", "avg_payout_sq_scaled",
                     "c_t", "lambda_t", "mu_t", "mu_star_t", "b_t"]
# c_t 히스토그램: [-0.5, 1.5] 를 50 등분
HIST_BINS = 50
HIST_RANGE = (-0.5, 1.5)
MEDIAN_C_SOFT_LIMIT = 0.2
QUANTILES = (0.10, 0.25, 0.50, 0.75, 0.90)

MARKET_DEFAULTS = {"cautious_fracs": [0.25, 0.5, 0.75], "mechanisms": ["on", "off"],
                   "n_flights": 500, "selectors": None}
ABLATION_DEFAULTS = {"selectors": ["swap", "none", "standard", "naive-br"], "seeds": 3,
                     "families": list(TASK_FAMILIES)}
AUDIT_DEFAULTS = {"M": 1.0, "c0": 0.0, "bins": None, "subsets": None}


@dataclass
class ExperimentConfig:
    """
    실험 한 번의 전체 설정 (매니페스트에 그대로 기록됨)
    - 우선순위: 명령행 플래그 > 설정 파일 > 환경 변수 > 기본값
    """
    subcommand: str
    seed: Optional[int] = None
    out: Optional[str] = None
    stream: Dict[str, Any] = field(default_factory=dict)
    task: Dict[str, Any] = field(default_factory=lambda: {"family": "random"})
    agents: Dict[str, Any] = field(default_factory=lambda: {"weights": {"honest": 1.0}})
    selector: str = "swap"
    T: int = 10000
    K: Optional[int] = None
    eta: float = 0.01
    mode: str = "exactness"
    arch: str = "mlp"
    hidden: int = 32
    init: str = "uniform"
    stride: Optional[int] = None
    max_rows: int = 2000
    market: Dict[str, Any] = field(default_factory=dict)
    ablation: Dict[str, Any] = field(default_factory=dict)
    audit: Dict[str, Any] = field(default_factory=dict)


def _is_int(value) -> bool:
    return isinstance(value, (int, np.integer)) and not isinstance(value, bool)


def validate_config(cfg: ExperimentConfig) -> ExperimentConfig:
    """필드별 검증 (오류 메시지에 필드 이름 포함)"""
    if cfg.subcommand not in RUNNERS:
        raise ConfigError("subcommand", f"unknown subcommand {cfg.subcommand!r}")
    if cfg.seed is None:
        raise ConfigError("seed", "seed is mandatory")
    if not _is_int(cfg.seed) or not 0 <= cfg.seed < 2 ** 64:
        raise ConfigError("seed", f"must be an unsigned 64-bit integer, got {cfg.seed!r}")
    if not _is_int(cfg.T) or cfg.T < 2:
        raise ConfigError("T", f"must be an integer >= 2, got {cfg.T!r}")
    if cfg.K is not None and (not _is_int(cfg.K) or cfg.K < 1):
        raise ConfigError("K", f"must be a positive integer, got {cfg.K!r}")
    if not isinstance(cfg.eta, (int, float)) or not math.isfinite(cfg.eta) or cfg.eta < 0:
        raise ConfigError("eta", f"must be a finite nonnegative number, got {cfg.eta!r}")
    if cfg.selector not in SELECTORS:
        raise ConfigError("selector", f"must be one of {sorted(SELECTORS)}, got {cfg.selector!r}")
    if cfg.mode not in MODES:
        raise ConfigError("mode", f"must be one of {list(MODES)}, got {cfg.mode!r}")
    if cfg.arch not in ("linear", "mlp"):
        raise ConfigError("arch", f"must be 'linear' or 'mlp', got {cfg.arch!r}")
    if not _is_int(cfg.hidden) or cfg.hidden < 1:
        raise ConfigError("hidden", f"must be a positive integer, got {cfg.hidden!r}")
    if cfg.init not in ("uniform", "zeros"):
        raise ConfigError("init", f"must be 'uniform' or 'zeros', got {cfg.init!r}")
    if cfg.stride is not None and (not _is_int(cfg.stride) or cfg.stride < 1):
        raise ConfigError("stride", f"must be a positive integer, got {cfg.stride!r}")
    if not _is_int(cfg.max_rows) or cfg.max_rows < 1:
        raise ConfigError("max_rows", f"must be a positive integer, got {cfg.max_rows!r}")
    kind = cfg.stream.get("kind")
    if kind is not None and kind not in STREAM_KINDS:
        raise ConfigError("stream", f"unknown stream kind {kind!r}")
    if cfg.task.get("family", "random") not in TASK_FAMILIES:
        raise ConfigError("task", f"unknown task family {cfg.task.get('family')!r}")
    if not isinstance(cfg.agents.get("weights"), dict):
        raise ConfigError("agents", "needs a 'weights' mapping of policy name to weight")

    market = {**MARKET_DEFAULTS, **cfg.market}
    if any(not 0.0 <= float(f) <= 1.0 for f in market["cautious_fracs"]):
        raise ConfigError("market", "cautious fractions must lie in [0,1]")
    if not set(market["mechanisms"]) <= {"on", "off"} or not market["mechanisms"]:
        raise ConfigError("market", "mechanisms must be a nonempty subset of ['on', 'off']")
    if not _is_int(market["n_flights"]) or market["n_flights"] < 1:
        raise ConfigError("market", "n_flights must be a positive integer")
    if any(s not in SELECTORS for s in (market["selectors"] or [])):
        raise ConfigError("market", f"selectors must be drawn from {sorted(SELECTORS)}")

    ablation = {**ABLATION_DEFAULTS, **cfg.ablation}
    if any(s not in SELECTORS for s in ablation["selectors"]) or not ablation["selectors"]:
        raise ConfigError("ablation", f"selectors must be drawn from {sorted(SELECTORS)}")
    if any(f not in TASK_FAMILIES for f in ablation["families"]) or not ablation["families"]:
        raise ConfigError("ablation", f"families must be drawn from {list(TASK_FAMILIES)}")
    if not _is_int(ablation["seeds"]) or ablation["seeds"] < 1:
        raise ConfigError("ablation", "seeds must be a positive integer")
    return cfg


def _read_config_file(path: str) -> Dict[str, Any]:
    try:
        with open(path, encoding="utf-8") as f:
            values = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(values, dict):
        raise ConfigError("config", f"{path} must hold a JSON object")
    known = {f.name for f in fields(ExperimentConfig)}
    for key in values:
        if key not in known:
            raise ConfigError(key, "unknown config key")
    return values


def build_config(args: argparse.Namespace, settings=None) -> ExperimentConfig:
    """환경 변수 -> 설정 파일 -> 플래그 순서로 덮어써 ExperimentConfig 생성"""
    settings = settings or load_settings()
    values: Dict[str, Any] = {
        "eta": settings.eta, "hidden": settings.hidden, "max_rows": settings.stride_rows,
    }
    if args.config:
        values.update(_read_config_file(args.config))
    values["subcommand"] = args.subcommand
    for name in ("seed", "out", "selector", "T", "eta", "mode", "K", "stride"):
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    cfg = validate_config(ExperimentConfig(**values))
    if cfg.out is None:
        suffix = ".json" if cfg.subcommand == "run-audit" else ".csv"
        cfg.out = os.path.join(settings.output_dir, cfg.subcommand + suffix)
    return cfg


def _child_seeds(seed: int, n: int) -> List[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n)]


def _stride(cfg: ExperimentConfig, T: int) -> int:
    return cfg.stride if cfg.stride is not None else thinning_stride(T, cfg.max_rows)


def _thin(frame: pd.DataFrame, stride: int) -> pd.DataFrame:
    if frame.empty:
        return frame
    keep = (frame["t"] % stride == 0) | (frame["t"] == frame["t"].iloc[-1])
    return frame.loc[keep].reset_index(drop=True)


def _build_stream(cfg: ExperimentConfig, seed: int, default_kind: str, horizon: int):
    options = dict(cfg.stream)
    kind = options.pop("kind", default_kind)
    d = int(options.pop("d", 8))
    return make_stream(kind, horizon, seed, d=d, **options)


def _build_protocol(cfg: ExperimentConfig, seed: int, selector: Optional[str] = None,
                    family: Optional[str] = None):
    """
    하나의 시드에서 스트림, 과제, 에이전트, 예측자, 에이전트 선택용 생성기를 만든다
    - 네 구성 요소는 SeedSequence 로 분리된 서로 다른 시드를 사용
    """
    stream_seed, task_seed, fc_seed, agent_seed = _child_seeds(seed, 4)
    stream = _build_stream(cfg, stream_seed, "drift", cfg.T)
    tasks = DecisionTaskSpec(family or cfg.task.get("family", "random"), seed=task_seed,
                             n_actions=int(cfg.task.get("n_actions", 2)))
    try:
        agents = AgentMix(cfg.agents["weights"], cfg.agents.get("options"))
    except BetsError as exc:
        raise ConfigError("agents", str(exc)) from exc
    if cfg.mode == "monotone" and not agents.all_nonnegative:
        raise ConfigError("mode", "monotone mode needs an agent mix with nonnegative stakes only")
    forecaster = ExactForecaster.from_horizon(
        stream.d, cfg.T, selector=selector or cfg.selector, mode=cfg.mode, eta=cfg.eta,
        arch=cfg.arch, hidden=cfg.hidden, seed=fc_seed, K=cfg.K, init=cfg.init,
    )
    return stream, tasks, agents, forecaster, make_rng(agent_seed)


def _protocol_log(cfg: ExperimentConfig, seed: int, selector: Optional[str] = None,
                  family: Optional[str] = None) -> pd.DataFrame:
    stream, tasks, agents, forecaster, rng = _build_protocol(cfg, seed, selector, family)
    return run_protocol(stream, tasks, agents, forecaster, cfg.T, rng)


def exactness_frame(log: pd.DataFrame, stride: int) -> pd.DataFrame:
    """라운드 기록 -> 누적/평균 지불액과 (평균)^2 sqrt(t / log t) 열을 붙여 솎아낸 표"""
    if log.empty:
        return pd.DataFrame(columns=EXACTNESS_COLUMNS)
    frame = log.copy()
    frame["avg_payout"] = frame["cum_payout"] / frame["t"]
    frame["avg_payout_sq_scaled"] = [scaled_exactness(a, t) for a, t in zip(frame["avg_payout"], frame["t"])]
    return _thin(frame, stride)[EXACTNESS_COLUMNS]


def run_exactness(cfg: ExperimentConfig) -> str:
    log = _protocol_log(cfg, cfg.seed)
    frame = exactness_frame(log, _stride(cfg, cfg.T))
    write_csv(frame, cfg.out)
    extra = {"rounds": len(log)}
    if not log.empty:
        avg = log["cum_payout"] / log["t"]
        scaled = [scaled_exactness(a, t) for a, t in zip(avg, log["t"])]
        extra["final_avg_payout"] = float(avg.iloc[-1])
        extra["max_scaled_exactness_final_half"] = float(np.nanmax(scaled[len(scaled) // 2:] or [np.nan]))
    write_manifest(cfg.out, cfg, extra)
    return cfg.out


def run_market(cfg: ExperimentConfig) -> str:
    """(selector, cautious 비율, 메커니즘) 조합마다 같은 시드로 시뮬레이션해 한 CSV 로 합침"""
    market = {**MARKET_DEFAULTS, **cfg.market}
    n_flights = market["n_flights"]
    selectors = market["selectors"] or [cfg.selector]
    stream_seed, fc_seed, pool_seed = _child_seeds(cfg.seed, 3)
    frames = []
    unquotable = []
    for selector in selectors:
        for frac in market["cautious_fracs"]:
            for mechanism in market["mechanisms"]:
                stream = _build_stream(cfg, stream_seed, "route", n_flights)
                forecaster = ExactForecaster.from_horizon(
                    stream.d, max(n_flights, 2), selector=selector, mode=cfg.mode, eta=cfg.eta,
                    arch=cfg.arch, hidden=cfg.hidden, seed=fc_seed, K=cfg.K, init=cfg.init,
                )
                sim = MarketSimulation(stream, forecaster, float(frac), mechanism == "on", pool_seed,
                                       selector_name=selector)
                frames.append(sim.run(n_flights))
                if sim.mechanism_on:
                    unquotable.append({"selector": selector, "cautious_frac": float(frac),
                                       "unquotable_share": sim.unquotable_share})
    frame = pd.concat(frames, ignore_index=True)
    write_csv(frame, cfg.out)
    write_manifest(cfg.out, cfg, {"series": len(frames), "unquotable": unquotable})
    return cfg.out


def run_histogram(cfg: ExperimentConfig) -> str:
    """실행 후반부 c_t 의 히스토그램 (고정 구간)"""
    log = _protocol_log(cfg, cfg.seed)
    final = log[log["t"] > len(log) // 2] if not log.empty else log
    if final.empty:
        raise BetsError("histogram needs a nonempty final half of the run")
    c = final["c_t"].to_numpy()
    counts, edges = np.histogram(c, bins=HIST_BINS, range=HIST_RANGE)
    frame = pd.DataFrame({"bin_left": edges[:-1], "bin_right": edges[1:], "count": counts})
    write_csv(frame, cfg.out)

    median_abs = float(np.median(np.abs(c)))
    if median_abs > MEDIAN_C_SOFT_LIMIT:
        logger.warning("median |c_t| over the final half is %.4f (> %.2f)", median_abs, MEDIAN_C_SOFT_LIMIT)
    write_manifest(cfg.out, cfg, {
        "median_abs_c_final_half": median_abs,
        "below_range": int((c < HIST_RANGE[0]).sum()),
        "above_range": int((c > HIST_RANGE[1]).sum()),
    })
    return cfg.out


def run_audit(cfg: ExperimentConfig) -> str:
    """
    오프라인 soundness 감사 보고서(JSON)
    - audit.distribution: id, weight, mu_star, mu, c 레코드 목록 또는 그 JSON 파일 경로
    - audit.sample: id, y, mu, c 열을 가진 CSV 경로
    """
    audit = {**AUDIT_DEFAULTS, **cfg.audit}
    if audit.get("distribution") is not None:
        records = audit["distribution"]
        if isinstance(records, str):
            with open(records, encoding="utf-8") as f:
                records = json.load(f)
        if isinstance(records, dict):
            records = records.get("support", [])
        dist, fc = table_from_records(records)
        as_key: Callable[[Any], Any] = lambda x: x
    elif audit.get("sample") is not None:
        dist, fc, _ = sample_from_csv(audit["sample"])
        as_key = str
    else:
        raise ConfigError("audit", "missing distribution or sample input")
    subsets = None
    if audit["subsets"]:
        subsets = {name: [as_key(x) for x in ids] for name, ids in audit["subsets"].items()}
    report = audit_report(dist, fc, float(audit["M"]), subsets, float(audit["c0"]), audit["bins"])
    write_report(cfg.out, report)
    write_manifest(cfg.out, cfg)
    logger.info("audit: mce=%.6f standard gap=%.6f", report["mce"], report["gaps"]["standard"])
    return cfg.out


def run_ablation(cfg: ExperimentConfig) -> str:
    """
    selector 별로 (과제 종류 x 시드) 실행의 평균 지불액 곡선을 모아 t 별 분위수를 기록
    - 같은 (과제, 반복 번호) 에는 모든 selector 가 같은 시드를 사용
    """
    ablation = {**ABLATION_DEFAULTS, **cfg.ablation}
    replicate_seeds = _child_seeds(cfg.seed, ablation["seeds"])
    curves = []
    for selector in ablation["selectors"]:
        for family in ablation["families"]:
            for rep, seed in enumerate(replicate_seeds):
                log = _protocol_log(cfg, seed, selector=selector, family=family)
                curves.append(pd.DataFrame({
                    "selector": selector, "family": family, "replicate": rep,
                    "t": log["t"], "avg_payout": log["cum_payout"] / log["t"],
                }))
    runs = pd.concat(curves, ignore_index=True)
    stride = _stride(cfg, cfg.T)
    runs = runs[(runs["t"] % stride == 0) | (runs["t"] == runs["t"].max())]
    table = runs.groupby(["selector", "t"])["avg_payout"].quantile(list(QUANTILES)).unstack()
    table.columns = [f"q{int(round(q * 100))}" for q in QUANTILES]
    frame = table.reset_index()
    write_csv(frame, cfg.out)
    write_manifest(cfg.out, cfg, {"runs": len(curves)})
    return cfg.out


def run_loss_gap(cfg: ExperimentConfig) -> str:
    """
    라운드별 예측 하 기대손실, 실제 mu* 하 기대손실, 베팅 지불을 포함한 기대손실과 L_min/L_max
    - mu* 를 아는 합성 스트림에서만 실행 가능
    """
    stream, tasks, agents, forecaster, rng = _build_protocol(cfg, cfg.seed)
    rows = []
    for t in range(1, cfg.T + 1):
        try:
            nature = next(stream)
        except StopIteration:
            break
        if nature.mu_star is None:
            raise ConfigError("stream", "loss-gap needs a stream with known mu*")
        forecast = forecaster.predict(nature.x)
        loss_spec = tasks.sample_task(nature.z)
        decision = agents.choose(rng).decide(loss_spec, forecast, nature.mu_star)
        bounds = loss_bounds(loss_spec, decision.action, forecast)
        L_pay, _ = payment_guarantee(loss_spec, decision.action, forecast, nature.mu_star, b=decision.stake)
        forecaster.observe(nature.x, nature.y, decision.stake, action=decision.action, loss_spec=loss_spec)
        rows.append({
            "t": t,
            "L_forecast": bounds.L_avg,
            "L_true": expected_loss(loss_spec, decision.action, nature.mu_star),
            "L_with_payment": L_pay,
            "L_min": bounds.L_min,
            "L_max": bounds.L_max,
        })
    frame = _thin(pd.DataFrame(rows), _stride(cfg, cfg.T))
    write_csv(frame, cfg.out)
    write_manifest(cfg.out, cfg, {"rounds": len(rows)})
    return cfg.out


RUNNERS: Dict[str, Callable[[ExperimentConfig], str]] = {
    "run-exactness": run_exactness,
    "run-market": run_market,
    "run-histogram": run_histogram,
    "run-audit": run_audit,
    "run-ablation": run_ablation,
    "run-loss-gap": run_loss_gap,
}


def parse_args(argv: Optional[Sequence[str]]) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        prog="fairbets", description="Fair-bet decision insurance experiments",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in RUNNERS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--seed", type=int, help="unsigned 64-bit seed (mandatory here or in the config)")
        p.add_argument("--out", help="output path (manifest is written next to it)")
        p.add_argument("--selector", choices=sorted(SELECTORS))
        p.add_argument("--T", type=int, help="number of rounds")
        p.add_argument("--eta", type=float, help="SGD learning rate")
        p.add_argument("--mode", choices=MODES)
        p.add_argument("--K", type=int, help="override the number of lambda bins")
        p.add_argument("--stride", type=int, help="CSV thinning stride")
    return parser.parse_args(argv)


def main(argv: Optional[Sequence[str]] = None) -> int:
    settings = load_settings()
    setup_logging(settings.log_level)
    args = parse_args(argv)
    try:
        cfg = build_config(args, settings)
        logger.info("%s seed=%d out=%s", cfg.subcommand, cfg.seed, cfg.out)
        out = RUNNERS[cfg.subcommand](cfg)
    except (BetsError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, ConfigError) else 1
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
