import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Hashable, Iterable, List, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd
from typing_extensions import Literal

from core import BetsError, CSVFormatError

logger = logging.getLogger(__name__)

WEIGHT_TOL = 1e-12

BetClass = Literal["standard", "multicalibration", "pointwise"]
Subset = Union[Callable[[Hashable], bool], Iterable[Hashable]]


@dataclass(frozen=True)
class DiscreteDistribution:
    """
    유한 지지집합 위의 (X, Y) 분포
    Args:
        ids: x 식별자
        weights: p(x) > 0, 합 1
        mu_star: 실제 조건부 확률 mu*(x)
    """
    ids: Sequence[Hashable]
    weights: np.ndarray
    mu_star: np.ndarray

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=np.float64)
        mu_star = np.asarray(self.mu_star, dtype=np.float64)
        ids = tuple(self.ids)
        if not (len(ids) == weights.size == mu_star.size):
            raise BetsError("ids, weights and mu_star must have the same length")
        if len(set(ids)) != len(ids):
            raise BetsError("duplicate x-ids in distribution support")
        if np.any(weights <= 0):
            raise BetsError("support weights must be positive")
        if abs(weights.sum() - 1.0) > WEIGHT_TOL:
            raise BetsError(f"weights must sum to 1 (got {weights.sum()!r})")
        if np.any(mu_star < 0) or np.any(mu_star > 1):
            raise BetsError("mu_star must lie in [0,1]")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "mu_star", mu_star)

    @classmethod
    def from_records(cls, records: Iterable[Mapping]) -> "DiscreteDistribution":
        rows = list(records)
        return cls([r["id"] for r in rows], [r["weight"] for r in rows], [r["mu_star"] for r in rows])


@dataclass(frozen=True)
class TableForecaster:
    """x-id -> (mu, c) 표 형태의 예측자"""
    mu: Mapping[Hashable, float]
    c: Mapping[Hashable, float] = field(default_factory=dict)

    def aligned(self, ids: Sequence[Hashable]):
        missing = [x for x in ids if x not in self.mu]
        if missing:
            raise BetsError(f"forecaster does not cover x-ids {missing[:5]}")
        mu = np.array([self.mu[x] for x in ids], dtype=np.float64)
        c = np.array([self.c.get(x, 0.0) for x in ids], dtype=np.float64)
        return mu, c


def _frame(dist: DiscreteDistribution, fc: TableForecaster) -> pd.DataFrame:
    mu, c = fc.aligned(dist.ids)
    return pd.DataFrame({"id": list(dist.ids), "p": dist.weights, "mu_star": dist.mu_star, "mu": mu, "c": c})


def _group_terms(frame: pd.DataFrame) -> pd.DataFrame:
    """
    예측값 u 별 (확률질량, 편차 |u - E[mu*|u]|, 평균 c)
    - 그룹 안에서 c 가 일정하면 그 값을 그대로 사용
    """
    rows = []
    for u, group in frame.groupby("mu", sort=True):
        mass = group["p"].sum()
        deviation = abs(u - (group["p"] * group["mu_star"]).sum() / mass)
        cs = group["c"].to_numpy()
        cbar = cs[0] if np.all(cs == cs[0]) else (group["p"] * group["c"]).sum() / mass
        rows.append({"u": u, "mass": mass, "deviation": deviation, "c": cbar})
    return pd.DataFrame(rows, columns=["u", "mass", "deviation", "c"])


def _standard_gap(frame: pd.DataFrame, M: float) -> float:
    if frame.empty:
        return 0.0
    terms = _group_terms(frame)
    return float(M * (terms["mass"] * np.maximum(0.0, terms["deviation"] - terms["c"])).sum())


def _subset_mask(ids: Sequence[Hashable], subset: Subset) -> np.ndarray:
    if callable(subset):
        return np.array([bool(subset(x)) for x in ids], dtype=bool)
    members = set(subset)
    return np.array([x in members for x in ids], dtype=bool)


def soundness_gap(dist: DiscreteDistribution, fc: TableForecaster, bet_class: BetClass, M: float,
                  subsets: Optional[Mapping[str, Subset]] = None) -> float:
    """
    sup_{b in B, |b| <= M} E[b(X)(mu(X) - mu*(X)) - |b(X)| c(X)] 를 정확히 계산
    - standard: b 가 mu(X) 의 함수
    - multicalibration: b = 1[X in S] g(mu(X)), S 중 최댓값
    - pointwise: b 가 X 의 임의 함수
    - 목적함수가 b 에 대해 선형이므로 최적 b 는 그룹/점마다 {-M, 0, M} 중 하나
    """
    if not M > 0:
        raise BetsError(f"stake bound M must be positive, got {M}")
    frame = _frame(dist, fc)
    if bet_class == "standard":
        return _standard_gap(frame, M)
    if bet_class == "pointwise":
        excess = np.maximum(0.0, np.abs(frame["mu"] - frame["mu_star"]) - frame["c"])
        return float(M * (frame["p"] * excess).sum())
    if bet_class == "multicalibration":
        if not subsets:
            raise BetsError("multicalibration bet class needs subsets")
        gaps = [_standard_gap(frame[_subset_mask(dist.ids, s)], M) for s in subsets.values()]
        return max(gaps)
    raise BetsError(f"unknown bet class {bet_class!r}")


def mce(dist: DiscreteDistribution, fc: TableForecaster) -> float:
    """max_u |E[mu* | mu(X) = u] - u|"""
    terms = _group_terms(_frame(dist, fc))
    return float(terms["deviation"].max()) if not terms.empty else 0.0


@dataclass
class MulticalibrationReport:
    gaps: Dict[str, float]
    violations: Dict[str, List[float]]
    skipped: List[str]
    multicalibrated: bool


def multicalibration_gap(dist: DiscreteDistribution, fc: TableForecaster, subsets: Mapping[str, Subset],
                         c0: float, M: float = 1.0) -> MulticalibrationReport:
    """
    부분집단별 soundness gap 과 (S, c0)-multicalibration 판정
    - 판정: 모든 (S, u) 에 대해 |E[1_S (u - mu*)]| <= c0 P(S, mu = u)
    - 빈 부분집합은 건너뛰고 기록
    """
    frame = _frame(dist, fc)
    gaps: Dict[str, float] = {}
    violations: Dict[str, List[float]] = {}
    skipped: List[str] = []
    for name, subset in subsets.items():
        part = frame[_subset_mask(dist.ids, subset)]
        if part.empty:
            logger.warning("subset %r is empty on the support; skipped", name)
            skipped.append(name)
            continue
        gaps[name] = _standard_gap(part, M)
        terms = _group_terms(part)
        bad = terms.loc[terms["deviation"] > c0, "u"]
        if not bad.empty:
            violations[name] = [float(u) for u in bad]
    return MulticalibrationReport(gaps, violations, skipped, multicalibrated=not violations)


def distribution_from_sample(ids: Sequence[Hashable], y: Sequence[int]) -> DiscreteDistribution:
    """표본 (x-id, y) 로부터 경험 분포: p(x) = 빈도, mu*(x) = 경험적 y 비율"""
    frame = pd.DataFrame({"id": list(ids), "y": np.asarray(y, dtype=np.float64)})
    if frame.empty:
        raise BetsError("cannot build a distribution from an empty sample")
    stats = frame.groupby("id", sort=False)["y"].agg(["size", "mean"])
    weights = stats["size"].to_numpy(dtype=np.float64)
    weights = weights / weights.sum()
    # 부동소수점 합 오차 보정
    weights[-1] = 1.0 - weights[:-1].sum()
    return DiscreteDistribution(list(stats.index), weights, stats["mean"].to_numpy())


def table_from_records(records: Iterable[Mapping]):
    """
    id, weight, mu_star, mu, c 필드를 가진 레코드 목록 -> (분포, 예측자)
    - c 가 없으면 0
    """
    rows = list(records)
    if not rows:
        raise BetsError("distribution has no support points")
    try:
        dist = DiscreteDistribution.from_records(rows)
        fc = TableForecaster({r["id"]: float(r["mu"]) for r in rows},
                             {r["id"]: float(r.get("c", 0.0)) for r in rows})
    except KeyError as exc:
        raise BetsError(f"support record is missing field {exc}") from exc
    return dist, fc


def sample_from_csv(path: str):
    """
    id, y, mu[, c] 열을 가진 표본 CSV -> (경험 분포, 예측자, 표본 DataFrame)
    - 같은 id 의 mu, c 는 첫 행 값을 사용
    """
    try:
        frame = pd.read_csv(path, dtype={"id": str}, skip_blank_lines=True)
    except pd.errors.EmptyDataError as exc:
        raise CSVFormatError(1, "empty sample file") from exc
    except pd.errors.ParserError as exc:
        raise CSVFormatError(0, f"malformed row: {exc}") from exc
    for col in ("id", "y", "mu"):
        if col not in frame.columns:
            raise CSVFormatError(1, f"missing column {col!r}")
    bad = ~frame["y"].isin([0, 1])
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise CSVFormatError(row + 2, f"outcome {frame['y'].iloc[row]!r} is not 0 or 1")
    if "c" not in frame.columns:
        frame["c"] = 0.0
    first = frame.drop_duplicates("id")
    fc = TableForecaster(dict(zip(first["id"], first["mu"].astype(float))),
                         dict(zip(first["id"], first["c"].astype(float))))
    return distribution_from_sample(frame["id"], frame["y"]), fc, frame[["id", "y"]]


def histogram_binning(source: Union[DiscreteDistribution, pd.DataFrame], fc: TableForecaster, B: int) -> TableForecaster:
    """
    mu 값을 [0, 1] 의 B 개 등간격 구간으로 나누고 각 구간의 mu 를 구간 평균 mu*(또는 y 비율)로 교체
    Args:
        source: DiscreteDistribution 또는 id, y 열을 가진 표본 DataFrame
        B: 구간 수
    Returns:
        c 는 그대로 둔 새 TableForecaster (표본에 없는 x 는 그대로)
    """
    if B < 1:
        raise BetsError(f"bin count must be >= 1, got {B}")
    if isinstance(source, DiscreteDistribution):
        ids, weights, target = list(source.ids), source.weights, source.mu_star
    else:
        ids = list(source["id"])
        weights = np.ones(len(ids))
        target = source["y"].to_numpy(dtype=np.float64)
    mu, _ = fc.aligned(ids)
    bins = np.minimum(np.floor(mu * B).astype(np.int64), B - 1)
    frame = pd.DataFrame({"id": ids, "bin": bins, "w": weights, "wt": weights * target})
    sums = frame.groupby("bin")[["w", "wt"]].sum()
    bin_value = (sums["wt"] / sums["w"]).to_dict()

    new_mu = dict(fc.mu)
    for x, k in zip(ids, bins):
        new_mu[x] = float(bin_value[k])
    # 표본에 나타나지 않은 x 도 같은 구간이면 구간 값을 받음
    for x, u in fc.mu.items():
        k = min(int(np.floor(u * B)), B - 1)
        if x not in frame["id"].values and k in bin_value:
            new_mu[x] = float(bin_value[k])
    return TableForecaster(new_mu, dict(fc.c))


def audit_report(dist: DiscreteDistribution, fc: TableForecaster, M: float,
                 subsets: Optional[Mapping[str, Subset]] = None, c0: float = 0.0,
                 bins: Optional[int] = None) -> dict:
    """MCE, 클래스별 soundness gap, multicalibration 판정, (선택) histogram binning 전후 비교"""
    report = {
        "mce": mce(dist, fc),
        "gaps": {
            "standard": soundness_gap(dist, fc, "standard", M),
            "pointwise": soundness_gap(dist, fc, "pointwise", M),
        },
    }
    if subsets:
        report["gaps"]["multicalibration"] = soundness_gap(dist, fc, "multicalibration", M, subsets)
        mc = multicalibration_gap(dist, fc, subsets, c0, M)
        report["multicalibration"] = {
            "c0": c0, "multicalibrated": mc.multicalibrated, "gaps": mc.gaps,
            "violations": mc.violations, "skipped": mc.skipped,
        }
    if bins:
        binned = histogram_binning(dist, fc, bins)
        report["binned"] = {
            "bins": bins,
            "mce": mce(dist, binned),
            "gaps": {
                "standard": soundness_gap(dist, binned, "standard", M),
                "pointwise": soundness_gap(dist, binned, "pointwise", M),
            },
        }
    return report
