import logging
import re
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.special import expit
from scipy.stats import norm
from typing_extensions import Literal

from core import BetsError, CSVFormatError, LossSpec

logger = logging.getLogger(__name__)

N_DIGITS = 10
FLIP_LOW, FLIP_HIGH = 0.1, 0.9
RANDOM_LOSS_SCALE = 10.0


class NatureRound(NamedTuple):
    """자연이 내는 한 라운드: 특징 x, 실제 확률 mu*(미지이면 None), 결과 y, 과제 그룹 z"""
    x: np.ndarray
    mu_star: Optional[float]
    y: int
    z: float


class NatureStream:
    """
    자연(nature) 스트림의 기반 클래스
    - next_round 는 (x, mu*) 를 만들고 y ~ Bernoulli(mu*) 를 뽑음
    - mu* 는 예측자 경로에 전달되지 않음 (적대적 에이전트의 부가 정보로만 사용)
    """
    kind = "base"

    def __init__(self, d: int, seed: int = 0, T: Optional[int] = None):
        self.d = d
        self.seed = seed
        self.T = T
        self.t = 0
        self.rng = np.random.Generator(np.random.PCG64(seed))

    def __iter__(self):
        return self

    def __next__(self) -> NatureRound:
        return self.next_round()

    def next_round(self) -> NatureRound:
        if self.T is not None and self.t >= self.T:
            raise StopIteration
        x, mu_star, z = self._draw()
        self.t += 1
        y = int(self.rng.random() < mu_star)
        return NatureRound(x, float(mu_star), y, z)

    def _draw(self):
        raise NotImplementedError

    def clone(self, seed: int) -> "NatureStream":
        raise NotImplementedError


def _feature_group(x0: float) -> int:
    """첫 번째 특징의 표준정규 분위수 10분위 (1..10)"""
    return min(int(norm.cdf(x0) * 10), 9) + 1


class IIDLogisticStream(NatureStream):
    kind = "iid-logistic"

    def __init__(self, d: int, w: Optional[Sequence[float]] = None, seed: int = 0, T: Optional[int] = None):
        super().__init__(d, seed, T)
        self.w = np.asarray(w, dtype=np.float64) if w is not None else self.rng.normal(size=d) / np.sqrt(d)
        if self.w.shape != (d,):
            raise BetsError(f"weight vector must have dimension {d}")

    def _draw(self):
        x = self.rng.normal(size=self.d)
        return x, expit(self.w @ x), _feature_group(x[0])

    def clone(self, seed: int) -> "IIDLogisticStream":
        return IIDLogisticStream(self.d, self.w, seed=seed, T=self.T)


class DriftStream(NatureStream):
    """가중치가 시드로 정한 두 끝점 사이를 T 라운드에 걸쳐 선형 보간"""
    kind = "drift"

    def __init__(self, d: int, T: int, seed: int = 0, finite: bool = False):
        super().__init__(d, seed, T if finite else None)
        self.horizon = T
        self.w_start = self.rng.normal(size=d) / np.sqrt(d)
        self.w_end = self.rng.normal(size=d) / np.sqrt(d)

    def weights(self, t: int) -> np.ndarray:
        frac = min(t / max(self.horizon - 1, 1), 1.0)
        return (1.0 - frac) * self.w_start + frac * self.w_end

    def _draw(self):
        x = self.rng.normal(size=self.d)
        return x, expit(self.weights(self.t) @ x), _feature_group(x[0])

    def clone(self, seed: int) -> "DriftStream":
        return DriftStream(self.d, self.horizon, seed=seed, finite=self.T is not None)


class DigitLatentStream(NatureStream):
    """
    숫자 라벨 i ~ Uniform{0..9} 를 잠재 변수로 하는 스트림
    - x 는 i 의 잡음 섞인 one-hot, mu* = (i + 1) / 11
    - 과제 그룹 z = i + 1
    """
    kind = "digit-latent"

    def __init__(self, noise: float = 0.3, seed: int = 0, T: Optional[int] = None):
        super().__init__(N_DIGITS, seed, T)
        self.noise = noise

    @staticmethod
    def mu_star_of(digit: int) -> float:
        return (digit + 1) / 11.0

    def _draw(self):
        digit = int(self.rng.integers(N_DIGITS))
        x = np.zeros(N_DIGITS)
        x[digit] = 1.0
        x += self.noise * self.rng.normal(size=N_DIGITS)
        return x, self.mu_star_of(digit), digit + 1

    def clone(self, seed: int) -> "DigitLatentStream":
        return DigitLatentStream(self.noise, seed=seed, T=self.T)


class AdversarialFlipStream(NatureStream):
    """x 와 무관하게 period 라운드마다 mu* 가 0.1 과 0.9 사이를 오감"""
    kind = "adversarial-flip"

    def __init__(self, d: int = 4, period: int = 100, seed: int = 0, T: Optional[int] = None):
        if period < 1:
            raise BetsError(f"period must be >= 1, got {period}")
        super().__init__(d, seed, T)
        self.period = period

    def _draw(self):
        x = self.rng.normal(size=self.d)
        mu_star = FLIP_LOW if (self.t // self.period) % 2 == 0 else FLIP_HIGH
        return x, mu_star, _feature_group(x[0])

    def clone(self, seed: int) -> "AdversarialFlipStream":
        return AdversarialFlipStream(self.d, self.period, seed=seed, T=self.T)


class RouteStream(NatureStream):
    """
    항공편 특징: 출발 공항, 도착 공항, 출발 시각을 one-hot 으로 이어 붙임
    - 지연 확률 mu* 는 노선 가중치의 선형 drift 에 대한 logistic
    """
    kind = "route"

    def __init__(self, n_airports: int = 8, n_hours: int = 24, T: int = 1000, seed: int = 0,
                 base_logit: float = -1.0):
        super().__init__(2 * n_airports + n_hours, seed, None)
        self.n_airports = n_airports
        self.n_hours = n_hours
        self.horizon = T
        self.base_logit = base_logit
        self.w_start = self.rng.normal(scale=0.7, size=self.d)
        self.w_end = self.rng.normal(scale=0.7, size=self.d)

    def _draw(self):
        src, dst = self.rng.choice(self.n_airports, size=2, replace=False)
        hour = int(self.rng.integers(self.n_hours))
        x = np.zeros(self.d)
        x[src] = 1.0
        x[self.n_airports + dst] = 1.0
        x[2 * self.n_airports + hour] = 1.0
        frac = min(self.t / max(self.horizon - 1, 1), 1.0)
        w = (1.0 - frac) * self.w_start + frac * self.w_end
        return x, expit(self.base_logit + w @ x), 1 + hour * 10 // self.n_hours

    def clone(self, seed: int) -> "RouteStream":
        return RouteStream(self.n_airports, self.n_hours, self.horizon, seed=seed, base_logit=self.base_logit)


class CSVStream(NatureStream):
    """CSV 에서 읽은 유한 스트림 (mu* 미지: 오라클 지표 비활성)"""
    kind = "csv"

    def __init__(self, features: np.ndarray, outcomes: np.ndarray, groups: np.ndarray,
                 columns: List[str], seed: int = 0):
        super().__init__(features.shape[1] if features.ndim == 2 else 0, seed, len(outcomes))
        self.features = features
        self.outcomes = outcomes
        self.groups = groups
        self.columns = columns

    def __len__(self) -> int:
        return len(self.outcomes)

    def next_round(self) -> NatureRound:
        if self.t >= len(self.outcomes):
            raise StopIteration
        i = self.t
        self.t += 1
        return NatureRound(self.features[i], None, int(self.outcomes[i]), float(self.groups[i]))

    def clone(self, seed: int) -> "CSVStream":
        return CSVStream(self.features, self.outcomes, self.groups, self.columns, seed=seed)


@dataclass(frozen=True)
class CSVSchema:
    """
    CSV 입력 스키마
    Args:
        features: one-hot 으로 변환할 범주형 열 이름들
        outcome: 0/1 결과 열
        z: 과제 그룹 열 (분위수 10구간으로 나눔, 생략 시 모두 1)
    """
    features: Sequence[str]
    outcome: str
    z: Optional[str] = None


def _parser_line(message: str) -> int:
    match = re.search(r"line (\d+)", message)
    return int(match.group(1)) if match else 0


def ingest_csv(path: str, schema: CSVSchema) -> CSVStream:
    """
    CSV 파일을 유한 NatureStream 으로 변환
    - 범주형 특징은 첫 등장 순서대로 one-hot 인코딩
    - 행 순서는 파일 순서 유지
    - 오류 메시지에는 파일 기준 줄 번호(헤더 = 1)를 포함
    """
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skip_blank_lines=True)
    except pd.errors.EmptyDataError:
        logger.warning("%s is empty; returning an empty stream", path)
        return CSVStream(np.zeros((0, 0)), np.zeros(0, dtype=int), np.zeros(0), [])
    except pd.errors.ParserError as exc:
        raise CSVFormatError(_parser_line(str(exc)), f"malformed row: {exc}") from exc

    if schema.outcome not in frame.columns:
        raise CSVFormatError(1, f"missing outcome column {schema.outcome!r}")
    for col in list(schema.features) + ([schema.z] if schema.z else []):
        if col not in frame.columns:
            raise CSVFormatError(1, f"missing column {col!r}")

    blocks, names = [], []
    for col in schema.features:
        values = frame[col].str.strip()
        empty = np.flatnonzero(values.to_numpy() == "")
        if empty.size:
            raise CSVFormatError(int(empty[0]) + 2, f"empty value in column {col!r}")
        levels = pd.unique(values)
        codes = pd.Categorical(values, categories=levels).codes
        blocks.append(np.eye(len(levels))[codes] if len(values) else np.zeros((0, len(levels))))
        names.extend(f"{col}={level}" for level in levels)

    outcome = frame[schema.outcome].str.strip()
    bad = ~outcome.isin(["0", "1"])
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise CSVFormatError(row + 2, f"outcome {outcome.iloc[row]!r} is not 0 or 1")

    if schema.z and len(frame):
        try:
            z_values = pd.to_numeric(frame[schema.z])
        except ValueError as exc:
            raise CSVFormatError(0, f"non-numeric z column {schema.z!r}: {exc}") from exc
        groups = pd.qcut(z_values, 10, labels=False, duplicates="drop").to_numpy(dtype=float) + 1
    else:
        groups = np.ones(len(frame))

    features = np.hstack(blocks) if blocks else np.zeros((len(frame), 0))
    return CSVStream(features, outcome.astype(int).to_numpy(), groups, names)


Family = Literal["one-sided", "different-stakes", "random"]


@dataclass
class DecisionTaskSpec:
    """
    벤치마크 의사결정 과제 생성기
    - one-sided: 행동 {0, 1}, a == y 이면 손실 0, 아니면 1 + z
    - different-stakes: 각 항목 ~ Normal(0, z) (z 는 표준편차)
    - random: 각 항목 ~ Normal(0, 10), [-10, 10] 으로 클립
    - 같은 z 에는 같은 손실표 (시드와 z 에서 결정)
    """
    family: Family = "random"
    seed: int = 0
    n_actions: int = 2
    _cache: Dict[float, LossSpec] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.family not in ("one-sided", "different-stakes", "random"):
            raise BetsError(f"unknown task family {self.family!r}")
        if self.n_actions < 1:
            raise BetsError("n_actions must be >= 1")

    def _rng_for(self, z: float) -> np.random.Generator:
        key = int(np.float64(z).view(np.uint64))
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=(key,))))

    def sample_task(self, z: float) -> LossSpec:
        if z in self._cache:
            return self._cache[z]
        if self.family == "one-sided":
            stake = 1.0 + float(z)
            spec = LossSpec({0: (0.0, stake), 1: (stake, 0.0)})
        elif self.family == "different-stakes":
            if not z > 0:
                raise BetsError(f"different-stakes tasks need z > 0, got {z}")
            table = self._rng_for(z).normal(0.0, float(z), size=(self.n_actions, 2))
            spec = LossSpec({a: (table[a, 0], table[a, 1]) for a in range(self.n_actions)})
        else:
            table = np.clip(self._rng_for(z).normal(0.0, RANDOM_LOSS_SCALE, size=(self.n_actions, 2)),
                            -RANDOM_LOSS_SCALE, RANDOM_LOSS_SCALE)
            spec = LossSpec({a: (table[a, 0], table[a, 1]) for a in range(self.n_actions)},
                            M=RANDOM_LOSS_SCALE)
        self._cache[z] = spec
        return spec


def make_stream(kind: str, T: int, seed: int, d: int = 8, **options) -> NatureStream:
    """설정 이름으로 스트림 생성"""
    if kind == "iid-logistic":
        return IIDLogisticStream(d, options.get("w"), seed=seed)
    if kind == "drift":
        return DriftStream(d, T, seed=seed)
    if kind == "digit-latent":
        return DigitLatentStream(options.get("noise", 0.3), seed=seed)
    if kind == "adversarial-flip":
        return AdversarialFlipStream(d, options.get("period", 100), seed=seed)
    if kind == "route":
        return RouteStream(options.get("n_airports", 8), options.get("n_hours", 24), T, seed=seed)
    if kind == "csv":
        if "path" not in options:
            raise BetsError("csv stream needs a path")
        schema = CSVSchema(options.get("features", []), options.get("outcome", "y"), options.get("z"))
        return ingest_csv(options["path"], schema)
    raise BetsError(f"unknown stream kind {kind!r}")
