import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional

import numpy as np
import pandas as pd

from core import BetsError, Forecast, UnquotableError, forecaster_payout
from forecaster import ExactForecaster

logger = logging.getLogger(__name__)

POOL_SIZE = 1000
CAPACITY = 300
R_ALT_MAX = 200.0
R_TRIP_MAX = 400.0
DELAY_Z_RANGE = (4.0, 9.0)
DELAY_SCALE = 0.2
# 항공편 하나의 총 스테이크를 예측자 학습 단위로 나누는 값
STAKE_SCALE = 1e5


class PassengerType(str, Enum):
    NAIVE = "naive"
    TRUSTFUL = "trustful"
    CAUTIOUS = "cautious"


_TYPE_CODES = [PassengerType.NAIVE, PassengerType.TRUSTFUL, PassengerType.CAUTIOUS]


@dataclass(frozen=True)
class PassengerProfile:
    """
    승객 한 명의 유형과 효용 파라미터
    - r_alt: 대안(다른 교통수단 등)의 효용, r_trip: 여행 보상, c_delay: 지연 비용
    """
    type: PassengerType
    r_alt: float
    r_trip: float
    c_delay: float


def quote(mu: float, c: float, b1: float) -> float:
    """
    지연 시 b1 을 받는 보험의 비지연 시 보험료 b0 = b1 (mu + c) / (1 - mu - c)
    - 시장 모드에서는 음수 c 도 허용
    """
    if b1 < 0:
        raise BetsError(f"delay payout must be nonnegative, got {b1}")
    if mu + c >= 1.0:
        raise UnquotableError(f"cannot quote insurance when mu + c >= 1 (mu={mu}, c={c})")
    return b1 * (mu + c) / (1.0 - mu - c)


def insured_payout(mu: float, c: float, c_delay: float) -> float:
    """결과와 무관한 효용을 만드는 보험금 b1 = (1 - mu - c) c_delay (스테이크 b = c_delay)"""
    return (1.0 - mu - c) * c_delay


def willingness_to_pay(p: PassengerProfile, mu: float, c: float, mechanism_on: bool = True) -> float:
    """
    승객이 낼 수 있는 최대 항공권 가격 (음수면 탑승하지 않음)
    - naive: 지연이 없다고 가정
    - trustful: 예측 mu 를 그대로 믿음
    - cautious: 메커니즘이 없으면 확실한 지연을 가정, 있으면 보험으로 (mu + c) c_delay 확정
    """
    base = p.r_trip - p.r_alt
    if p.type == PassengerType.NAIVE:
        return base
    if p.type == PassengerType.TRUSTFUL:
        return base - mu * p.c_delay
    if mechanism_on and mu + c < 1.0:
        return base - (mu + c) * p.c_delay
    return base - p.c_delay


class PassengerPool:
    """승객 후보 집단 (벡터화된 배열)"""

    def __init__(self, types: np.ndarray, r_alt: np.ndarray, r_trip: np.ndarray, c_delay: np.ndarray):
        self.types = np.asarray(types, dtype=np.int64)
        self.r_alt = np.asarray(r_alt, dtype=np.float64)
        self.r_trip = np.asarray(r_trip, dtype=np.float64)
        self.c_delay = np.asarray(c_delay, dtype=np.float64)

    @classmethod
    def sample(cls, rng: np.random.Generator, cautious_frac: float, size: int = POOL_SIZE) -> "PassengerPool":
        """
        cautious 비율만큼 cautious, 나머지는 naive 와 trustful 로 반씩 나눔
        - r_alt ~ U(0, 200), r_trip ~ U(0, 400), c_delay = 0.2 e^z, z ~ U(4, 9)
        """
        if not 0.0 <= cautious_frac <= 1.0:
            raise BetsError(f"cautious fraction must lie in [0,1], got {cautious_frac}")
        n_cautious = int(round(cautious_frac * size))
        n_naive = (size - n_cautious) // 2
        n_trustful = size - n_cautious - n_naive
        types = np.repeat([0, 1, 2], [n_naive, n_trustful, n_cautious])
        rng.shuffle(types)
        r_alt = rng.uniform(0.0, R_ALT_MAX, size)
        r_trip = rng.uniform(0.0, R_TRIP_MAX, size)
        c_delay = DELAY_SCALE * np.exp(rng.uniform(*DELAY_Z_RANGE, size))
        return cls(types, r_alt, r_trip, c_delay)

    def __len__(self) -> int:
        return len(self.types)

    def profile(self, i: int) -> PassengerProfile:
        return PassengerProfile(_TYPE_CODES[self.types[i]], self.r_alt[i], self.r_trip[i], self.c_delay[i])

    def insured_mask(self, mu: float, c: float, mechanism_on: bool) -> np.ndarray:
        if not mechanism_on or mu + c >= 1.0:
            return np.zeros(len(self), dtype=bool)
        return self.types == 2

    def wtp(self, mu: float, c: float, mechanism_on: bool) -> np.ndarray:
        """willingness_to_pay 의 벡터 버전"""
        base = self.r_trip - self.r_alt
        out = base.copy()
        trustful = self.types == 1
        out[trustful] -= mu * self.c_delay[trustful]
        cautious = self.types == 2
        insured = self.insured_mask(mu, c, mechanism_on)
        out[insured] -= (mu + c) * self.c_delay[insured]
        worst = cautious & ~insured
        out[worst] -= self.c_delay[worst]
        return out


@dataclass(frozen=True)
class FlightRound:
    x: np.ndarray
    forecast: Forecast
    mu_star: Optional[float]
    y: int
    pool: PassengerPool
    capacity: int = CAPACITY

    def __post_init__(self):
        if len(self.pool) == 0:
            raise BetsError("empty passenger pool")
        if self.capacity > len(self.pool):
            raise BetsError(f"capacity {self.capacity} exceeds pool size {len(self.pool)}")


@dataclass
class MarketMetrics:
    """
    항공편(또는 누적) 회계
    - total_utility = revenue + passenger_utility
    - passenger_utility 에는 보험 수령/지불이 포함되고, insurance_net 은 항공사가 낸 순 보험금
    """
    revenue: float = 0.0
    passenger_utility: float = 0.0
    insurance_net: float = 0.0
    tickets: int = 0
    passengers: int = 0

    @property
    def total_utility(self) -> float:
        return self.revenue + self.passenger_utility

    @property
    def airline_profit(self) -> float:
        return self.revenue - self.insurance_net

    def __iadd__(self, other: "MarketMetrics") -> "MarketMetrics":
        self.revenue += other.revenue
        self.passenger_utility += other.passenger_utility
        self.insurance_net += other.insurance_net
        self.tickets += other.tickets
        self.passengers += other.passengers
        return self


@dataclass
class FlightOutcome:
    price: float
    flyers: np.ndarray
    metrics: MarketMetrics
    stakes: np.ndarray = field(default_factory=lambda: np.zeros(0))
    bet_payouts: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def total_stake(self) -> float:
        return float(self.stakes.sum())


def clearing_price(wtp: np.ndarray, capacity: int):
    """
    capacity 장을 팔 수 있는 최고 가격과 탑승객 인덱스
    - 양수 WTP 가 capacity 보다 적으면 가장 작은 양수 WTP 가 가격, 양수 WTP 전원 탑승
    - 가격 이상 WTP 가 capacity 를 넘으면 인덱스 순으로 자름
    """
    positive = np.flatnonzero(wtp > 0)
    if positive.size == 0:
        return 0.0, positive
    if positive.size < capacity:
        return float(wtp[positive].min()), positive
    price = float(np.sort(wtp)[::-1][capacity - 1])
    flyers = np.flatnonzero(wtp >= price)[:capacity]
    return price, flyers


def clear_flight(flight: FlightRound, mechanism_on: bool) -> FlightOutcome:
    """
    항공편 하나의 가격 결정과 실현 효용 정산
    - 지연 여부 y 는 항공편 단위로 한 번 뽑혀 모든 승객이 공유
    - 보험 든 cautious 승객의 효용은 y 와 무관하게 r_trip - price - (mu + c) c_delay
    """
    pool, f, y = flight.pool, flight.forecast, flight.y
    price, flyers = clearing_price(pool.wtp(f.mu, f.c, mechanism_on), flight.capacity)
    insured = pool.insured_mask(f.mu, f.c, mechanism_on)[flyers]

    utility = np.array(pool.r_alt, copy=True)
    utility[flyers] = pool.r_trip[flyers] - price - y * pool.c_delay[flyers]
    # 스테이크 b = c_delay, 지불액 b (y - mu) - |b| c
    stakes = pool.c_delay[flyers][insured]
    payouts = np.array([forecaster_payout(b, f, y) for b in stakes])
    utility[flyers[insured]] += payouts

    metrics = MarketMetrics(
        revenue=price * len(flyers),
        passenger_utility=float(utility.sum()),
        insurance_net=float(payouts.sum()),
        tickets=len(flyers),
        passengers=len(pool),
    )
    return FlightOutcome(price, flyers, metrics, stakes, payouts)


class MarketSimulation:
    """
    항공사(예측자)와 승객 후보들의 반복 시뮬레이션
    - 항공편마다 승객 1000명을 뽑아 300석을 판매
    - 메커니즘을 켜면 cautious 승객의 보험 스테이크 합이 예측자의 베팅 라운드가 됨
    """

    def __init__(self, stream, forecaster: ExactForecaster, cautious_frac: float, mechanism_on: bool,
                 seed: int, capacity: int = CAPACITY, pool_size: int = POOL_SIZE,
                 stake_scale: float = STAKE_SCALE, selector_name: str = ""):
        self.stream = stream
        self.forecaster = forecaster
        self.cautious_frac = cautious_frac
        self.mechanism_on = mechanism_on
        self.capacity = capacity
        self.pool_size = pool_size
        self.stake_scale = stake_scale
        self.selector_name = selector_name or forecaster.selector.name
        self.rng = np.random.Generator(np.random.PCG64(seed))
        self.cumulative = MarketMetrics()
        self.flights = 0
        # 메커니즘이 켜졌는데 mu + c >= 1 이라 보험을 팔 수 없었던 항공편 수
        self.unquotable = 0
        self.stake_total = 0.0

    @property
    def unquotable_share(self) -> float:
        return self.unquotable / self.flights if self.flights else 0.0

    def step(self) -> dict:
        nature = next(self.stream)
        forecast = self.forecaster.predict(nature.x)
        if self.mechanism_on and forecast.mu + forecast.c >= 1.0:
            self.unquotable += 1
        pool = PassengerPool.sample(self.rng, self.cautious_frac, self.pool_size)
        flight = FlightRound(nature.x, forecast, nature.mu_star, nature.y, pool, self.capacity)
        outcome = clear_flight(flight, self.mechanism_on)
        stake = outcome.total_stake / self.stake_scale
        self.forecaster.observe(nature.x, nature.y, stake)
        self.stake_total += stake
        self.cumulative += outcome.metrics
        self.flights += 1
        n = self.cumulative.passengers
        last = self.forecaster.last_round
        return {
            "flight_idx": self.flights,
            "mechanism": "on" if self.mechanism_on else "off",
            "cautious_frac": self.cautious_frac,
            "selector": self.selector_name,
            "price": outcome.price,
            "tickets": outcome.metrics.tickets,
            "revenue_avg": self.cumulative.revenue / n,
            "total_utility_avg": self.cumulative.total_utility / n,
            "insurance_net_avg": self.cumulative.insurance_net / n,
            "airline_profit_avg": self.cumulative.airline_profit / n,
            "c_t": forecast.c,
            "lambda_t": last["lam"],
            "mu_t": forecast.mu,
            "mu_star_t": np.nan if nature.mu_star is None else nature.mu_star,
        }

    def run(self, n_flights: int) -> pd.DataFrame:
        rows: List[dict] = []
        for _ in range(n_flights):
            try:
                rows.append(self.step())
            except StopIteration:
                logger.info("nature stream exhausted after %d flights", self.flights)
                break
        logger.info(
            "market run done: mechanism=%s cautious=%.2f revenue_avg=%.3f",
            "on" if self.mechanism_on else "off", self.cautious_frac,
            rows[-1]["revenue_avg"] if rows else float("nan"),
        )
        if self.unquotable:
            logger.warning(
                "insurance unquotable (mu + c >= 1) on %d of %d flights (cautious=%.2f, selector=%s); "
                "cautious passengers fell back to the no-mechanism valuation",
                self.unquotable, self.flights, self.cautious_frac, self.selector_name,
            )
        return pd.DataFrame(rows)
