import math
from dataclasses import dataclass, field
from typing import Hashable, Mapping, NamedTuple, Optional, Tuple

from typing_extensions import Literal

ForecastMode = Literal["strict", "exactness", "monotone", "market"]


class BetsError(ValueError):
    """라이브러리 전체 예외의 기반 클래스"""


class InvalidForecastError(BetsError):
    pass


class UnknownActionError(BetsError):
    pass


class ProtocolError(BetsError):
    """predict/observe 순서 위반 등 프로토콜 사용 오류"""


class UnquotableError(BetsError):
    pass


class ConfigError(BetsError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field_name = field_name


class CSVFormatError(BetsError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


def _require_finite(**values: float) -> None:
    for name, value in values.items():
        if not math.isfinite(value):
            raise BetsError(f"{name} must be finite, got {value!r}")


@dataclass(frozen=True)
class Forecast:
    """
    매 라운드 예측자가 공개하는 확률 mu 와 구간 반폭 c
    - strict: 0 <= c 이고 (mu - c, mu + c) 가 (0, 1) 안에 있어야 함
    - exactness: mu 는 (0, 1), c = c_hat + lambda 는 클램프하지 않음 (음수 가능)
    - monotone: c = 0 으로 접힌 예측, mu 는 유한값이기만 하면 됨
    - market: 항공 보험 해석, 음수 c 허용
    """
    mu: float
    c: float = 0.0
    mode: ForecastMode = "strict"

    def __post_init__(self):
        if not (math.isfinite(self.mu) and math.isfinite(self.c)):
            raise InvalidForecastError(f"non-finite forecast ({self.mu}, {self.c})")
        if self.mode == "strict":
            if self.c < 0 or not (0.0 < self.mu - self.c and self.mu + self.c < 1.0):
                raise InvalidForecastError(
                    f"strict forecast needs (mu-c, mu+c) inside (0,1): mu={self.mu}, c={self.c}"
                )
        elif self.mode in ("exactness", "market"):
            if not 0.0 < self.mu < 1.0:
                raise InvalidForecastError(f"mu must lie in (0,1), got {self.mu}")
        elif self.mode != "monotone":
            raise InvalidForecastError(f"unknown forecast mode {self.mode!r}")

    @property
    def lower(self) -> float:
        return self.mu - self.c

    @property
    def upper(self) -> float:
        return self.mu + self.c


@dataclass(frozen=True)
class LossSpec:
    """
    에이전트의 유한 행동 집합과 손실표 l(a, y), |l| <= M
    Args:
        losses: 행동 -> (l(a, 0), l(a, 1))
        M: 손실 상한 (생략 시 표의 최대 절댓값)
    """
    losses: Mapping[Hashable, Tuple[float, float]]
    M: Optional[float] = None
    actions: Tuple[Hashable, ...] = field(init=False)

    def __post_init__(self):
        if not self.losses:
            raise BetsError("LossSpec needs at least one action")
        table = {a: (float(l0), float(l1)) for a, (l0, l1) in self.losses.items()}
        for a, (l0, l1) in table.items():
            _require_finite(**{f"l({a},0)": l0, f"l({a},1)": l1})
        bound = max(max(abs(l0), abs(l1)) for l0, l1 in table.values())
        if self.M is None:
            # 모든 손실이 0 인 표는 상한 1 로 둔다
            M = bound if bound > 0 else 1.0
        else:
            M = float(self.M)
        if M <= 0 or bound > M:
            raise BetsError(f"losses exceed bound M={M} (max |l| = {bound})")
        object.__setattr__(self, "losses", table)
        object.__setattr__(self, "M", M)
        # 행동 id 의 사전순 정렬 (동점 처리 기준)
        object.__setattr__(self, "actions", tuple(sorted(table, key=_action_key)))

    def loss(self, a: Hashable, y: int) -> float:
        if a not in self.losses:
            raise UnknownActionError(f"unknown action {a!r}")
        if y not in (0, 1):
            raise BetsError(f"outcome must be 0 or 1, got {y!r}")
        return self.losses[a][y]


def _action_key(a: Hashable):
    # 숫자 id 는 값 순서, 그 외에는 문자열 순서
    if isinstance(a, (int, float)) and not isinstance(a, bool):
        return (0, a, "")
    return (1, 0, str(a))


@dataclass(frozen=True)
class BetFunction:
    """y=0, y=1 에서의 지불액 f0, f1 (예측자 입장의 손실)"""
    f0: float
    f1: float

    def __post_init__(self):
        _require_finite(f0=self.f0, f1=self.f1)

    def expectation(self, p: float) -> float:
        return p * self.f1 + (1.0 - p) * self.f0


@dataclass(frozen=True)
class RoundRecord:
    """베팅 프로토콜 한 라운드의 기록"""
    t: int
    forecast: Forecast
    action: Optional[Hashable]
    b: float
    y: int
    forecaster_payout: float
    agent_total_loss: float

    @property
    def agent_side_payment(self) -> float:
        # 에이전트가 받는 금액 = 예측자가 내는 금액
        return -self.forecaster_payout


class LossBounds(NamedTuple):
    L_min: float
    L_avg: float
    L_max: float


def forecaster_payout(b: float, f: Forecast, y: int) -> float:
    """
    베팅 프로토콜의 예측자 손실 b(y - mu) - |b| c 를 계산
    Args:
        b: 에이전트의 스테이크
        f: 해당 라운드의 예측
        y: 실현된 결과 (0 또는 1)
    Returns:
        예측자가 에이전트에게 지불하는 금액 (음수면 예측자가 받음)
    """
    _require_finite(b=b)
    if y not in (0, 1):
        raise BetsError(f"outcome must be 0 or 1, got {y!r}")
    return b * (y - f.mu) - abs(b) * f.c


def expected_loss(l: LossSpec, a: Hashable, p: float) -> float:
    return p * l.loss(a, 1) + (1.0 - p) * l.loss(a, 0)


def optimal_stake(l: LossSpec, a: Hashable) -> float:
    """손실표에서 보험 스테이크 b = l(a,1) - l(a,0) 를 계산 (|b| <= 2M)"""
    return l.loss(a, 1) - l.loss(a, 0)


def decision_action(l: LossSpec, mu: float) -> Hashable:
    """예측 확률 mu 하에서 기대손실 최소 행동 (동점이면 사전순 첫 행동)"""
    return min(l.actions, key=lambda a: expected_loss(l, a, mu))


def loss_bounds(l: LossSpec, a: Hashable, f: Forecast) -> LossBounds:
    """
    예측 구간 [mu - c, mu + c] 하에서의 최소/평균/최대 기대손실
    - 기대손실이 mu 에 대해 선형이므로 구간 끝점에서 닫힌 형태로 계산
    """
    l0, l1 = l.loss(a, 0), l.loss(a, 1)
    avg = f.mu * l1 + (1.0 - f.mu) * l0
    spread = f.c * abs(l1 - l0)
    return LossBounds(avg - spread, avg, avg + spread)


def agent_total_loss(l: LossSpec, a: Hashable, b: float, f: Forecast, y: int) -> float:
    return l.loss(a, y) - forecaster_payout(b, f, y)


def payment_guarantee(
    l: LossSpec, a: Hashable, f: Forecast, mu_star: float, b: Optional[float] = None
) -> Tuple[float, float]:
    """
    실제 확률 mu_star 하에서 베팅 지불을 포함한 기대 총손실 L_pay 와 L_max
    Args:
        b: 스테이크 (생략 시 optimal_stake)
    Returns:
        (L_pay, L_max), 최적 스테이크이면 두 값이 같음
    """
    if not 0.0 <= mu_star <= 1.0:
        raise BetsError(f"mu_star must lie in [0,1], got {mu_star}")
    if b is None:
        b = optimal_stake(l, a)
    expected_bet = b * (mu_star - f.mu) - abs(b) * f.c
    L_pay = expected_loss(l, a, mu_star) - expected_bet
    return L_pay, loss_bounds(l, a, f).L_max


def interval_contains(f: Forecast, mu_star: float) -> bool:
    return f.lower <= mu_star <= f.upper


def _require_strict(fc: Forecast) -> None:
    if fc.c < 0 or not (0.0 < fc.lower and fc.upper < 1.0):
        raise InvalidForecastError(
            f"bet acceptability needs an interval inside (0,1): mu={fc.mu}, c={fc.c}"
        )


def bet_is_acceptable(f: BetFunction, fc: Forecast) -> bool:
    """
    구간 내 모든 확률에서 기대 지불액이 0 이하인지 확인
    - 기대값이 확률에 대해 선형이므로 두 끝점만 검사
    - 최악의 경우 기대값이 정확히 0 인 베팅도 허용
    """
    _require_strict(fc)
    return f.expectation(fc.lower) <= 0.0 and f.expectation(fc.upper) <= 0.0


def dominating_stake(f: BetFunction, fc: Forecast) -> Optional[float]:
    """
    f(y) <= b(y - mu) - |b| c 를 만족하는 스테이크 b (허용 불가능하면 None)
    - f1 = b(1 - mu) - |b| c 를 b 에 대해 풀어 결정 (우변은 b 에 대해 증가 함수)
    """
    if not bet_is_acceptable(f, fc):
        return None
    if f.f1 >= 0:
        return f.f1 / (1.0 - fc.mu - fc.c)
    return f.f1 / (1.0 - fc.mu + fc.c)


def settle_round(
    t: int, l: Optional[LossSpec], a: Optional[Hashable], b: float, f: Forecast, y: int,
    payout: Optional[float] = None,
) -> RoundRecord:
    """
    한 라운드를 정산해 RoundRecord 로 반환 (손실표가 없으면 지불만 기록)
    Args:
        payout: 주어지면 forecaster_payout(b, f, y) 대신 이 값을 지불액으로 기록
    """
    if payout is None:
        payout = forecaster_payout(b, f, y)
    else:
        _require_finite(payout=payout)
        if y not in (0, 1):
            raise BetsError(f"outcome must be 0 or 1, got {y!r}")
    base_loss = l.loss(a, y) if l is not None else 0.0
    return RoundRecord(
        t=t,
        forecast=f,
        action=a,
        b=b,
        y=y,
        forecaster_payout=payout,
        agent_total_loss=base_loss - payout,
    )
