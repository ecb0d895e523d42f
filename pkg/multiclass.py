from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from core import BetsError, InvalidForecastError

# 단체(simplex) 조건 검사 허용 오차
SIMPLEX_TOL = 1e-9


@dataclass(frozen=True)
class SimplexForecast:
    """
    K 개 결과에 대한 확률 벡터 mu 와 좌표별 반폭 c
    - mu + c, mu - c 모두 [0, 1]^K 안에 있어야 함 (정칙 조건)
    """
    mu: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        c = np.asarray(self.c, dtype=np.float64)
        if mu.ndim != 1 or mu.shape != c.shape:
            raise InvalidForecastError("mu and c must be vectors of the same length")
        if mu.size < 2:
            raise InvalidForecastError(f"need K >= 2 outcomes, got {mu.size}")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(c))):
            raise InvalidForecastError("non-finite simplex forecast")
        if np.any(mu < -SIMPLEX_TOL) or abs(mu.sum() - 1.0) > SIMPLEX_TOL:
            raise InvalidForecastError("mu must be a probability vector")
        if np.any(c < 0):
            raise InvalidForecastError("c must be nonnegative")
        if np.any(mu + c > 1.0 + SIMPLEX_TOL) or np.any(mu - c < -SIMPLEX_TOL):
            raise InvalidForecastError("mu +/- c must stay inside [0,1]^K")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "c", c)

    @property
    def K(self) -> int:
        return self.mu.size


def as_loss_vector(l, M: Optional[float] = None) -> np.ndarray:
    """l_i = l(a, Y=i) 벡터를 검증해 반환"""
    vec = np.asarray(l, dtype=np.float64)
    if vec.ndim != 1 or not np.all(np.isfinite(vec)):
        raise BetsError("loss vector must be a finite 1-D array")
    if M is not None and np.any(np.abs(vec) > M):
        raise BetsError(f"loss vector exceeds bound M={M}")
    return vec


def l_max_closed_form(f: SimplexForecast, l) -> Tuple[float, float]:
    """
    <mu, l> + min_gamma <c, |l - gamma 1|> 를 닫힌 형태로 계산
    - 내부 문제는 가중 L1 위치 문제로, 최솟값은 l_i 중 하나(가중 중앙값)에서 달성
    - 모든 l_i 후보에서 목적함수를 평가, 동점이면 작은 gamma 선택
    Returns:
        (L_max, gamma_star)
    """
    vec = as_loss_vector(l)
    if vec.size != f.K:
        raise BetsError(f"loss vector has {vec.size} entries, forecast has {f.K}")
    candidates = np.unique(vec)  # 정렬된 후보
    objective = np.abs(vec[None, :] - candidates[:, None]) @ f.c
    best = int(np.argmin(objective))  # 첫 최솟값 = 가장 작은 gamma
    return float(f.mu @ vec + objective[best]), float(candidates[best])


def optimal_payment_vector(f: SimplexForecast, l) -> np.ndarray:
    """증명의 구성 g = l - gamma* 1 (K=2 에서는 이진 최적 스테이크와 일치)"""
    vec = as_loss_vector(l)
    _, gamma = l_max_closed_form(f, vec)
    return vec - gamma


def multiclass_forecaster_loss(g, f: SimplexForecast, y: int) -> float:
    """결과 y 에서 예측자 손실 <g, e_y - mu> - <|g|, c>"""
    g = np.asarray(g, dtype=np.float64)
    if not 0 <= y < f.K:
        raise BetsError(f"outcome index {y} outside [0, {f.K})")
    onehot = np.zeros(f.K)
    onehot[y] = 1.0
    return float(g @ (onehot - f.mu) - np.abs(g) @ f.c)


def multiclass_payment_guarantee(f: SimplexForecast, l, mu_star) -> Tuple[float, float]:
    """
    실제 분포 mu_star 하의 베팅 포함 기대 총손실 L_pay 와 L_max
    - L_pay = <mu*, l> - (<g, mu* - mu> - <|g|, c>)
    """
    vec = as_loss_vector(l)
    mu_star = np.asarray(mu_star, dtype=np.float64)
    if mu_star.shape != f.mu.shape or np.any(mu_star < -SIMPLEX_TOL) or abs(mu_star.sum() - 1.0) > SIMPLEX_TOL:
        raise BetsError("mu_star must be a probability vector of length K")
    L_max, gamma = l_max_closed_form(f, vec)
    g = vec - gamma
    expected_bet = g @ (mu_star - f.mu) - np.abs(g) @ f.c
    return float(mu_star @ vec - expected_bet), L_max
