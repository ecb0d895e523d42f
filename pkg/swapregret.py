import json
import math
from dataclasses import dataclass
from typing import Iterable, List, Optional, Tuple

import numpy as np

from core import BetsError, ProtocolError

# [-1, 1) 반열린 구간의 표현 가능한 상한
EPS_OPEN = 2.0 ** -32


@dataclass
class BinStats:
    """
    구간에 배정된 관측의 충분통계량
    - 이차 손실 (r + s lambda)^2 의 최소점은 sum(r s), sum(s^2) 에만 의존
    """
    sum_rs: float = 0.0
    sum_ss: float = 0.0
    count: int = 0

    def add(self, r: float, s: float) -> None:
        self.sum_rs += r * s
        self.sum_ss += s * s
        self.count += 1


def bin_index(lam: float, K: int) -> int:
    """[-1, 1] 을 K 개 등간격 구간으로 나눈 인덱스 (오른쪽 끝은 마지막 구간)"""
    return min(int(math.floor((lam + 1.0) * K / 2.0)), K - 1)


class SwapRegretState:
    """
    구간별 follow-the-leader 와 고정점 순환 탐지로 swap regret 을 최소화하는 상태
    - select_lambda 와 observe 를 엄격히 번갈아 호출해야 함
    - 빈 구간의 최적값은 0
    """

    def __init__(self, K: int, seed: int = 0, rng: Optional[np.random.Generator] = None):
        if K < 1:
            raise BetsError(f"K must be >= 1, got {K}")
        self.K = K
        self.bins: List[BinStats] = [BinStats() for _ in range(K)]
        # v^0 = 0 이 속한 구간에서 시작
        self.prev_bin = bin_index(0.0, K)
        self.rng = rng if rng is not None else np.random.Generator(np.random.PCG64(seed))
        self._pending: Optional[int] = None
        self.last_cycle: List[int] = []

    def bin_optimum(self, k: int) -> float:
        if not 0 <= k < self.K:
            raise IndexError(f"bin {k} outside [0, {self.K})")
        stats = self.bins[k]
        if stats.sum_ss <= 0.0:
            return 0.0
        lam = -stats.sum_rs / stats.sum_ss
        return min(max(lam, -1.0), 1.0 - EPS_OPEN)

    def fixed_point_cycle(self, start: Optional[int] = None) -> List[int]:
        """
        v -> bin_index(bin_optimum(v)) 를 반복해 처음 재방문한 구간부터의 순환을 반환
        - 구간 수가 유한하므로 K+1 단계 안에 종료
        """
        v = self.prev_bin if start is None else start
        visited: List[int] = []
        while v not in visited:
            visited.append(v)
            v = bin_index(self.bin_optimum(v), self.K)
        return visited[visited.index(v):]

    def select_lambda(self) -> Tuple[float, int]:
        """
        이번 라운드의 lambda 와 선택된 구간을 반환
        - 순환이 길이 1 이면 난수를 소비하지 않음
        """
        if self._pending is not None:
            raise ProtocolError("select_lambda called twice without observe")
        cycle = self.fixed_point_cycle()
        if len(cycle) == 1:
            chosen = cycle[0]
        else:
            chosen = cycle[int(self.rng.integers(len(cycle)))]
        self.last_cycle = cycle
        self.prev_bin = chosen
        self._pending = chosen
        return self.bin_optimum(chosen), chosen

    def observe(self, chosen_bin: int, r: float, s: float) -> None:
        if self._pending is None or chosen_bin != self._pending:
            raise ProtocolError(
                f"observe for bin {chosen_bin} does not follow select_lambda (pending={self._pending})"
            )
        self.bins[chosen_bin].add(r, s)
        self._pending = None

    def state_dict(self) -> dict:
        return {
            "K": self.K,
            "bins": [[b.sum_rs, b.sum_ss, b.count] for b in self.bins],
            "prev_bin": self.prev_bin,
            "pending": self._pending,
            "rng_state": json.dumps(self.rng.bit_generator.state),
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> "SwapRegretState":
        obj = cls(int(state["K"]))
        obj.bins = [BinStats(float(rs), float(ss), int(n)) for rs, ss, n in state["bins"]]
        obj.prev_bin = int(state["prev_bin"])
        obj._pending = None if state["pending"] is None else int(state["pending"])
        obj.rng.bit_generator.state = json.loads(state["rng_state"])
        return obj


def measure_discretized_swap_regret(history: Iterable[Tuple[float, float, float]], K: int) -> float:
    """
    이산화된 swap regret 측정
    sum_t (r_t + s_t lambda_t)^2 - sum_k inf_lambda sum_{t: lambda_t in I_k} (r_t + s_t lambda)^2
    - 비교 대상의 inf 는 실수 전체에서 취함 (클리핑 없음)
    Args:
        history: (lambda_t, r_t, s_t) 시퀀스
        K: 구간 수
    """
    arr = np.asarray(list(history), dtype=np.float64).reshape(-1, 3)
    if arr.shape[0] == 0:
        return 0.0
    lam, r, s = arr[:, 0], arr[:, 1], arr[:, 2]
    idx = np.minimum(np.floor((lam + 1.0) * K / 2.0).astype(np.int64), K - 1)
    played = np.sum((r + s * lam) ** 2)
    sum_rr = np.bincount(idx, weights=r * r, minlength=K)
    sum_rs = np.bincount(idx, weights=r * s, minlength=K)
    sum_ss = np.bincount(idx, weights=s * s, minlength=K)
    safe_ss = np.where(sum_ss > 0, sum_ss, 1.0)
    best = np.where(sum_ss > 0, sum_rr - sum_rs ** 2 / safe_ss, sum_rr)
    return float(played - best.sum())


def discretization_gap(s: Iterable[float], K: int) -> float:
    """연속 비교 대상으로 바꿀 때의 추가 항 sum s_t^2 (2/K)^2"""
    s = np.asarray(list(s), dtype=np.float64)
    return float(np.sum(s ** 2) * (2.0 / K) ** 2)


def fourth_power_ratio_sum(betas: Iterable[float]) -> float:
    """sum_t beta_t^4 / sum_{tau <= t} beta_tau^2 (분모가 0 인 항은 0)"""
    b2 = np.asarray(list(betas), dtype=np.float64) ** 2
    denom = np.cumsum(b2)
    mask = denom > 0
    return float(np.sum(b2[mask] ** 2 / denom[mask]))


def average_correction_sq(r, s, lam) -> float:
    """(T^-1 sum s_t (r_t + s_t lambda_t))^2"""
    r, s, lam = (np.asarray(v, dtype=np.float64) for v in (r, s, lam))
    if r.size == 0:
        return 0.0
    return float(np.mean(s * (r + s * lam)) ** 2)
