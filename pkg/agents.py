from dataclasses import dataclass
from typing import Dict, Hashable, NamedTuple, Optional

import numpy as np

from core import BetsError, Forecast, LossSpec, decision_action, loss_bounds, optimal_stake


class Decision(NamedTuple):
    action: Hashable
    stake: float


class AgentPolicy:
    """
    (손실표, 예측) -> (행동, 스테이크) 를 정하는 의사결정 에이전트
    - 상태가 없으므로 여러 호출자가 동시에 사용 가능
    """
    name = "base"

    def decide(self, l: LossSpec, f: Forecast, mu_star: Optional[float] = None) -> Decision:
        raise NotImplementedError


class HonestInsured(AgentPolicy):
    """예측 mu 하의 Bayes 행동 + 최적 보험 스테이크 l(a,1) - l(a,0)"""
    name = "honest"

    def decide(self, l, f, mu_star=None):
        a = decision_action(l, f.mu)
        return Decision(a, optimal_stake(l, a))


class Uninsured(AgentPolicy):
    name = "uninsured"

    def decide(self, l, f, mu_star=None):
        return Decision(decision_action(l, f.mu), 0.0)


class WorstCase(AgentPolicy):
    """보험 구입을 전제로 최악의 경우 손실 L_max 가 가장 작은 행동"""
    name = "worst-case"

    def decide(self, l, f, mu_star=None):
        a = min(l.actions, key=lambda act: loss_bounds(l, act, f).L_max)
        return Decision(a, optimal_stake(l, a))


@dataclass(frozen=True)
class Adversarial(AgentPolicy):
    """
    mu* 를 부가 정보로 아는 공격자 (y 는 모름)
    - |mu* - mu| > c 이면 b = M sign(mu* - mu), 아니면 0
    - b(mu* - mu) - |b| c 를 b in [-M, M] 에서 최대화
    """
    M: float = 1.0
    action: Optional[Hashable] = None
    name = "adversarial"

    def __post_init__(self):
        if not self.M > 0:
            raise BetsError(f"stake bound must be positive, got {self.M}")

    def decide(self, l, f, mu_star=None):
        if mu_star is None:
            raise BetsError("adversarial agent needs mu_star side information")
        a = self.action if self.action is not None else l.actions[0]
        gap = mu_star - f.mu
        if abs(gap) > f.c:
            # gap = 0 이고 c < 0 이면 어느 부호든 M |c| 를 얻음
            return Decision(a, self.M if gap >= 0 else -self.M)
        return Decision(a, 0.0)


@dataclass(frozen=True)
class MaliciousConstant(AgentPolicy):
    """예측과 무관하게 고정 스테이크 b 를 거는 에이전트"""
    b: float
    M: float = 1.0
    action: Optional[Hashable] = None
    name = "constant"

    def __post_init__(self):
        if abs(self.b) > self.M:
            raise BetsError(f"fixed stake {self.b} exceeds bound M={self.M}")

    def decide(self, l, f, mu_star=None):
        a = self.action if self.action is not None else l.actions[0]
        return Decision(a, float(self.b))


def adversarial_expected_loss(M: float, mu: float, c: float, mu_star: float) -> float:
    """공격자가 얻는 라운드당 예측자 기대손실 max(0, M(|mu* - mu| - c))"""
    return max(0.0, M * (abs(mu_star - mu) - c))


POLICIES = {
    "honest": HonestInsured,
    "uninsured": Uninsured,
    "worst-case": WorstCase,
    "adversarial": Adversarial,
    "constant": MaliciousConstant,
}


class AgentMix:
    """
    라운드마다 가중치에 따라 정책 하나를 고름
    Args:
        weights: 정책 이름 -> 가중치 (예: {"honest": 0.8, "adversarial": 0.2})
        options: 정책 이름 -> 생성자 인자 (예: {"adversarial": {"M": 5}})
    """

    def __init__(self, weights: Dict[str, float], options: Optional[Dict[str, dict]] = None):
        if not weights:
            raise BetsError("agent mix is empty")
        unknown = sorted(set(weights) - set(POLICIES))
        if unknown:
            raise BetsError(f"unknown agent policies {unknown}")
        options = options or {}
        self.names = sorted(weights)
        probs = np.array([float(weights[n]) for n in self.names])
        if np.any(probs < 0) or probs.sum() <= 0:
            raise BetsError("agent mix weights must be nonnegative with positive sum")
        self.probs = probs / probs.sum()
        self.policies = []
        for n in self.names:
            try:
                self.policies.append(POLICIES[n](**options.get(n, {})))
            except TypeError as exc:
                raise BetsError(f"bad options for agent policy {n!r}: {exc}") from exc

    def choose(self, rng: np.random.Generator) -> AgentPolicy:
        if len(self.policies) == 1:
            return self.policies[0]
        return self.policies[int(rng.choice(len(self.policies), p=self.probs))]

    @property
    def all_nonnegative(self) -> bool:
        """모든 정책이 음수가 아닌 고정 스테이크만 거는지 여부"""
        return all(isinstance(p, MaliciousConstant) and p.b >= 0 for p in self.policies)
