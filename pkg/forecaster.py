import json
import logging
import math
from typing import Dict, Hashable, Optional, Tuple

import numpy as np
import pandas as pd
from typing_extensions import Literal

from core import BetsError, Forecast, LossSpec, ProtocolError, RoundRecord, forecaster_payout, settle_round
from swapregret import SwapRegretState

logger = logging.getLogger(__name__)

# 예측 확률 클램프 폭
EPS_P = 1e-6
LEAKY_SLOPE = 0.01
INIT_SCALE = 0.1
SNAPSHOT_VERSION = 1
# monotone 모드에서 mu' 의 유한성 보장용 범위 (클립된 selector 에서는 닿지 않음)
MONOTONE_RANGE = (-2.0, 3.0)

Arch = Literal["linear", "mlp"]
Mode = Literal["exactness", "strict", "monotone"]


def horizon_bins(T: int) -> int:
    """K = max(1, ceil((T / log T)^(1/4))), 자연로그"""
    if T < 2:
        raise BetsError(f"horizon T must be >= 2, got {T}")
    return max(1, math.ceil((T / math.log(T)) ** 0.25))


class ScalarModel:
    """
    특징 벡터 -> 실수 하나를 내는 모델 (선형 또는 은닉층 1개의 leaky ReLU 신경망)
    - forward 는 클램프 전 raw 출력을 반환
    - backward 는 raw 출력에 대한 upstream 미분을 받아 파라미터 기울기를 반환
    """

    def __init__(self, d: int, arch: Arch = "mlp", hidden: int = 32,
                 rng: Optional[np.random.Generator] = None, init: str = "uniform"):
        if d < 1:
            raise BetsError(f"feature dimension must be >= 1, got {d}")
        if arch == "mlp" and hidden < 1:
            raise BetsError(f"hidden width must be >= 1, got {hidden}")
        if arch not in ("linear", "mlp"):
            raise BetsError(f"unknown model family {arch!r}")
        self.d = d
        self.arch = arch
        self.hidden = hidden
        shapes = {"w": (d,), "b": (1,)} if arch == "linear" else {
            "W1": (hidden, d), "b1": (hidden,), "w2": (hidden,), "b2": (1,)
        }
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params: Dict[str, np.ndarray] = {}
        for name, shape in shapes.items():
            if init == "zeros":
                self.params[name] = np.zeros(shape)
            else:
                self.params[name] = rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)

    def forward(self, x: np.ndarray) -> Tuple[float, dict]:
        if x.shape != (self.d,):
            raise BetsError(f"expected feature vector of dimension {self.d}, got shape {x.shape}")
        p = self.params
        if self.arch == "linear":
            return float(p["w"] @ x + p["b"][0]), {"x": x}
        h = p["W1"] @ x + p["b1"]
        a = np.where(h > 0, h, LEAKY_SLOPE * h)
        return float(p["w2"] @ a + p["b2"][0]), {"x": x, "h": h, "a": a}

    def backward(self, cache: dict, upstream: float) -> Dict[str, np.ndarray]:
        x = cache["x"]
        if self.arch == "linear":
            return {"w": upstream * x, "b": np.array([upstream])}
        p = self.params
        dh = upstream * p["w2"] * np.where(cache["h"] > 0, 1.0, LEAKY_SLOPE)
        return {
            "W1": np.outer(dh, x),
            "b1": dh,
            "w2": upstream * cache["a"],
            "b2": np.array([upstream]),
        }

    def step(self, grads: Dict[str, np.ndarray], eta: float) -> None:
        for name, g in grads.items():
            self.params[name] -= eta * g

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.params.values()])

    def set_flat(self, vector: np.ndarray) -> None:
        offset = 0
        for name, v in self.params.items():
            self.params[name] = np.asarray(vector[offset:offset + v.size], dtype=np.float64).reshape(v.shape)
            offset += v.size


class BasePredictor:
    """
    온라인 SGD 기반 예측기: mu 모델(theta)과 c 모델(phi)
    - mu 손실: (mu_theta(x) - y)^2
    - c 손실: (b (y - mu_hat) - |b| c_phi(x))^2 / b^2 = (sign(b) (y - mu_hat) - c_phi(x))^2
      (보폭은 |b| 와 무관)
    - 기울기는 클램프 전 raw 출력 기준 (클램프는 예측 시에만 적용)
    """

    def __init__(self, d: int, eta: float = 0.01, arch: Arch = "mlp", hidden: int = 32,
                 seed: int = 0, init: str = "uniform"):
        if not eta >= 0:
            raise BetsError(f"learning rate must be nonnegative, got {eta}")
        self.eta = eta
        rng_mu, rng_c = (np.random.Generator(np.random.PCG64(s))
                         for s in np.random.SeedSequence(seed).spawn(2))
        self.theta = ScalarModel(d, arch, hidden, rng_mu, init)
        self.phi = ScalarModel(d, arch, hidden, rng_c, init)

    @property
    def d(self) -> int:
        return self.theta.d

    def predict(self, x) -> Tuple[float, float]:
        """(mu_hat, c_hat) = (clamp(raw mu, EPS_P, 1-EPS_P), clamp(raw c, 0, 1))"""
        x = np.asarray(x, dtype=np.float64)
        mu_raw, _ = self.theta.forward(x)
        c_raw, _ = self.phi.forward(x)
        return min(max(mu_raw, EPS_P), 1.0 - EPS_P), min(max(c_raw, 0.0), 1.0)

    def mu_loss(self, x, y: int) -> float:
        raw, _ = self.theta.forward(np.asarray(x, dtype=np.float64))
        return (raw - y) ** 2

    def c_loss(self, x, y: int, b: float, mu_hat: float) -> float:
        """b^2 로 나눈 c 손실, b = 0 이면 0"""
        if b == 0:
            return 0.0
        raw, _ = self.phi.forward(np.asarray(x, dtype=np.float64))
        return (math.copysign(1.0, b) * (y - mu_hat) - raw) ** 2

    def gradients(self, x, y: int, b: float, mu_hat: float):
        """두 손실의 해석적 기울기 (theta 기울기, phi 기울기)"""
        x = np.asarray(x, dtype=np.float64)
        mu_raw, mu_cache = self.theta.forward(x)
        grad_theta = self.theta.backward(mu_cache, 2.0 * (mu_raw - y))
        c_raw, c_cache = self.phi.forward(x)
        if b == 0:
            return grad_theta, self.phi.backward(c_cache, 0.0)
        residual = math.copysign(1.0, b) * (y - mu_hat) - c_raw
        grad_phi = self.phi.backward(c_cache, -2.0 * residual)
        return grad_theta, grad_phi

    def update(self, x, y: int, b: float, mu_hat: float) -> None:
        grad_theta, grad_phi = self.gradients(x, y, b, mu_hat)
        self.theta.step(grad_theta, self.eta)
        if b != 0:
            self.phi.step(grad_phi, self.eta)


class LambdaSelector:
    """lambda 보정값 선택기의 공통 인터페이스"""
    name = "none"

    def select(self) -> float:
        return 0.0

    def update(self, r: float, s: float, payout_without_lambda: float, abs_b: float) -> None:
        pass

    def state_dict(self) -> dict:
        return {"name": self.name}

    def load_state_dict(self, state: dict) -> None:
        pass


class NoneSelector(LambdaSelector):
    name = "none"


class SwapSelector(LambdaSelector):
    """구간별 FTL + 고정점 순환 (swap regret 최소화)"""
    name = "swap"

    def __init__(self, K: int, seed: int = 0):
        self.state = SwapRegretState(K, seed=seed)
        self._chosen: Optional[int] = None

    def select(self) -> float:
        lam, self._chosen = self.state.select_lambda()
        return lam

    def update(self, r, s, payout_without_lambda, abs_b):
        self.state.observe(self._chosen, r, s)
        self._chosen = None

    def state_dict(self) -> dict:
        return {"name": self.name, "swap": self.state.state_dict(), "chosen": self._chosen}

    def load_state_dict(self, state: dict) -> None:
        self.state = SwapRegretState.from_state_dict(state["swap"])
        self._chosen = state["chosen"]


class StandardRegretSelector(SwapSelector):
    """K=1: 전체 이력에 대한 FTL, [-1, 1) 로 클립"""
    name = "standard"

    def __init__(self, K: int = 1, seed: int = 0):
        super().__init__(1, seed=seed)


class NaiveBestResponseSelector(LambdaSelector):
    """
    과거 라운드에 적용했다면 누적 지불액을 0 으로 만들었을 lambda (클립 없음)
    lambda = sum(b (y - mu) - |b| c_hat) / sum |b|
    """
    name = "naive-br"

    def __init__(self, K: int = 1, seed: int = 0):
        self.payout_sum = 0.0
        self.stake_sum = 0.0

    def select(self) -> float:
        if self.stake_sum == 0.0:
            return 0.0
        return self.payout_sum / self.stake_sum

    def update(self, r, s, payout_without_lambda, abs_b):
        self.payout_sum += payout_without_lambda
        self.stake_sum += abs_b

    def state_dict(self) -> dict:
        return {"name": self.name, "payout_sum": self.payout_sum, "stake_sum": self.stake_sum}

    def load_state_dict(self, state: dict) -> None:
        self.payout_sum = float(state["payout_sum"])
        self.stake_sum = float(state["stake_sum"])


SELECTORS = {
    "swap": SwapSelector,
    "none": NoneSelector,
    "standard": StandardRegretSelector,
    "naive-br": NaiveBestResponseSelector,
}


def make_selector(name: str, K: int, seed: int = 0) -> LambdaSelector:
    if name not in SELECTORS:
        raise BetsError(f"unknown selector {name!r} (choose from {sorted(SELECTORS)})")
    if name == "none":
        return NoneSelector()
    return SELECTORS[name](K, seed=seed)


def correction_inputs(b: float, mu_hat: float, y: int, c_hat: float) -> Tuple[float, float]:
    """
    lambda 선택기에 줄 (r_t, s_t)
    r = (b / sqrt|b|)(y - mu_hat) - sqrt|b| c_hat, s = -sqrt|b|
    - b = 0 이면 (0, 0)
    - s (r + s lambda) 는 c = c_hat + lambda 일 때 예측자 지불액의 음수
    """
    if b == 0:
        return 0.0, 0.0
    root = math.sqrt(abs(b))
    return (b / root) * (y - mu_hat) - root * c_hat, -root


class ExactForecaster:
    """
    기반 예측기 위에 lambda 보정을 얹어 누적 지불액을 0 으로 수렴시키는 예측자
    - predict 와 observe 를 번갈아 호출
    - exactness: c = c_hat + lambda (클램프 없음, 음수 가능)
    - monotone: mu' = mu_hat + (c_hat + lambda), c = 0 (모든 스테이크가 0 이상일 때)
    - strict: (mu - c, mu + c) 가 (0, 1) 안에 들도록 c 를 클램프 (정확성 보장 없음)
    """

    def __init__(self, base: BasePredictor, selector: LambdaSelector, T: int,
                 K: Optional[int] = None, mode: Mode = "exactness"):
        if mode not in ("exactness", "strict", "monotone"):
            raise BetsError(f"unknown forecaster mode {mode!r}")
        self.base = base
        self.selector = selector
        self.T = T
        self.K = K if K is not None else horizon_bins(T)
        self.mode = mode
        self.t = 0
        self.cum_payout = 0.0
        self._pending: Optional[dict] = None
        self._last: Optional[dict] = None

    @classmethod
    def from_horizon(cls, d: int, T: int, selector: str = "swap", mode: Mode = "exactness",
                     eta: float = 0.01, arch: Arch = "mlp", hidden: int = 32, seed: int = 0,
                     K: Optional[int] = None, init: str = "uniform") -> "ExactForecaster":
        """T 로부터 K 를 정하고 기반 예측기와 선택기를 시드에서 만든다"""
        K = K if K is not None else horizon_bins(T)
        base_seed, selector_seed = np.random.SeedSequence(seed).generate_state(2)
        base = BasePredictor(d, eta=eta, arch=arch, hidden=hidden, seed=int(base_seed), init=init)
        return cls(base, make_selector(selector, K, seed=int(selector_seed)), T, K=K, mode=mode)

    def predict(self, x) -> Forecast:
        if self._pending is not None:
            raise ProtocolError("predict called twice without observe")
        x = np.asarray(x, dtype=np.float64)
        mu_hat, c_hat = self.base.predict(x)
        lam = self.selector.select()
        clipped = False
        if self.mode == "exactness":
            forecast = Forecast(mu_hat, c_hat + lam, mode="exactness")
        elif self.mode == "monotone":
            lo, hi = MONOTONE_RANGE
            shifted = mu_hat + c_hat + lam
            clipped = not lo <= shifted <= hi
            forecast = Forecast(min(max(shifted, lo), hi), 0.0, mode="monotone")
        else:
            width = min(mu_hat, 1.0 - mu_hat) * (1.0 - 1e-9)
            forecast = Forecast(mu_hat, min(max(c_hat + lam, 0.0), width), mode="strict")
        self._pending = {"x": x, "mu_hat": mu_hat, "c_hat": c_hat, "lam": lam, "forecast": forecast,
                         "clipped": clipped}
        return forecast

    @property
    def last_round(self) -> Optional[dict]:
        """직전 라운드의 내부 값 (mu_hat, c_hat, lam, r, s)"""
        return self._last

    def observe(self, x, y: int, b: float, action: Optional[Hashable] = None,
                loss_spec: Optional[LossSpec] = None) -> RoundRecord:
        """
        라운드 결과를 반영하고 RoundRecord 를 반환
        Args:
            x: predict 에 넘긴 것과 같은 특징 벡터
            y: 실현된 결과
            b: 에이전트 스테이크
            action, loss_spec: 에이전트 총손실 기록용 (선택)
        """
        if self._pending is None:
            raise ProtocolError("observe called before predict")
        pending = self._pending
        x = np.asarray(x, dtype=np.float64)
        if not np.array_equal(x, pending["x"]):
            raise ProtocolError("observe features differ from the predicted round")
        if self.mode == "monotone" and b < 0:
            raise ProtocolError(f"monotone mode requires nonnegative stakes, got {b}")
        self.t += 1
        mu_hat, c_hat = pending["mu_hat"], pending["c_hat"]
        payout = None
        if self.mode == "monotone" and not pending["clipped"]:
            # b >= 0 에서 b(y - mu') 와 같은 값을 exactness 식 그대로 계산해 비트 단위로 일치시킴
            payout = forecaster_payout(b, Forecast(mu_hat, c_hat + pending["lam"], mode="exactness"), y)
        record = settle_round(self.t, loss_spec, action, b, pending["forecast"], y, payout=payout)
        r, s = correction_inputs(b, mu_hat, y, c_hat)
        self.selector.update(r, s, b * (y - mu_hat) - abs(b) * c_hat, abs(b))
        self.base.update(x, y, b, mu_hat)
        self.cum_payout += record.forecaster_payout
        self._last = dict(pending, r=r, s=s)
        self._pending = None
        return record

    def save(self, path: str) -> None:
        """
        전체 상태를 버전이 붙은 .npz 스냅샷으로 저장
        - 파라미터는 이름이 붙은 배열, 나머지는 JSON 문자열
        """
        if self._pending is not None:
            raise ProtocolError("cannot snapshot between predict and observe")
        arrays = {f"theta.{k}": v for k, v in self.base.theta.params.items()}
        arrays.update({f"phi.{k}": v for k, v in self.base.phi.params.items()})
        meta = {
            "d": self.base.d, "arch": self.base.theta.arch, "hidden": self.base.theta.hidden,
            "eta": self.base.eta, "T": self.T, "K": self.K, "mode": self.mode, "t": self.t,
            "cum_payout": self.cum_payout, "selector": self.selector.state_dict(),
        }
        with open(path, "wb") as f:
            np.savez(f, format_version=np.array(SNAPSHOT_VERSION), meta=np.array(json.dumps(meta)), **arrays)

    @classmethod
    def load(cls, path: str) -> "ExactForecaster":
        with np.load(path, allow_pickle=False) as archive:
            version = int(archive["format_version"])
            if version != SNAPSHOT_VERSION:
                raise BetsError(f"unsupported snapshot version {version}")
            meta = json.loads(str(archive["meta"]))
            base = BasePredictor(meta["d"], eta=meta["eta"], arch=meta["arch"], hidden=meta["hidden"])
            for name in base.theta.params:
                base.theta.params[name] = archive[f"theta.{name}"].copy()
            for name in base.phi.params:
                base.phi.params[name] = archive[f"phi.{name}"].copy()
        selector = make_selector(meta["selector"]["name"], meta["K"])
        selector.load_state_dict(meta["selector"])
        obj = cls(base, selector, meta["T"], K=meta["K"], mode=meta["mode"])
        obj.t = meta["t"]
        obj.cum_payout = meta["cum_payout"]
        return obj


def run_protocol(stream, tasks, agents, forecaster: ExactForecaster, T: int,
                 rng: np.random.Generator) -> pd.DataFrame:
    """
    베팅 프로토콜을 T 라운드 실행해 라운드별 기록을 DataFrame 으로 반환
    Args:
        stream: 자연(nature) 스트림 (x, mu*, y, z 를 내는 반복자)
        tasks: DecisionTaskSpec (z 로부터 손실표 생성)
        agents: AgentMix (라운드마다 정책 하나를 뽑음)
        forecaster: ExactForecaster
        rng: 에이전트 선택용 생성기
    """
    rows = []
    for t in range(1, T + 1):
        try:
            nature = next(stream)
        except StopIteration:
            logger.info("stream exhausted after %d rounds", t - 1)
            break
        forecast = forecaster.predict(nature.x)
        loss_spec = tasks.sample_task(nature.z)
        policy = agents.choose(rng)
        decision = policy.decide(loss_spec, forecast, nature.mu_star)
        record = forecaster.observe(nature.x, nature.y, decision.stake,
                                    action=decision.action, loss_spec=loss_spec)
        last = forecaster.last_round
        rows.append({
            "t": record.t,
            "mu_t": forecast.mu,
            "c_t": forecast.c,
            "c_hat_t": last["c_hat"],
            "lambda_t": last["lam"],
            "mu_star_t": np.nan if nature.mu_star is None else nature.mu_star,
            "b_t": decision.stake,
            "y_t": nature.y,
            "payout_t": record.forecaster_payout,
            "cum_payout": forecaster.cum_payout,
            "agent_total_loss_t": record.agent_total_loss,
            "agent": policy.name,
        })
        if t % 10000 == 0:
            logger.debug("round %d: cumulative payout %.6f", t, forecaster.cum_payout)
    return pd.DataFrame(rows)
