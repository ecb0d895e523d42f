import json
import logging
import math
import os
from dataclasses import asdict, dataclass, is_dataclass
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
import pandas as pd
from dotenv import load_dotenv

__version__ = "0.3.0"

# 난수 생성기 알고리즘 (매니페스트에 기록)
RNG_ALGORITHM = "PCG64"

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Settings:
    """
    환경 변수(.env 포함)에서 읽어오는 실행 설정
    - 실험별 설정(ExperimentConfig)의 기본값으로 사용됨
    """
    log_level: str = "INFO"
    output_dir: str = "."
    eta: float = 0.01
    hidden: int = 32
    stride_rows: int = 2000


def load_settings() -> Settings:
    """
    .env 파일과 환경 변수에서 설정값을 로드하는 함수
    Returns:
        Settings 인스턴스 (설정되지 않은 값은 기본값 사용)
    """
    # 환경 변수 로드 (.env 파일에서 설정값 로드)
    load_dotenv()
    defaults = Settings()
    return Settings(
        log_level=os.getenv("BETS_LOG_LEVEL", defaults.log_level).upper(),
        output_dir=os.getenv("BETS_OUTPUT_DIR", defaults.output_dir),
        eta=float(os.getenv("BETS_ETA", defaults.eta)),
        hidden=int(os.getenv("BETS_HIDDEN", defaults.hidden)),
        stride_rows=int(os.getenv("BETS_STRIDE_ROWS", defaults.stride_rows)),
    )


def setup_logging(level: str = "INFO") -> None:
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def make_rng(seed: int) -> np.random.Generator:
    """시드에서 PCG64 생성기를 만드는 함수 (벽시계 기반 기본값 없음)"""
    if seed is None:
        raise ValueError("seed is mandatory")
    return np.random.Generator(np.random.PCG64(int(seed)))


def spawn_rngs(seed: int, n: int) -> list:
    """하나의 시드에서 서로 독립적인 n개의 생성기를 파생"""
    children = np.random.SeedSequence(int(seed)).spawn(n)
    return [np.random.Generator(np.random.PCG64(child)) for child in children]


def thinning_stride(T: int, max_rows: int = 2000) -> int:
    return max(1, T // max_rows)


def scaled_exactness(avg_payout: float, t: int) -> float:
    """
    (평균 지불액)^2 * sqrt(t / log t) 를 계산
    t < 2 이면 log t 가 0 이하이므로 NaN 반환
    """
    if t < 2:
        return float("nan")
    return avg_payout ** 2 * math.sqrt(t / math.log(t))


def _jsonable(value: Any) -> Any:
    if is_dataclass(value):
        return _jsonable(asdict(value))
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    return value


def write_csv(frame: pd.DataFrame, path: str) -> Path:
    """
    결과 DataFrame 을 CSV(RFC-4180 따옴표 규칙)로 저장
    Args:
        frame: 저장할 DataFrame
        path: 출력 경로 (상위 디렉터리가 없으면 생성)
    Returns:
        저장된 파일 경로
    """
    out = Path(path)
    if out.parent and not out.parent.exists():
        out.parent.mkdir(parents=True, exist_ok=True)
    # float_format 고정: 같은 설정 + 시드 => 바이트 단위로 같은 출력
    frame.to_csv(out, index=False, float_format="%.12g", lineterminator="\n")
    logger.info("wrote %d rows to %s", len(frame), out)
    return out


def manifest_path(out_path: str) -> Path:
    return Path(str(out_path) + ".manifest.json")


def write_manifest(out_path: str, config: Any, extra: Optional[Dict[str, Any]] = None) -> Path:
    """
    재현에 필요한 정보를 사이드카 매니페스트(JSON)로 저장
    - 설정 에코, 코드 버전, 시드, 난수 알고리즘
    """
    payload = {
        "code_version": __version__,
        "rng_algorithm": RNG_ALGORITHM,
        "config": _jsonable(config),
    }
    if is_dataclass(config) and hasattr(config, "seed"):
        payload["seed"] = config.seed
    if extra:
        payload.update(_jsonable(extra))
    path = manifest_path(out_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, ensure_ascii=False, indent=2, sort_keys=True)
    return path


def write_report(path: str, report: Dict[str, Any]) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as f:
        json.dump(_jsonable(report), f, ensure_ascii=False, indent=2)
    return out
