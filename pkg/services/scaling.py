"""
複合スケーリングサービス
乗数計算・解像度の丸め・設定のスケーリング・係数グリッド探索・スケールラダーを提供
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence

from models.architecture import ModelConfig, round_half_up
from models.scaling import (
    CONSTRAINT_TOLERANCE, FAMILY_COEFFICIENTS, ScalingCoefficients, ScalingMultipliers,
)
from services.architectures import UnsupportedFamilyError, count_config_params
from services.job_pool import JobPool


logger = logging.getLogger(__name__)

BASE_RESOLUTION = 60
MIN_RESOLUTION = 60
MAX_RESOLUTION = 120
RESOLUTION_STEP = 10

SCALABLE_FAMILIES = ("wrn", "efficientnet")
FAMILY_PREFIXES = {"wrn": "WRNB", "efficientnet": "EfficientNetB"}


def compound_multipliers(coefficients: ScalingCoefficients) -> ScalingMultipliers:
    """d=αᵠ, w=βᵠ, r=γᵠ"""
    phi = coefficients.phi
    return ScalingMultipliers(
        d=coefficients.alpha ** phi,
        w=coefficients.beta ** phi,
        r=coefficients.gamma ** phi,
    )


def resolve_resolution(base_px: int = BASE_RESOLUTION, gamma: float = 1.0, phi: int = 0) -> int:
    """base·γᵠ を10の倍数に四捨五入し [60, 120] に収める"""
    scaled = base_px * gamma ** phi
    rounded = round_half_up(scaled / RESOLUTION_STEP) * RESOLUTION_STEP
    return int(min(MAX_RESOLUTION, max(MIN_RESOLUTION, rounded)))


def scaled_name(base: ModelConfig, phi: int) -> str:
    """スケール後のモデル名（例: WRNB4-ECA）"""
    name = f"{FAMILY_PREFIXES[base.family]}{phi}{base.attention.suffix}"
    return f"{name}-GHOST" if base.ghost else name


def apply_scaling(base: ModelConfig, coefficients: ScalingCoefficients) -> ModelConfig:
    """
    係数で基本設定をスケーリング

    Args:
        base: 基本モデル設定（WRNまたはEfficientNet）
        coefficients: スケーリング係数

    Returns:
        スケーリング後の設定（φ=0の場合は基本設定と等しい）
    """
    if base.family not in SCALABLE_FAMILIES:
        raise UnsupportedFamilyError(f"複合スケーリングは{base.family}ファミリーに対応していません")
    if coefficients.phi == 0:
        return base
    multipliers = compound_multipliers(coefficients)
    return replace(
        base,
        depth_multiplier=base.depth_multiplier * multipliers.d,
        width_multiplier=base.width_multiplier * multipliers.w,
        resolution=resolve_resolution(base.resolution, coefficients.gamma, coefficients.phi),
        name=scaled_name(base, coefficients.phi),
    )


@dataclass
class GridCandidateResult:
    """グリッド探索の1候補の結果"""
    coefficients: ScalingCoefficients
    config: ModelConfig
    product: float
    param_count: int
    score: Optional[float] = None
    merged: List[ScalingCoefficients] = field(default_factory=list)
    error: Optional[str] = None

    def to_dict(self) -> Dict[str, object]:
        return {
            **self.coefficients.to_dict(),
            "product": round(self.product, 6),
            "param_count": self.param_count,
            "resolution": self.config.resolution,
            "score": self.score,
            "merged": [c.to_dict() for c in self.merged],
            "error": self.error,
        }


@dataclass
class GridSearchResult:
    """グリッド探索の結果（順位付き候補と除外された候補）"""
    ranked: List[GridCandidateResult] = field(default_factory=list)
    rejected: List[ScalingCoefficients] = field(default_factory=list)
    failed: List[GridCandidateResult] = field(default_factory=list)

    @property
    def best(self) -> Optional[GridCandidateResult]:
        return self.ranked[0] if self.ranked else None


def grid_search(candidates: Sequence[ScalingCoefficients],
                evaluate: Callable[[ModelConfig], float],
                base: ModelConfig,
                tolerance: float = CONSTRAINT_TOLERANCE,
                max_workers: int = 1) -> GridSearchResult:
    """
    係数グリッド探索

    制約違反の候補を除外し、同一設定に丸められる候補は積 α·β²·γ² が最小のものだけを残して評価する。
    順位はスコア降順、同点は積の昇順、さらにパラメータ数の昇順。

    Args:
        candidates: 係数候補
        evaluate: 設定→スコアの評価関数
        base: 基本モデル設定
        tolerance: 制約の許容量
        max_workers: 並行評価のワーカー数

    Returns:
        グリッド探索結果
    """
    result = GridSearchResult()
    survivors: Dict[ModelConfig, GridCandidateResult] = {}
    order: List[ModelConfig] = []

    for coefficients in candidates:
        if not coefficients.satisfies_constraint(tolerance):
            logger.info(
                f"制約違反のため除外: α={coefficients.alpha}, β={coefficients.beta}, γ={coefficients.gamma} "
                f"(積={coefficients.constraint_product:.5f})"
            )
            result.rejected.append(coefficients)
            continue
        config = apply_scaling(base, coefficients)
        existing = survivors.get(config)
        if existing is None:
            survivors[config] = GridCandidateResult(
                coefficients=coefficients,
                config=config,
                product=coefficients.constraint_product,
                param_count=0,
            )
            order.append(config)
            continue
        if coefficients.constraint_product < existing.product:
            existing.merged.append(existing.coefficients)
            existing.coefficients = coefficients
            existing.product = coefficients.constraint_product
        else:
            existing.merged.append(coefficients)
        logger.debug(f"同一設定に丸められる候補を統合: {config.name}")

    entries = [survivors[config] for config in order]
    for entry in entries:
        entry.param_count = count_config_params(entry.config)

    outcomes = JobPool(max_workers=max_workers, name="grid").map(
        lambda entry: evaluate(entry.config),
        entries,
        key=lambda entry: f"{entry.coefficients.alpha}/{entry.coefficients.beta}/{entry.coefficients.gamma}",
    )
    scored = []
    for entry, outcome in zip(entries, outcomes):
        if outcome.ok:
            entry.score = float(outcome.value)
            scored.append(entry)
        else:
            entry.error = outcome.error
            result.failed.append(entry)

    result.ranked = sorted(scored, key=lambda e: (-e.score, e.product, e.param_count))
    logger.info(
        f"グリッド探索完了: 評価{len(scored)}件, 制約違反{len(result.rejected)}件, "
        f"統合{sum(len(e.merged) for e in entries)}件"
    )
    return result


@dataclass
class LadderRow:
    """スケールラダーの1行"""
    name: str
    phi: int
    multipliers: ScalingMultipliers
    resolution: int
    param_count: int
    config: ModelConfig

    def to_row(self) -> Dict[str, object]:
        return {
            "model": self.name,
            "phi": self.phi,
            "depth": f"{self.multipliers.d:.4f}",
            "width": f"{self.multipliers.w:.4f}",
            "resolution_multiplier": f"{self.multipliers.r:.4f}",
            "resolution": self.resolution,
            "params": self.param_count,
        }


def scale_ladder(base: ModelConfig, coefficients: Optional[ScalingCoefficients] = None,
                 phis: Sequence[int] = range(8)) -> List[LadderRow]:
    """
    B0〜B7のスケールラダーを作成

    Args:
        base: 基本モデル設定
        coefficients: 係数（省略時はファミリーの既定値）
        phis: φの範囲

    Returns:
        ラダーの行リスト
    """
    if base.family not in SCALABLE_FAMILIES:
        raise UnsupportedFamilyError(f"複合スケーリングは{base.family}ファミリーに対応していません")
    coefficients = coefficients or FAMILY_COEFFICIENTS[base.family]
    rows = []
    for phi in phis:
        scaled = coefficients.with_phi(phi)
        config = apply_scaling(base, scaled)
        name = config.name if phi > 0 else (base.name or scaled_name(base, 0))
        rows.append(LadderRow(
            name=name,
            phi=phi,
            multipliers=compound_multipliers(scaled),
            resolution=config.resolution,
            param_count=count_config_params(config),
            config=config,
        ))
        logger.debug(f"ラダー行: {name} 解像度{config.resolution} パラメータ{rows[-1].param_count:,}")
    return rows
