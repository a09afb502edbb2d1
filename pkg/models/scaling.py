"""
複合スケーリングのデータモデル
係数（α, β, γ, φ）と乗数（d, w, r）を管理するためのデータクラス
"""

from dataclasses import dataclass
from typing import Dict


CONSTRAINT_TARGET = 2.0
CONSTRAINT_TOLERANCE = 0.05


@dataclass(frozen=True)
class ScalingCoefficients:
    """複合スケーリング係数"""
    alpha: float
    beta: float
    gamma: float
    phi: int = 0

    def __post_init__(self):
        """設定値の検証"""
        for name in ("alpha", "beta", "gamma"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name}は1以上である必要があります: {getattr(self, name)}")
        if isinstance(self.phi, bool) or int(self.phi) != self.phi or self.phi < 0:
            raise ValueError(f"phiは0以上の整数である必要があります: {self.phi}")

    @property
    def constraint_product(self) -> float:
        """α·β²·γ²"""
        return self.alpha * self.beta ** 2 * self.gamma ** 2

    def satisfies_constraint(self, tolerance: float = CONSTRAINT_TOLERANCE) -> bool:
        """α·β²·γ² ≈ 2 の制約（上限 2 + tolerance）を満たすか"""
        return self.constraint_product <= CONSTRAINT_TARGET + tolerance + 1e-12

    def with_phi(self, phi: int) -> "ScalingCoefficients":
        return ScalingCoefficients(self.alpha, self.beta, self.gamma, phi)

    @classmethod
    def checked(cls, alpha: float, beta: float, gamma: float, phi: int = 0,
                tolerance: float = CONSTRAINT_TOLERANCE) -> "ScalingCoefficients":
        """制約を検証して作成（違反時はValueError）"""
        coefficients = cls(alpha, beta, gamma, phi)
        if not coefficients.satisfies_constraint(tolerance):
            raise ValueError(
                f"α·β²·γ² = {coefficients.constraint_product:.5f} が制約 "
                f"{CONSTRAINT_TARGET} + {tolerance} を超えています"
            )
        return coefficients

    def to_dict(self) -> Dict[str, float]:
        return {"alpha": self.alpha, "beta": self.beta, "gamma": self.gamma, "phi": self.phi}


@dataclass(frozen=True)
class ScalingMultipliers:
    """深さ・幅・解像度の乗数"""
    d: float = 1.0
    w: float = 1.0
    r: float = 1.0

    def __post_init__(self):
        for name in ("d", "w", "r"):
            if getattr(self, name) <= 0:
                raise ValueError(f"乗数{name}は正の値である必要があります: {getattr(self, name)}")


# ファミリー毎に固定された係数（α, β, γ）
FAMILY_COEFFICIENTS: Dict[str, ScalingCoefficients] = {
    "efficientnet": ScalingCoefficients(1.2, 1.1, 1.1),
    "wrn": ScalingCoefficients(1.1, 1.2, 1.1),
}
