"""Laplace mechanism for model updates, sensitivity policies, and the excess-risk bound."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from dpfed.errors import PrivacyError
from dpfed.model import ParamVector

_TWO_POW_M52 = 2.0**-52


@dataclass(frozen=True)
class PaperFaithful:
    """Sensitivity is the realized L2 norm of each update (data-dependent)."""


@dataclass(frozen=True)
class Clipped:
    """Updates are clipped to ``clip_norm`` and the sensitivity is fixed at ``clip_norm``."""

    clip_norm: float = 1.0

    def __post_init__(self):
        if not self.clip_norm > 0 or not math.isfinite(self.clip_norm):
            raise PrivacyError(f"clip_norm must be positive and finite, got {self.clip_norm}")


SensitivityPolicy = Union[PaperFaithful, Clipped]


@dataclass(frozen=True)
class PrivacySpec:
    epsilon_total: float = 1.0
    delta: float = 1e-5
    sensitivity_policy: SensitivityPolicy = field(default_factory=Clipped)
    enabled: bool = True

    def __post_init__(self):
        if not self.epsilon_total > 0 or not math.isfinite(self.epsilon_total):
            raise PrivacyError(f"epsilon_total must be positive and finite, got {self.epsilon_total}")
        if not 0 < self.delta < 1:
            raise PrivacyError(f"delta must lie in (0, 1), got {self.delta}")
        if not isinstance(self.sensitivity_policy, (PaperFaithful, Clipped)):
            raise PrivacyError(f"unknown sensitivity policy {self.sensitivity_policy!r}")


@dataclass(frozen=True)
class NoiseReceipt:
    scale: float
    sensitivity: float
    epsilon_round: float
    noise_l2: float


@dataclass(frozen=True)
class AuditReport:
    scale: float
    draws: int
    mean: float
    variance: float
    variance_ratio: float
    ks_distance: float

    def lines(self) -> list[str]:
        return [
            f"scale          {self.scale:.6g}",
            f"draws          {self.draws}",
            f"mean           {self.mean:.6g}",
            f"variance       {self.variance:.6g}",
            f"variance/2b^2  {self.variance_ratio:.6f}",
            f"ks_distance    {self.ks_distance:.6f}",
        ]


def laplace_sample(scale: float, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` i.i.d. Laplace(0, scale) draws by inverse CDF.

    Each draw consumes exactly one 64-bit output of the bit generator; its top
    52 bits give ``u`` on the open interval (-1/2, 1/2), never hitting the
    endpoints, and ``x = -scale * sign(u) * ln(1 - 2|u|)``.
    """
    if not scale > 0 or not math.isfinite(scale):
        raise PrivacyError(f"Laplace scale must be positive and finite, got {scale}")
    if count < 0:
        raise ValueError("count must be non-negative")
    raw = rng.bit_generator.random_raw(int(count)) >> np.uint64(12)
    u = (raw.astype(np.float64) + 0.5) * _TWO_POW_M52 - 0.5
    return -scale * np.sign(u) * np.log1p(-2.0 * np.abs(u))


def laplace_cdf(x: np.ndarray, scale: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return 0.5 - 0.5 * np.sign(x) * np.expm1(-np.abs(x) / scale)


def compute_sensitivity(update: ParamVector, policy: SensitivityPolicy) -> float:
    if not np.isfinite(update.values).all():
        raise PrivacyError("update contains non-finite entries")
    if isinstance(policy, Clipped):
        return float(policy.clip_norm)
    if isinstance(policy, PaperFaithful):
        return update.norm()
    raise PrivacyError(f"unknown sensitivity policy {policy!r}")


def clip_update(update: ParamVector, clip_norm: float) -> ParamVector:
    """Scale ``update`` down to L2 norm ``clip_norm`` if it is longer; otherwise return it as is."""
    if not clip_norm > 0:
        raise PrivacyError(f"clip_norm must be positive, got {clip_norm}")
    norm = update.norm()
    if norm <= clip_norm:
        return update
    clipped = update.with_values(update.values * (clip_norm / norm))
    # rounding can leave the result a hair above the bound
    while clipped.norm() > clip_norm:
        clipped = clipped.with_values(clipped.values * (1.0 - 2.0**-52))
    return clipped


def release_parts(
    update: ParamVector,
    epsilon_round: float,
    privacy: PrivacySpec,
    rng: np.random.Generator,
) -> tuple[ParamVector, np.ndarray | None, NoiseReceipt]:
    """Split privatization into ``(released_base, noise, receipt)``.

    ``released_base`` is the update after clipping (the same object when no
    clipping happened) and ``noise`` is None when nothing is added.
    """
    if not privacy.enabled:
        return update, None, NoiseReceipt(0.0, 0.0, float(epsilon_round or 0.0), 0.0)
    if not epsilon_round > 0 or not math.isfinite(epsilon_round):
        raise PrivacyError(f"round epsilon must be positive and finite, got {epsilon_round}")
    policy = privacy.sensitivity_policy
    base = clip_update(update, policy.clip_norm) if isinstance(policy, Clipped) else update
    sensitivity = compute_sensitivity(base, policy)
    if sensitivity == 0.0:
        return base, None, NoiseReceipt(0.0, 0.0, float(epsilon_round), 0.0)
    scale = sensitivity / epsilon_round
    noise = laplace_sample(scale, len(base), rng)
    noise_l2 = math.sqrt(math.fsum(noise * noise))
    return base, noise, NoiseReceipt(scale, sensitivity, float(epsilon_round), noise_l2)


def privatize_update(
    update: ParamVector,
    epsilon_round: float,
    privacy: PrivacySpec,
    rng: np.random.Generator,
) -> tuple[ParamVector, NoiseReceipt]:
    """Noisy update ``update + b`` with ``b`` i.i.d. Laplace(0, sensitivity / epsilon_round).

    With privacy disabled the input is returned unchanged. Under the clipped
    policy the update is clipped before noise is added.
    """
    base, noise, receipt = release_parts(update, epsilon_round, privacy, rng)
    if noise is None:
        return base, receipt
    return base.with_values(base.values + noise), receipt


def risk_bound(sensitivity: float, epsilon_total: float, delta: float, rounds: int) -> float:
    """Excess empirical risk bound ``2 * sensitivity**2 * ln(1/delta) / (epsilon**2 * rounds)``."""
    if not sensitivity >= 0 or not math.isfinite(sensitivity):
        raise PrivacyError(f"sensitivity must be non-negative, got {sensitivity}")
    if not epsilon_total > 0 or not math.isfinite(epsilon_total):
        raise PrivacyError(f"epsilon must be positive, got {epsilon_total}")
    if not 0 < delta < 1:
        raise PrivacyError(f"delta must lie in (0, 1), got {delta}")
    if isinstance(rounds, bool) or int(rounds) != rounds or rounds <= 0:
        raise PrivacyError(f"rounds must be a positive integer, got {rounds}")
    return 2.0 * sensitivity * sensitivity * math.log(1.0 / delta) / (epsilon_total * epsilon_total * rounds)


def noise_audit(scale: float, draws: int, rng: np.random.Generator) -> AuditReport:
    """Moments and Kolmogorov-Smirnov distance of a Laplace sample against its analytic CDF."""
    if draws < 1000:
        raise ValueError(f"noise audit needs at least 1000 draws, got {draws}")
    x = laplace_sample(scale, draws, rng)
    mean = float(x.mean())
    variance = float(x.var())
    xs = np.sort(x)
    cdf = laplace_cdf(xs, scale)
    n = xs.size
    d_plus = np.max(np.arange(1, n + 1) / n - cdf)
    d_minus = np.max(cdf - np.arange(0, n) / n)
    return AuditReport(
        scale=float(scale),
        draws=int(draws),
        mean=mean,
        variance=variance,
        variance_ratio=variance / (2.0 * scale * scale),
        ks_distance=float(max(d_plus, d_minus)),
    )
