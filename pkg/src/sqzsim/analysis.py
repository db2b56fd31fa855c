"""Squeezing-level arithmetic, effective-loss estimation and run statistics.

Levels are decibel ratios of measured quadrature variance to the vacuum
reference.  A pure squeezed state of parameter r seen through total loss L
measures

    sq  = 10 log10(L + (1 - L) e^(-2r))
    asq = 10 log10(L + (1 - L) e^(+2r))

and inverting the pair yields the loss without knowing r.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class AnalysisError(ValueError):
    pass


@dataclass(frozen=True)
class LevelPair:
    """One squeezing/antisqueezing measurement in dB."""

    sq: float
    asq: float


@dataclass(frozen=True)
class CampaignStats:
    mean_sq: float
    std_sq: float
    mean_asq: float
    std_asq: float
    mean_loss: float
    std_loss: float
    max_loss_excursion: float   # max |loss - mean|, reported alongside the std
    n_total: int
    n_outliers: int


def levels_from_squeezing(r: float, loss: float) -> LevelPair:
    """Forward model: squeeze parameter and loss to dB level pair."""
    if r < 0 or not 0.0 <= loss <= 1.0:
        raise AnalysisError("need r >= 0 and loss in [0, 1]")
    sq = 10.0 * np.log10(loss + (1.0 - loss) * np.exp(-2.0 * r))
    asq = 10.0 * np.log10(loss + (1.0 - loss) * np.exp(2.0 * r))
    return LevelPair(float(sq), float(asq))


def loss_from_levels(p: LevelPair) -> float:
    """Invert a level pair to the effective loss.

    Undefined for the lossless-vacuum pair (0, 0) where the expression
    degenerates to 0/0.
    """
    a = 10.0 ** (p.sq / 10.0)
    b = 10.0 ** (p.asq / 10.0)
    den = 2.0 - a - b
    if abs(den) < 1e-300:
        raise AnalysisError("loss undefined for sq = asq = 0")
    return float((1.0 - a * b) / den)


def level_from_variances(v: float, v_shot: float) -> float:
    """Variance ratio to the vacuum reference, in dB."""
    if v <= 0 or v_shot <= 0:
        raise AnalysisError("variances must be positive")
    return float(10.0 * np.log10(v / v_shot))


def summarize_records(records) -> CampaignStats:
    """Campaign statistics over non-outlier records (population std).

    `records` is an iterable of MeasurementRecord-like objects with
    sq_db, asq_db, loss_est and outlier attributes.
    """
    records = list(records)
    good = [r for r in records if not r.outlier]
    if len(good) < 2:
        raise AnalysisError("need at least two non-outlier records")
    sq = np.array([r.sq_db for r in good])
    asq = np.array([r.asq_db for r in good])
    loss = np.array([r.loss_est for r in good if r.loss_est is not None])
    if len(loss) == 0:
        loss = np.array([np.nan])
    mean_loss = float(np.mean(loss))
    return CampaignStats(
        mean_sq=float(np.mean(sq)),
        std_sq=float(np.std(sq)),
        mean_asq=float(np.mean(asq)),
        std_asq=float(np.std(asq)),
        mean_loss=mean_loss,
        std_loss=float(np.std(loss)),
        max_loss_excursion=float(np.max(np.abs(loss - mean_loss))),
        n_total=len(records),
        n_outliers=len(records) - len(good),
    )
