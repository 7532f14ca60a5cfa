"""Facial-age and risk biomarkers: derivation, scaling, stratification.

The face age difference (FAD) is predicted age minus chronological age,
in years. Risk scores are compared against fixed cuts after min-max
scaling to [0, 1], so strata labels mean the same thing across
datasets of different score distributions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import AnalysisError, ConstantInputError, DataError

FAD_BAND_CUTS = (-10.0, -5.0, 0.0, 5.0, 10.0, 20.0)

SCHEMES = (
    "fad_bands",
    "fad_ge5",
    "fad_le_minus5",
    "risk_quartiles",
    "risk_deciles",
    "risk_half",
)

_RISK_SCHEMES = {"risk_quartiles", "risk_deciles", "risk_half"}


@dataclass(frozen=True)
class BiomarkerColumn:
    """Per-subject values aligned to a cohort; NaN marks excluded subjects."""

    name: str
    values: np.ndarray
    unit: str = ""
    excluded: tuple[int, ...] = ()  # indices with no computable value

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class StrataAssignment:
    """One label per subject plus the boundary set that produced them."""

    scheme: str
    labels: tuple[str, ...]
    boundaries: tuple[float, ...]
    order: tuple[str, ...]  # display order of the possible labels


def compute_fad(predicted_age, chrono_age) -> BiomarkerColumn:
    """Face age difference in years, predicted minus chronological.

    ``predicted_age`` entries may be None or NaN for subjects without a
    prediction; those subjects are excluded (NaN value) and their
    indices reported on the column.
    """
    chrono = np.asarray(chrono_age, dtype=float)
    pred = np.array(
        [np.nan if v is None else float(v) for v in predicted_age], dtype=float
    )
    if pred.shape != chrono.shape or pred.ndim != 1:
        raise DataError("predicted and chronological ages must align")
    values = pred - chrono
    excluded = tuple(int(i) for i in np.nonzero(~np.isfinite(pred))[0])
    values.flags.writeable = False
    return BiomarkerColumn("fad", values, unit="years", excluded=excluded)


def fad_for_cohort(cohort) -> BiomarkerColumn:
    """FAD column for a cohort, excluding subjects without predictions."""
    return compute_fad(
        [r.predicted_age for r in cohort], [r.chrono_age for r in cohort]
    )


def minmax_scale(raw) -> np.ndarray:
    """Scale to [0, 1] by the observed minimum and maximum.

    Requires at least two distinct finite values; a constant input has
    no defined scaling and raises ConstantInputError.
    """
    x = np.asarray(raw, dtype=float)
    if x.ndim != 1 or x.size == 0:
        raise DataError("input must be a non-empty 1-d array")
    if not np.all(np.isfinite(x)):
        raise DataError("input contains non-finite values")
    lo, hi = float(np.min(x)), float(np.max(x))
    if lo == hi:
        raise ConstantInputError("cannot min-max scale a constant input")
    return (x - lo) / (hi - lo)


def _band_labels(cuts: Sequence[float]) -> list[str]:
    labels = [f"<{cuts[0]:g}"]
    labels.extend(f"{lo:g} to {hi:g}" for lo, hi in zip(cuts[:-1], cuts[1:]))
    labels.append(f"{cuts[-1]:g}+")
    return labels


def _assign_bands(values: np.ndarray, cuts: Sequence[float]) -> list[str]:
    names = _band_labels(cuts)
    idx = np.searchsorted(np.asarray(cuts, dtype=float), values, side="right")
    return [names[i] for i in idx]


def stratify(column, scheme: str, fad_cuts: Sequence[float] | None = None) -> StrataAssignment:
    """Assign every subject to a stratum by fixed cuts.

    Intervals are left-closed, right-open, with the final interval
    closed, so a risk of exactly 0.25 lands in the second quartile and
    a risk of 1.0 in the top one. Risk schemes require values inside
    [0, 1]; apply :func:`minmax_scale` first. ``fad_cuts`` overrides
    the default FAD band boundaries.
    """
    values = np.asarray(getattr(column, "values", column), dtype=float)
    if values.ndim != 1 or values.size == 0:
        raise DataError("empty biomarker column")
    if not np.all(np.isfinite(values)):
        raise DataError("stratification input has excluded or non-finite values")
    if scheme not in SCHEMES:
        raise DataError(f"unknown scheme {scheme!r}; valid: {', '.join(SCHEMES)}")
    if scheme in _RISK_SCHEMES and (values.min() < 0.0 or values.max() > 1.0):
        raise DataError("risk scheme requires values in [0, 1]")

    if scheme == "fad_bands":
        cuts = tuple(float(c) for c in (fad_cuts or FAD_BAND_CUTS))
        if list(cuts) != sorted(set(cuts)):
            raise DataError("band cuts must be strictly increasing")
        labels = _assign_bands(values, cuts)
        order = tuple(_band_labels(cuts))
    elif scheme == "fad_ge5":
        labels = ["≥5" if v >= 5.0 else "<5" for v in values]
        cuts = (5.0,)
        order = ("<5", "≥5")
    elif scheme == "fad_le_minus5":
        labels = ["≤-5" if v <= -5.0 else ">-5" for v in values]
        cuts = (-5.0,)
        order = (">-5", "≤-5")
    elif scheme == "risk_half":
        labels = ["≥0.5" if v >= 0.5 else "<0.5" for v in values]
        cuts = (0.5,)
        order = ("<0.5", "≥0.5")
    elif scheme == "risk_quartiles":
        cuts = (0.25, 0.5, 0.75)
        order = ("<0.25", "0.25-0.49", "0.5-0.74", "≥0.75")
        idx = np.minimum(np.searchsorted(cuts, values, side="right"), 3)
        labels = [order[i] for i in idx]
    else:  # risk_deciles
        cuts = tuple(np.round(np.arange(0.1, 1.0, 0.1), 10))
        order = tuple(f"{lo:.1f}-{lo + 0.1:.1f}" for lo in np.arange(0.0, 1.0, 0.1))
        idx = np.minimum(np.searchsorted(cuts, values, side="right"), 9)
        labels = [order[i] for i in idx]

    return StrataAssignment(scheme, tuple(labels), tuple(cuts), order)


def group_indices(assignment: StrataAssignment) -> dict[str, np.ndarray]:
    """Subject indices per stratum, in display order, occupied only."""
    labels = np.asarray(assignment.labels, dtype=object)
    out: dict[str, np.ndarray] = {}
    for name in assignment.order:
        idx = np.nonzero(labels == name)[0]
        if idx.size:
            out[name] = idx
    return out


def cosine_similarity_profile(a, b) -> tuple[np.ndarray, float]:
    """Row-wise cosine similarity between two embedding matrices.

    Returns the per-subject similarities and their median. Rows must
    align and no row may have zero norm.
    """
    xa = np.atleast_2d(np.asarray(a, dtype=float))
    xb = np.atleast_2d(np.asarray(b, dtype=float))
    if xa.shape != xb.shape:
        raise DataError(f"shape mismatch: {xa.shape} vs {xb.shape}")
    norms_a = np.linalg.norm(xa, axis=1)
    norms_b = np.linalg.norm(xb, axis=1)
    if np.any(norms_a == 0) or np.any(norms_b == 0):
        raise AnalysisError("zero-norm embedding row")
    sims = np.sum(xa * xb, axis=1) / (norms_a * norms_b)
    return sims, float(np.median(sims))


def strata_to_csv(ids: Sequence[str], assignment: StrataAssignment) -> str:
    """Render per-subject strata as ``id,scheme,label`` lines."""
    if len(ids) != len(assignment.labels):
        raise DataError("ids do not align with strata labels")
    lines = ["id,scheme,label"]
    lines.extend(
        f"{sid},{assignment.scheme},{label}"
        for sid, label in zip(ids, assignment.labels)
    )
    return "\n".join(lines) + "\n"
