"""Synthetic survival cohorts with known ground truth.

Event times are exponential with subject hazard
``baseline_hazard * exp(beta . x)``; censoring is uniform,
exponential, or administrative; the observed time is the minimum of
the two with the event flag set when death comes first. Generated
cohorts use the standard record layout, so everything downstream
(ingestion, fitting, training) runs on them unchanged, and the ground
truth travels in a JSON-ready sidecar. By default observed times are
rounded up to whole days, which produces realistic ties; exact
continuous times are available for tie-free tests.

All draws come from named Philox substreams of ``SimSpec.seed``, so a
spec pins its cohort bit-for-bit across runs and platforms.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .cohort import Cohort, PatientRecord
from .errors import DataError
from .rng import substream

_FILL_SITES = ("breast", "lung", "prostate", "gi", "skin")
_FILL_RACES = ("white", "black", "asian", "hispanic", "other")
_FILL_INTENTS = ("curative", "oligomet_ablation", "palliative")
_FILL_YEAR_GROUPS = ("pre2016", "post2016")
_FILL_TECHNIQUES = ("conformal", "imrt", "sbrt")

_COVARIATE_FIELDS = ("sex", "chrono_age", "risk_scaled", "fad")


@dataclass(frozen=True)
class SimCovariate:
    """One hazard-driving covariate and where it lands in the record.

    ``field`` is "sex" (bernoulli 0/1 becomes female/male),
    "chrono_age" (years), "risk_scaled" (should generate within [0, 1])
    or "fad" (years; predicted_age is emitted as chrono_age + value).
    ``dist`` is ("bernoulli", p), ("normal", mu, sd), ("uniform", a, b)
    or ("beta", a, b).
    """

    field: str
    dist: tuple


@dataclass(frozen=True)
class SimSpec:
    n: int
    beta_true: tuple[float, ...] = ()
    baseline_hazard: float = 0.002  # per day
    censor_model: tuple = ("none",)
    covariate_model: tuple[SimCovariate, ...] = ()
    embedding_dim: int | None = None
    embedding_weights: tuple[float, ...] | None = None
    round_days: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n <= 0:
            raise DataError("n must be positive")
        if self.baseline_hazard <= 0:
            raise DataError("baseline_hazard must be positive")
        if len(self.beta_true) != len(self.covariate_model):
            raise DataError("beta_true must align with covariate_model")
        for cov in self.covariate_model:
            if cov.field not in _COVARIATE_FIELDS:
                raise DataError(f"unsupported covariate field {cov.field!r}")
        kind = self.censor_model[0]
        if kind not in ("none", "uniform", "exponential", "admin"):
            raise DataError(f"unknown censor model {kind!r}")
        if kind != "none":
            if len(self.censor_model) != 2 or float(self.censor_model[1]) <= 0:
                raise DataError(f"censor model {kind!r} needs one positive parameter")
        if (self.embedding_weights is None) != (self.embedding_dim is None):
            raise DataError("embedding_weights and embedding_dim go together")
        if self.embedding_dim is not None and len(self.embedding_weights) != self.embedding_dim:
            raise DataError("embedding_weights must have length embedding_dim")


@dataclass(frozen=True)
class SimResult:
    cohort: Cohort
    truth: dict


def _draw(rng: np.random.Generator, dist: tuple, n: int) -> np.ndarray:
    kind = dist[0]
    if kind == "bernoulli":
        return (rng.random(n) < float(dist[1])).astype(float)
    if kind == "normal":
        return rng.normal(float(dist[1]), float(dist[2]), n)
    if kind == "uniform":
        return rng.uniform(float(dist[1]), float(dist[2]), n)
    if kind == "beta":
        return rng.beta(float(dist[1]), float(dist[2]), n)
    raise DataError(f"unknown distribution {kind!r}")


def simulate(spec: SimSpec) -> SimResult:
    """Generate a cohort and its ground-truth sidecar from a spec."""
    n = spec.n
    rng_cov = substream(spec.seed, "synth/covariates")
    rng_emb = substream(spec.seed, "synth/embeddings")
    rng_event = substream(spec.seed, "synth/events")
    rng_cens = substream(spec.seed, "synth/censoring")
    rng_fill = substream(spec.seed, "synth/fill")

    covariate_values = [
        _draw(rng_cov, cov.dist, n) for cov in spec.covariate_model
    ]
    eta = np.zeros(n)
    for beta, values in zip(spec.beta_true, covariate_values):
        eta += beta * values

    embeddings = None
    if spec.embedding_dim is not None:
        embeddings = rng_emb.standard_normal((n, spec.embedding_dim))
        eta += embeddings @ np.asarray(spec.embedding_weights, dtype=float)

    hazards = spec.baseline_hazard * np.exp(eta)
    event_times = rng_event.exponential(1.0 / hazards)

    kind = spec.censor_model[0]
    if kind == "none":
        censor_times = np.full(n, np.inf)
    elif kind == "uniform":
        censor_times = rng_cens.uniform(0.0, float(spec.censor_model[1]), n)
    elif kind == "exponential":
        censor_times = rng_cens.exponential(1.0 / float(spec.censor_model[1]), n)
    else:  # admin
        censor_times = np.full(n, float(spec.censor_model[1]))

    events = event_times <= censor_times
    observed = np.minimum(event_times, censor_times)
    if spec.round_days:
        observed = np.ceil(observed)

    driven = {cov.field: values for cov, values in zip(spec.covariate_model, covariate_values)}
    if "chrono_age" in driven:
        chrono = driven["chrono_age"]
    else:
        chrono = rng_fill.uniform(40.0, 80.0, n)
    if "sex" in driven:
        sex = np.where(driven["sex"] > 0.5, "male", "female")
    else:
        sex = np.where(rng_fill.random(n) < 0.5, "male", "female")
    race = rng_fill.choice(_FILL_RACES, n)
    site = rng_fill.choice(_FILL_SITES, n)
    intent = rng_fill.choice(_FILL_INTENTS, n)
    year_group = rng_fill.choice(_FILL_YEAR_GROUPS, n)
    technique = rng_fill.choice(_FILL_TECHNIQUES, n)

    predicted = chrono + driven["fad"] if "fad" in driven else None
    risk_scaled = driven.get("risk_scaled")

    records = []
    for i in range(n):
        records.append(
            PatientRecord(
                id=f"s{i:05d}",
                time=float(observed[i]),
                event=bool(events[i]),
                chrono_age=float(chrono[i]),
                sex=str(sex[i]),
                race=str(race[i]),
                cancer_site=str(site[i]),
                intent=str(intent[i]),
                year_group=str(year_group[i]),
                technique=str(technique[i]),
                predicted_age=None if predicted is None else float(predicted[i]),
                risk_scaled=None if risk_scaled is None else float(risk_scaled[i]),
                embedding=None if embeddings is None else tuple(map(float, embeddings[i])),
            )
        )

    truth = {
        "n": n,
        "seed": spec.seed,
        "baseline_hazard": spec.baseline_hazard,
        "beta_true": list(spec.beta_true),
        "covariates": [
            {"field": cov.field, "dist": list(cov.dist)} for cov in spec.covariate_model
        ],
        "censor_model": list(spec.censor_model),
        "embedding_dim": spec.embedding_dim,
        "embedding_weights": (
            None if spec.embedding_weights is None else list(spec.embedding_weights)
        ),
        "round_days": spec.round_days,
        "eta": [float(v) for v in eta],
        "censored_fraction": float(1.0 - events.mean()),
    }
    cohort = Cohort(tuple(records), embedding_dim=spec.embedding_dim)
    return SimResult(cohort, truth)
