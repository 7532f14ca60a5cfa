"""Subject records, cohorts, and delimited-text ingestion.

The canonical on-disk form is a CSV with one row per subject::

    id,time,event,chrono_age,sex,race,cancer_site,intent,year_group,
    technique,predicted_age,risk,e0..e{D-1}

``time`` is follow-up in days, ``event`` is 1 for death and 0 for
censoring, and the ``e*`` columns hold an optional image embedding.
Unknown fields are left empty. Arbitrary column names are supported
through a schema mapping, and a flat binary sidecar may carry the
embedding instead of text columns. Text is canonical; the sidecar is a
convenience for bulk transfer.
"""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import DataError

DAYS_PER_YEAR = 365.25

SEX_LEVELS = ("female", "male")
RACE_LEVELS = ("white", "black", "asian", "hispanic", "other", "unknown")
INTENT_LEVELS = ("curative", "oligomet_ablation", "palliative", "unknown")
YEAR_GROUP_LEVELS = ("pre2016", "post2016", "unknown")

# Closed category universes. Free-text fields (cancer_site, technique)
# only normalize the empty string.
_CLOSED_LEVELS = {
    "sex": SEX_LEVELS,
    "race": RACE_LEVELS,
    "intent": INTENT_LEVELS,
    "year_group": YEAR_GROUP_LEVELS,
}

_CANONICAL_COLUMNS = (
    "id",
    "time",
    "event",
    "chrono_age",
    "sex",
    "race",
    "cancer_site",
    "intent",
    "year_group",
    "technique",
    "predicted_age",
    "risk",
)

_MANDATORY = ("time", "event", "chrono_age")

_TRUE_TOKENS = frozenset({"1", "true", "t", "yes"})
_FALSE_TOKENS = frozenset({"0", "false", "f", "no"})


@dataclass(frozen=True)
class PatientRecord:
    """One subject.

    ``time`` is days of follow-up (> 0), ``event`` True when the subject
    died at ``time`` and False when censored there. ``predicted_age``,
    ``risk_raw``, ``risk_scaled`` and ``embedding`` are model outputs and
    may be absent. Records are value objects; invalid field values are
    representable and surfaced by :func:`validate` rather than rejected
    at construction.
    """

    id: str
    time: float
    event: bool
    chrono_age: float
    sex: str = "unknown"
    race: str = "unknown"
    cancer_site: str = "unknown"
    intent: str = "unknown"
    year_group: str = "unknown"
    technique: str = "unknown"
    predicted_age: float | None = None
    risk_raw: float | None = None
    risk_scaled: float | None = None
    embedding: tuple[float, ...] | None = None


@dataclass(frozen=True)
class Cohort:
    """An immutable ordered collection of patient records."""

    records: tuple[PatientRecord, ...]
    embedding_dim: int | None = None

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[PatientRecord]:
        return iter(self.records)

    def times(self) -> np.ndarray:
        return np.array([r.time for r in self.records], dtype=float)

    def events(self) -> np.ndarray:
        return np.array([r.event for r in self.records], dtype=bool)

    def ids(self) -> tuple[str, ...]:
        return tuple(r.id for r in self.records)

    def embedding_matrix(self) -> np.ndarray:
        """Stack embeddings into an (n, D) float array.

        Raises DataError if any record lacks an embedding or lengths
        disagree.
        """
        rows = []
        for r in self.records:
            if r.embedding is None:
                raise DataError(f"record {r.id!r} has no embedding")
            rows.append(r.embedding)
        lengths = {len(row) for row in rows}
        if len(lengths) > 1:
            raise DataError(f"inconsistent embedding lengths: {sorted(lengths)}")
        return np.array(rows, dtype=float)


@dataclass(frozen=True)
class Violation:
    record_id: str
    field: str
    message: str


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...]

    def ok(self) -> bool:
        return not self.violations


@dataclass(frozen=True)
class LoadResult:
    cohort: Cohort
    dropped: tuple[tuple[int, str], ...] = ()

    @property
    def n_dropped(self) -> int:
        return len(self.dropped)


def _normalize_category(field_name: str, raw: str) -> str:
    value = raw.strip()
    if not value:
        return "unknown"
    levels = _CLOSED_LEVELS.get(field_name)
    if levels is None:
        return value
    lowered = value.lower().replace(" ", "_").replace("-", "_")
    return lowered if lowered in levels else "unknown"


def _parse_event(raw: str) -> bool:
    token = raw.strip().lower()
    if token in _TRUE_TOKENS:
        return True
    if token in _FALSE_TOKENS:
        return False
    raise ValueError(f"unrecognized event flag {raw!r}")


def _embedding_columns(header: Sequence[str]) -> tuple[str, ...]:
    """Return e0..e{D-1} in index order, requiring a contiguous range."""
    pattern = re.compile(r"^e(\d+)$")
    found = {}
    for name in header:
        m = pattern.match(name)
        if m:
            found[int(m.group(1))] = name
    if not found:
        return ()
    dim = max(found) + 1
    missing = [i for i in range(dim) if i not in found]
    if missing:
        raise DataError(f"embedding columns not contiguous, missing e{missing[0]}")
    return tuple(found[i] for i in range(dim))


def read_schema(path: str | Path) -> dict:
    """Load a schema-mapping JSON file.

    Recognized keys: ``columns`` (canonical name -> actual column name)
    and ``time_unit`` ("days", the default, or "years").
    """
    with open(path, "r", encoding="utf-8") as fh:
        schema = json.load(fh)
    if not isinstance(schema, dict):
        raise DataError("schema file must contain a JSON object")
    unit = schema.get("time_unit", "days")
    if unit not in ("days", "years"):
        raise DataError(f"unsupported time_unit {unit!r}")
    return schema


def load_cohort(
    path: str | Path,
    schema: dict | None = None,
    embedding_sidecar: str | Path | None = None,
    embedding_dim: int | None = None,
) -> LoadResult:
    """Read a cohort CSV, returning the cohort plus dropped-row report.

    Rows with missing or non-positive follow-up time, or with unparseable
    mandatory fields, are dropped and reported by (1-based data row
    number, reason); valid rows are never mutated beyond category
    normalization. ``schema`` renames columns and may declare times in
    years, which are converted to days at 365.25 days per year. When
    ``embedding_sidecar`` names a flat row-major little-endian float32
    file, embeddings are read from it (``embedding_dim`` required) and
    any e* text columns are ignored.
    """
    schema = schema or {}
    rename = schema.get("columns", {})
    time_unit = schema.get("time_unit", "days")

    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty file")
        header = list(reader.fieldnames)
        rows = list(reader)

    def actual(canonical: str) -> str | None:
        name = rename.get(canonical, canonical)
        return name if name in header else None

    for canonical in _MANDATORY:
        if actual(canonical) is None:
            raise DataError(f"{path}: missing mandatory column {canonical!r}")

    sidecar_matrix = None
    if embedding_sidecar is not None:
        if embedding_dim is None:
            raise DataError("embedding_dim is required with a binary sidecar")
        raw = np.fromfile(embedding_sidecar, dtype="<f4")
        if raw.size != len(rows) * embedding_dim:
            raise DataError(
                f"sidecar holds {raw.size} values, expected "
                f"{len(rows)} x {embedding_dim}"
            )
        sidecar_matrix = raw.reshape(len(rows), embedding_dim).astype(float)
        emb_cols: tuple[str, ...] = ()
    else:
        emb_cols = _embedding_columns(header)

    records: list[PatientRecord] = []
    dropped: list[tuple[int, str]] = []

    for row_number, row in enumerate(rows, start=1):
        def cell(canonical: str) -> str:
            name = actual(canonical)
            return (row.get(name) or "") if name else ""

        try:
            time_value = float(cell("time"))
        except ValueError:
            dropped.append((row_number, "unparseable time"))
            continue
        if time_unit == "years":
            time_value *= DAYS_PER_YEAR
        if not np.isfinite(time_value) or time_value <= 0:
            dropped.append((row_number, "non-positive time"))
            continue

        try:
            event = _parse_event(cell("event"))
        except ValueError:
            dropped.append((row_number, "unparseable event flag"))
            continue

        try:
            chrono_age = float(cell("chrono_age"))
        except ValueError:
            dropped.append((row_number, "unparseable chrono_age"))
            continue

        optional: dict[str, float | None] = {}
        bad_optional = None
        for canonical, attr in (
            ("predicted_age", "predicted_age"),
            ("risk", "risk_raw"),
            ("risk_scaled", "risk_scaled"),
        ):
            text = cell(canonical).strip()
            if not text:
                optional[attr] = None
                continue
            try:
                optional[attr] = float(text)
            except ValueError:
                bad_optional = canonical
                break
        if bad_optional:
            dropped.append((row_number, f"unparseable {bad_optional}"))
            continue

        if sidecar_matrix is not None:
            embedding = tuple(float(v) for v in sidecar_matrix[row_number - 1])
        elif emb_cols:
            try:
                embedding = tuple(float(row.get(c) or "") for c in emb_cols)
            except ValueError:
                dropped.append((row_number, "unparseable embedding value"))
                continue
        else:
            embedding = None

        rid = cell("id").strip() or f"row{row_number}"
        records.append(
            PatientRecord(
                id=rid,
                time=time_value,
                event=event,
                chrono_age=chrono_age,
                sex=_normalize_category("sex", cell("sex")),
                race=_normalize_category("race", cell("race")),
                cancer_site=_normalize_category("cancer_site", cell("cancer_site")),
                intent=_normalize_category("intent", cell("intent")),
                year_group=_normalize_category("year_group", cell("year_group")),
                technique=_normalize_category("technique", cell("technique")),
                embedding=embedding,
                **optional,
            )
        )

    dim = embedding_dim
    if dim is None and records and records[0].embedding is not None:
        dim = len(records[0].embedding)
    return LoadResult(Cohort(tuple(records), embedding_dim=dim), tuple(dropped))


def save_cohort(cohort: Cohort, path: str | Path) -> None:
    """Write the canonical CSV form. Floats use repr and round-trip."""
    any_scaled = any(r.risk_scaled is not None for r in cohort)
    dim = cohort.embedding_dim or 0
    header = list(_CANONICAL_COLUMNS)
    if any_scaled:
        header.append("risk_scaled")
    header.extend(f"e{i}" for i in range(dim))

    def fmt(value) -> str:
        return "" if value is None else repr(float(value))

    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for r in cohort:
            row = [
                r.id,
                repr(float(r.time)),
                "1" if r.event else "0",
                repr(float(r.chrono_age)),
                r.sex,
                r.race,
                r.cancer_site,
                r.intent,
                r.year_group,
                r.technique,
                fmt(r.predicted_age),
                fmt(r.risk_raw),
            ]
            if any_scaled:
                row.append(fmt(r.risk_scaled))
            if dim:
                if r.embedding is None or len(r.embedding) != dim:
                    raise DataError(f"record {r.id!r} embedding does not match dim {dim}")
                row.extend(repr(float(v)) for v in r.embedding)
            writer.writerow(row)


def save_embedding_sidecar(cohort: Cohort, path: str | Path) -> None:
    """Write embeddings as flat row-major little-endian float32."""
    cohort.embedding_matrix().astype("<f4").tofile(path)


def validate(cohort: Cohort) -> ValidationReport:
    """Report invariant violations per record without mutating anything."""
    violations: list[Violation] = []
    seen: set[str] = set()
    expected_dim = cohort.embedding_dim

    for r in cohort:
        if r.id in seen:
            violations.append(Violation(r.id, "id", "duplicate id"))
        seen.add(r.id)
        if not (np.isfinite(r.time) and r.time > 0):
            violations.append(Violation(r.id, "time", f"time must be > 0, got {r.time}"))
        if not (np.isfinite(r.chrono_age) and r.chrono_age >= 0):
            violations.append(
                Violation(r.id, "chrono_age", f"chrono_age must be >= 0, got {r.chrono_age}")
            )
        if r.risk_scaled is not None and not (0.0 <= r.risk_scaled <= 1.0):
            violations.append(
                Violation(r.id, "risk_scaled", f"risk_scaled outside [0, 1]: {r.risk_scaled}")
            )
        if r.embedding is not None:
            if expected_dim is None:
                expected_dim = len(r.embedding)
            if len(r.embedding) != expected_dim:
                violations.append(
                    Violation(
                        r.id,
                        "embedding",
                        f"length {len(r.embedding)} != cohort dim {expected_dim}",
                    )
                )
            elif not all(np.isfinite(v) for v in r.embedding):
                violations.append(Violation(r.id, "embedding", "non-finite value"))

    return ValidationReport(tuple(violations))
