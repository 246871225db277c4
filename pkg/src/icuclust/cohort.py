"""Cohort tables: loading, validation, derived features, filters and sampling.

A cohort is a CSV with a ``stay_id`` column plus one column per schema
feature; missing cells are empty strings. The schema travels as a JSON
sidecar declaring each feature's name, kind (continuous / binary /
categorical), unit and whether it participates in clustering.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from datetime import datetime

import numpy as np
import pandas as pd

FEATURE_KINDS = ("continuous", "binary", "categorical")

# Admission services treated as surgical (case-insensitive).
DEFAULT_SURGICAL_SERVICES = frozenset(
    {
        "surgical",
        "cardiac surgery",
        "neurological surgical",
        "orthopaedic surgical",
        "thoracic surgical",
        "vascular surgical",
    }
)

# Raw discharge categories -> {home, skilled_facility, hospice}.
DEFAULT_DISCHARGE_MAP = {
    "home health care": "home",
    "home": "home",
    "against advice": "home",
    "assisted living": "home",
    "skilled nursing facility": "skilled_facility",
    "rehab": "skilled_facility",
    "chronic long-term": "skilled_facility",
    "psych facility": "skilled_facility",
    "acute hospital": "skilled_facility",
    "other facility": "skilled_facility",
    "healthcare facility": "skilled_facility",
    "hospice": "hospice",
}

# Drug-class membership used for the days-of-treatment counts.
DEFAULT_DRUG_CLASSES = {
    "benzodiazepine": frozenset({"diazepam", "lorazepam", "midazolam"}),
    "other_sedative": frozenset(
        {
            "propofol (intubation)",
            "propofol",
            "dexmedetomidine",
            "pentobarbital",
            "ketamine",
            "ketamine (intubation)",
            "haloperidol",
            "nitrous oxide",
            "sevoflurane",
            "isoflurane",
            "etomidate (intubation)",
            "phenobarbital",
        }
    ),
    "opiate": frozenset(
        {
            "fentanyl (concentrate)",
            "morphine sulfate",
            "meperidine",
            "fentanyl (push)",
            "hydromorphone",
            "methadone hydrochloride",
            "fentanyl",
        }
    ),
}

CODE_STATUS_TOKENS = {"full code": 0, "dnr": 1, "do not resuscitate": 1}


@dataclass(frozen=True)
class Feature:
    name: str
    kind: str
    unit: str = ""
    clustering: bool = False

    def __post_init__(self):
        if self.kind not in FEATURE_KINDS:
            raise ValueError(f"unknown feature kind: {self.kind!r}")


@dataclass(frozen=True)
class FeatureSchema:
    features: tuple[Feature, ...]

    def __post_init__(self):
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise ValueError("feature names must be unique")
        for f in self.features:
            if f.clustering and f.kind == "categorical":
                raise ValueError(
                    f"clustering feature {f.name!r} must be continuous or binary; "
                    "map categoricals before clustering"
                )

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.features]

    @property
    def clustering_names(self) -> list[str]:
        return [f.name for f in self.features if f.clustering]

    def feature(self, name: str) -> Feature:
        for f in self.features:
            if f.name == name:
                return f
        raise KeyError(name)

    def kind_of(self, name: str) -> str:
        return self.feature(name).kind

    def numeric_names(self) -> list[str]:
        return [f.name for f in self.features if f.kind in ("continuous", "binary")]

    def to_dict(self) -> dict:
        return {
            "features": [
                {"name": f.name, "kind": f.kind, "unit": f.unit, "clustering": f.clustering}
                for f in self.features
            ]
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "FeatureSchema":
        return cls(
            features=tuple(
                Feature(
                    name=item["name"],
                    kind=item["kind"],
                    unit=item.get("unit", ""),
                    clustering=bool(item.get("clustering", False)),
                )
                for item in payload["features"]
            )
        )


def load_schema(path) -> FeatureSchema:
    with open(path, "r", encoding="utf-8") as fh:
        return FeatureSchema.from_dict(json.load(fh))


def save_schema(schema: FeatureSchema, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(schema.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


@dataclass
class CohortTable:
    """Rows of ICU stays with schema-typed cells (NaN / None = missing)."""

    schema: FeatureSchema
    frame: pd.DataFrame
    provenance: str = ""
    parse_warnings: dict = field(default_factory=dict)

    def __post_init__(self):
        if "stay_id" not in self.frame.columns:
            raise ValueError("cohort frame must contain a stay_id column")
        missing_cols = [n for n in self.schema.names if n not in self.frame.columns]
        if missing_cols:
            raise ValueError(f"cohort frame is missing feature columns: {missing_cols}")
        ids = self.frame["stay_id"]
        if ids.duplicated().any():
            dupes = ids[ids.duplicated()].head(3).tolist()
            raise ValueError(f"duplicate stay_id values, e.g. {dupes}")
        for f in self.schema.features:
            if f.kind == "binary":
                col = self.frame[f.name].to_numpy(dtype=np.float64)
                bad = ~(np.isnan(col) | (col == 0.0) | (col == 1.0))
                if bad.any():
                    raise ValueError(f"binary feature {f.name!r} has values outside {{0, 1}}")
        self.frame = self.frame.reset_index(drop=True)

    @property
    def n_rows(self) -> int:
        return len(self.frame)

    def column(self, name: str) -> np.ndarray:
        kind = self.schema.kind_of(name)
        if kind == "categorical":
            return self.frame[name].to_numpy(dtype=object)
        return self.frame[name].to_numpy(dtype=np.float64)

    def copy(self) -> "CohortTable":
        return CohortTable(
            schema=self.schema,
            frame=self.frame.copy(),
            provenance=self.provenance,
            parse_warnings=dict(self.parse_warnings),
        )

    def equals(self, other: "CohortTable") -> bool:
        if self.schema != other.schema or self.n_rows != other.n_rows:
            return False
        if not self.frame["stay_id"].equals(other.frame["stay_id"]):
            return False
        for f in self.schema.features:
            a, b = self.frame[f.name], other.frame[f.name]
            if f.kind == "categorical":
                if not a.fillna("\0").equals(b.fillna("\0")):
                    return False
            else:
                av = a.to_numpy(dtype=np.float64)
                bv = b.to_numpy(dtype=np.float64)
                if not np.array_equal(av, bv, equal_nan=True):
                    return False
        return True


@dataclass
class PreprocessReport:
    """Per-rule correction counts plus per-feature imputation counts."""

    rule_counts: list = field(default_factory=list)
    imputation_counts: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "rule_counts": [{"rule": r, "rows_affected": int(c)} for r, c in self.rule_counts],
            "imputation_counts": [
                {"feature": f, "count": int(c)} for f, c in self.imputation_counts
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def count(self, rule: str) -> int:
        for r, c in self.rule_counts:
            if r == rule:
                return c
        raise KeyError(rule)


@dataclass(frozen=True)
class StandardizedMatrix:
    """Z-scored clustering features: one column per feature, one row per stay."""

    matrix: np.ndarray
    means: np.ndarray
    stddevs: np.ndarray
    feature_names: tuple
    constant_flags: np.ndarray

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def d(self) -> int:
        return self.matrix.shape[1]


def load_cohort(path, schema: FeatureSchema, provenance: str = "") -> CohortTable:
    """Read a cohort CSV, parsing cells according to the schema.

    Unparseable cells become missing and are tallied in
    ``parse_warnings`` on the returned table.
    """
    raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    header = list(raw.columns)
    if "stay_id" not in header:
        raise ValueError("cohort CSV must contain a stay_id column")
    expected = set(schema.names)
    got = set(header) - {"stay_id"}
    if got != expected:
        missing = sorted(expected - got)
        extra = sorted(got - expected)
        raise ValueError(
            f"cohort header does not match schema (missing {missing}, unexpected {extra})"
        )

    warnings: dict[str, int] = {}
    data = {"stay_id": raw["stay_id"].astype(str)}
    for f in schema.features:
        col = raw[f.name]
        if f.kind == "categorical":
            parsed = col.where(col != "", other=None)
            data[f.name] = parsed
            continue
        # float() is correctly rounded; pandas' fast parser is not
        values = np.empty(len(col), dtype=np.float64)
        n_bad = 0
        for i, token in enumerate(col.to_numpy()):
            if token == "":
                values[i] = np.nan
                continue
            try:
                values[i] = float(token)
            except ValueError:
                values[i] = np.nan
                n_bad += 1
                continue
            if f.kind == "binary" and values[i] not in (0.0, 1.0):
                values[i] = np.nan
                n_bad += 1
        if n_bad:
            warnings[f.name] = n_bad
        data[f.name] = values
    table = CohortTable(
        schema=schema,
        frame=pd.DataFrame(data),
        provenance=provenance or str(path),
    )
    table.parse_warnings = warnings
    return table


def write_cohort(table: CohortTable, path) -> None:
    """Write a cohort CSV (missing cells as empty strings, binaries as 0/1)."""
    out = {}
    out["stay_id"] = table.frame["stay_id"].astype(str)
    for f in table.schema.features:
        col = table.frame[f.name]
        if f.kind == "categorical":
            out[f.name] = col.fillna("")
        elif f.kind == "binary":
            vals = col.to_numpy(dtype=np.float64)
            text = np.where(np.isnan(vals), "", np.where(vals == 1.0, "1", "0"))
            out[f.name] = text
        else:
            out[f.name] = col
    # 17 significant digits guarantee exact float64 round-trips
    pd.DataFrame(out).to_csv(path, index=False, float_format="%.17g")


RULE_LOS = "total_los_below_icu_los"
RULE_DEATH_DISCHARGE = "death_with_discharge_location"
RULE_DEATH_READMISSION = "death_with_readmission"

_CHECK_COLUMNS = (
    "total_los",
    "icu_los",
    "hospital_mortality",
    "discharge_location",
    "readmission_30d",
)
_DISCHARGE_BINARIES = ("discharged_home", "discharged_skilled_facility", "discharged_hospice")


def apply_consistency_checks(table: CohortTable) -> tuple[CohortTable, PreprocessReport]:
    """Fix contradictory rows in a fixed rule order; death records win.

    Rules, in order: total LOS below ICU LOS is raised to the ICU LOS;
    in-hospital death with a discharge location clears the location (and
    any derived discharge indicator columns); in-hospital death with a
    recorded readmission clears the readmission flag.
    """
    for col in _CHECK_COLUMNS:
        if col not in table.frame.columns:
            raise ValueError(f"consistency checks require column {col!r}")
    out = table.copy()
    frame = out.frame

    total = frame["total_los"].to_numpy(dtype=np.float64)
    icu = frame["icu_los"].to_numpy(dtype=np.float64)
    los_mask = (~np.isnan(total)) & (~np.isnan(icu)) & (total < icu)
    frame.loc[los_mask, "total_los"] = icu[los_mask]

    dead = frame["hospital_mortality"].to_numpy(dtype=np.float64) == 1.0
    discharge_mask = dead & frame["discharge_location"].notna().to_numpy()
    frame.loc[discharge_mask, "discharge_location"] = None
    for col in _DISCHARGE_BINARIES:
        if col in frame.columns:
            frame.loc[discharge_mask, col] = 0.0

    readmit = frame["readmission_30d"].to_numpy(dtype=np.float64)
    readmit_mask = dead & (readmit == 1.0)
    frame.loc[readmit_mask, "readmission_30d"] = np.nan

    report = PreprocessReport(
        rule_counts=[
            (RULE_LOS, int(los_mask.sum())),
            (RULE_DEATH_DISCHARGE, int(discharge_mask.sum())),
            (RULE_DEATH_READMISSION, int(readmit_mask.sum())),
        ]
    )
    return out, report


DEFAULT_IMPUTATION = {"dnr": 0.0, "readmission_30d": 0.0}


def impute_defaults(table: CohortTable, defaults: dict | None = None) -> tuple[CohortTable, list]:
    """Fill missing cells with default values, returning per-feature counts."""
    defaults = DEFAULT_IMPUTATION if defaults is None else defaults
    out = table.copy()
    counts = []
    for name, value in defaults.items():
        if name not in out.frame.columns:
            continue
        mask = out.frame[name].isna()
        n = int(mask.sum())
        if n:
            out.frame.loc[mask, name] = value
        counts.append((name, n))
    return out, counts


def _timestamp(value):
    if value is None:
        return None
    if isinstance(value, float) and math.isnan(value):
        return None
    if isinstance(value, str):
        if not value:
            return None
        return datetime.fromisoformat(value)
    return value


def derive_ed_admission(ed_in_time, ed_out_time, hosp_admit_time) -> int:
    """1 iff a coherent ED visit exists that starts no later than hospital admission.

    Missing ED times, an ED discharge recorded before the ED admission,
    or an ED visit starting after hospital admission all yield 0.
    """
    ed_in = _timestamp(ed_in_time)
    ed_out = _timestamp(ed_out_time)
    admit = _timestamp(hosp_admit_time)
    if ed_in is None or ed_out is None or admit is None:
        return 0
    if ed_out < ed_in:
        return 0
    if ed_in > admit:
        return 0
    return 1


def derive_surgery_flag(admission_service: str, surgical_services=DEFAULT_SURGICAL_SERVICES) -> int:
    """1 iff the admission service is one of the configured surgical services."""
    if admission_service is None:
        return 0
    return int(str(admission_service).strip().lower() in surgical_services)


def derive_code_status(statuses) -> int:
    """DNR flag from the code statuses recorded over a stay.

    An empty list defaults to full code. Any DNR entry, or more than one
    distinct status over the stay, flags the stay as DNR.
    """
    normalized = []
    for status in statuses:
        token = str(status).strip().lower()
        if token not in CODE_STATUS_TOKENS:
            raise ValueError(f"unrecognized code status: {status!r}")
        normalized.append(token)
    if not normalized:
        return 0
    if any(CODE_STATUS_TOKENS[t] == 1 for t in normalized):
        return 1
    if len(set(normalized)) > 1:
        return 1
    return 0


def map_discharge(raw_location, mapping=DEFAULT_DISCHARGE_MAP):
    """Collapse a raw discharge location into {home, skilled_facility, hospice}."""
    if raw_location is None:
        return None
    if isinstance(raw_location, float) and math.isnan(raw_location):
        return None
    token = str(raw_location).strip().lower()
    if not token:
        return None
    if token not in mapping:
        raise ValueError(f"unmapped discharge location: {raw_location!r}")
    return mapping[token]


def drug_days(events, drug_class: str, class_lists=DEFAULT_DRUG_CLASSES) -> int:
    """Number of distinct calendar days with at least one event in the class.

    Unknown drug names are ignored.
    """
    if drug_class not in class_lists:
        raise ValueError(f"unknown drug class: {drug_class!r}")
    members = class_lists[drug_class]
    days = set()
    for name, when in events:
        if str(name).strip().lower() not in members:
            continue
        ts = _timestamp(when)
        days.add(ts.date() if isinstance(ts, datetime) else ts)
    return len(days)


def standardize(table: CohortTable) -> StandardizedMatrix:
    """Z-score the clustering features (sample stddev, n - 1 denominator).

    Constant columns are emitted as all zeros and flagged rather than
    raising, because downstream subsampling can legitimately produce them.
    """
    names = table.schema.clustering_names
    if not names:
        raise ValueError("schema has no clustering features")
    if table.n_rows < 2:
        raise ValueError("standardization requires at least two rows")
    matrix = np.column_stack([table.column(n) for n in names])
    nan_cols = [n for n, bad in zip(names, np.isnan(matrix).any(axis=0)) if bad]
    if nan_cols:
        raise ValueError(f"clustering features contain missing cells: {nan_cols}")
    means = matrix.mean(axis=0)
    stddevs = matrix.std(axis=0, ddof=1)
    constant = stddevs == 0.0
    safe = np.where(constant, 1.0, stddevs)
    z = (matrix - means) / safe
    z[:, constant] = 0.0
    return StandardizedMatrix(
        matrix=z,
        means=means,
        stddevs=stddevs,
        feature_names=tuple(names),
        constant_flags=constant,
    )


def sample(table: CohortTable, n: int, seed: int) -> tuple[CohortTable, CohortTable]:
    """Uniform sample without replacement; (sample, remainder) partition the table."""
    if n > table.n_rows:
        raise ValueError(f"cannot sample {n} rows from {table.n_rows}")
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(table.n_rows, size=n, replace=False))
    mask = np.zeros(table.n_rows, dtype=bool)
    mask[chosen] = True
    sampled = CohortTable(
        schema=table.schema,
        frame=table.frame.iloc[chosen].reset_index(drop=True),
        provenance=f"{table.provenance} [sample n={n} seed={seed}]",
    )
    remainder = CohortTable(
        schema=table.schema,
        frame=table.frame.iloc[~mask].reset_index(drop=True),
        provenance=f"{table.provenance} [remainder n={table.n_rows - n} seed={seed}]",
    )
    return sampled, remainder
