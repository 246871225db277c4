"""Severity scoring: Charlson index, two-stage lab-based acuity score, and
calibrated mortality probability.

All point tables and regression coefficients are data, loaded from JSON
definition files. The bundled defaults are illustrative and non-clinical;
they exist so the engine is testable and demonstrable without reproducing
proprietary scoring tables.

The lab score runs in two stages: a preliminary logistic model classifies
each stay as low- or high-risk, then the main stage picks the most severe
in-window value per variable, imputing normal values for low-risk stays
and severe values for high-risk stays when a variable was never observed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .special import logistic

WORST_DIRECTIONS = ("max", "min", "farthest_from_normal")

RISK_LOW = "low"
RISK_HIGH = "high"


@dataclass(frozen=True)
class ScoreBin:
    lower: float
    points: int


@dataclass(frozen=True)
class ScoreVariable:
    name: str
    bins: tuple
    normal_value: float
    severe_value: float
    worst_direction: str = "farthest_from_normal"
    unit: str = ""

    def __post_init__(self):
        if self.worst_direction not in WORST_DIRECTIONS:
            raise ValueError(f"unknown worst_direction: {self.worst_direction!r}")
        lowers = [b.lower for b in self.bins]
        if not lowers or lowers[0] != -math.inf:
            raise ValueError(f"{self.name}: first bin must start at -inf to cover the line")
        if any(b2 <= b1 for b1, b2 in zip(lowers, lowers[1:])):
            raise ValueError(f"{self.name}: bin lower bounds must be strictly increasing")
        if any(b.points < 0 for b in self.bins):
            raise ValueError(f"{self.name}: points must be non-negative")
        if self.points_for(self.normal_value) != 0:
            raise ValueError(f"{self.name}: normal value must fall in a zero-point bin")
        if self.points_for(self.severe_value) <= 0:
            raise ValueError(f"{self.name}: severe value must fall in a positive-point bin")

    def points_for(self, value: float) -> int:
        if not math.isfinite(value):
            raise ValueError(f"{self.name}: cannot score non-finite value")
        points = self.bins[0].points
        for b in self.bins:
            if value >= b.lower:
                points = b.points
            else:
                break
        return points


@dataclass(frozen=True)
class ScoreDefinition:
    variables: tuple
    risk_threshold: float = 0.06
    window_hours: float = 72.0

    def __post_init__(self):
        names = [v.name for v in self.variables]
        if len(set(names)) != len(names):
            raise ValueError("score variables must have unique names")
        if not 0.0 < self.risk_threshold < 1.0:
            raise ValueError("risk threshold must be in (0, 1)")
        if self.window_hours <= 0:
            raise ValueError("window must be positive")

    @property
    def variable_names(self) -> list[str]:
        return [v.name for v in self.variables]

    def variable(self, name: str) -> ScoreVariable:
        for v in self.variables:
            if v.name == name:
                return v
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "risk_threshold": self.risk_threshold,
            "window_hours": self.window_hours,
            "variables": [
                {
                    "name": v.name,
                    "unit": v.unit,
                    "worst_direction": v.worst_direction,
                    "normal_value": v.normal_value,
                    "severe_value": v.severe_value,
                    "bins": [
                        {
                            "lower": "-inf" if b.lower == -math.inf else b.lower,
                            "points": b.points,
                        }
                        for b in v.bins
                    ],
                }
                for v in self.variables
            ],
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ScoreDefinition":
        variables = []
        for item in payload["variables"]:
            bins = tuple(
                ScoreBin(
                    lower=-math.inf if b["lower"] in ("-inf", "-Infinity") else float(b["lower"]),
                    points=int(b["points"]),
                )
                for b in item["bins"]
            )
            variables.append(
                ScoreVariable(
                    name=item["name"],
                    bins=bins,
                    normal_value=float(item["normal_value"]),
                    severe_value=float(item["severe_value"]),
                    worst_direction=item.get("worst_direction", "farthest_from_normal"),
                    unit=item.get("unit", ""),
                )
            )
        return cls(
            variables=tuple(variables),
            risk_threshold=float(payload.get("risk_threshold", 0.06)),
            window_hours=float(payload.get("window_hours", 72.0)),
        )


@dataclass(frozen=True)
class PreliminaryModel:
    """Logistic coefficients for the low/high risk screen."""

    intercept: float
    age: float
    gender: float
    ed_admission: float
    bun_creatinine_ratio: float
    sodium: float
    aniongap_bicarbonate_ratio: float

    FEATURES = (
        "age",
        "gender",
        "ed_admission",
        "bun_creatinine_ratio",
        "sodium",
        "aniongap_bicarbonate_ratio",
    )

    @classmethod
    def from_dict(cls, payload: dict) -> "PreliminaryModel":
        return cls(**{k: float(payload[k]) for k in ("intercept",) + cls.FEATURES})

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("intercept",) + self.FEATURES}


@dataclass(frozen=True)
class MortalityModel:
    """Logistic calibration of the lab score into 30-day mortality."""

    intercept: float
    age: float
    gender: float
    race: float
    score: float
    score_squared: float
    race_encoding: dict

    @classmethod
    def from_dict(cls, payload: dict) -> "MortalityModel":
        return cls(
            intercept=float(payload["intercept"]),
            age=float(payload["age"]),
            gender=float(payload["gender"]),
            race=float(payload["race"]),
            score=float(payload["score"]),
            score_squared=float(payload["score_squared"]),
            race_encoding={k: float(v) for k, v in payload["race_encoding"].items()},
        )

    def to_dict(self) -> dict:
        return {
            "intercept": self.intercept,
            "age": self.age,
            "gender": self.gender,
            "race": self.race,
            "score": self.score,
            "score_squared": self.score_squared,
            "race_encoding": dict(self.race_encoding),
        }


@dataclass(frozen=True)
class LabObservation:
    variable: str
    hours: float
    value: float


class LabPanel:
    """Timestamped lab observations for one stay (hours from admission)."""

    def __init__(self, observations):
        obs = []
        for item in observations:
            if isinstance(item, LabObservation):
                o = item
            else:
                o = LabObservation(variable=item[0], hours=float(item[1]), value=float(item[2]))
            if not math.isfinite(o.value):
                raise ValueError(f"non-finite observation for {o.variable}")
            obs.append(o)
        self.observations = obs

    def in_window(self, variable: str, window_hours: float):
        return [
            o for o in self.observations if o.variable == variable and o.hours <= window_hours
        ]


@dataclass(frozen=True)
class VariableScore:
    name: str
    value: float
    points: int
    imputed: bool


@dataclass(frozen=True)
class LapsResult:
    preliminary_probability: float
    risk_class: str
    per_variable: tuple
    total: int

    def __post_init__(self):
        if self.total != sum(v.points for v in self.per_variable):
            raise ValueError("total does not equal the sum of per-variable points")


def charlson_index(condition_flags, weights) -> int:
    """Weighted sum over present comorbid conditions."""
    total = 0
    for condition in condition_flags:
        if condition not in weights:
            raise ValueError(f"unknown condition: {condition!r}")
        total += int(weights[condition])
    return total


def classify_risk(probability: float, threshold: float = 0.06) -> str:
    """High-risk iff probability >= threshold (boundary is inclusive)."""
    return RISK_HIGH if probability >= threshold else RISK_LOW


def laps2_preliminary(inputs: dict, model: PreliminaryModel, threshold: float = 0.06):
    """Preliminary mortality screen; returns (probability, risk_class)."""
    lp = model.intercept
    for name in PreliminaryModel.FEATURES:
        if name not in inputs:
            raise ValueError(f"preliminary input {name!r} is missing")
        value = float(inputs[name])
        if not math.isfinite(value):
            raise ValueError(f"preliminary input {name!r} is not finite")
        lp += getattr(model, name) * value
    p = logistic(lp)
    return p, classify_risk(p, threshold)


def _severity_key(variable: ScoreVariable, value: float) -> float:
    if variable.worst_direction == "max":
        return value
    if variable.worst_direction == "min":
        return -value
    return abs(value - variable.normal_value)


def worst_value(panel: LabPanel, variable: str, definition: ScoreDefinition):
    """Most medically severe in-window observation of a variable, or None.

    Primary criterion is the bin score; ties between bins with equal
    points go to the observation farthest from normal (per the variable's
    direction), then to the smaller value for full determinism.
    """
    var = definition.variable(variable)
    candidates = panel.in_window(variable, definition.window_hours)
    if not candidates:
        return None
    best = min(
        candidates,
        key=lambda o: (-var.points_for(o.value), -_severity_key(var, o.value), o.value),
    )
    return best.value


def laps2_secondary(
    panel: LabPanel,
    risk_class: str,
    definition: ScoreDefinition,
    preliminary_probability: float = math.nan,
) -> LapsResult:
    """Score every definition variable, imputing by risk class when unobserved."""
    if risk_class not in (RISK_LOW, RISK_HIGH):
        raise ValueError(f"unknown risk class: {risk_class!r}")
    per_variable = []
    for var in definition.variables:
        observed = worst_value(panel, var.name, definition)
        if observed is None:
            chosen = var.normal_value if risk_class == RISK_LOW else var.severe_value
            imputed = True
        else:
            chosen = observed
            imputed = False
        per_variable.append(
            VariableScore(
                name=var.name,
                value=chosen,
                points=var.points_for(chosen),
                imputed=imputed,
            )
        )
    return LapsResult(
        preliminary_probability=preliminary_probability,
        risk_class=risk_class,
        per_variable=tuple(per_variable),
        total=sum(v.points for v in per_variable),
    )


def laps2_score(
    panel: LabPanel,
    preliminary_inputs: dict,
    preliminary_model: PreliminaryModel,
    definition: ScoreDefinition,
) -> LapsResult:
    """Full two-stage scoring for one stay."""
    p, risk = laps2_preliminary(preliminary_inputs, preliminary_model, definition.risk_threshold)
    return laps2_secondary(panel, risk, definition, preliminary_probability=p)


def predicted_mortality(
    laps2: float, age: float, gender: float, race, model: MortalityModel
) -> float:
    """Calibrated 30-day mortality probability from the lab score."""
    if isinstance(race, str):
        if race not in model.race_encoding:
            raise ValueError(f"unknown race category: {race!r}")
        race_value = model.race_encoding[race]
    else:
        race_value = float(race)
    lp = (
        model.intercept
        + model.age * age
        + model.gender * gender
        + model.race * race_value
        + model.score * laps2
        + model.score_squared * laps2 * laps2
    )
    return logistic(lp)


def load_score_definition(path) -> ScoreDefinition:
    with open(path, "r", encoding="utf-8") as fh:
        return ScoreDefinition.from_dict(json.load(fh))


def save_score_definition(definition: ScoreDefinition, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(definition.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_bundled(name: str) -> dict:
    text = resources.files("icuclust.data").joinpath(name).read_text(encoding="utf-8")
    return json.loads(text)


def default_score_definition() -> ScoreDefinition:
    return ScoreDefinition.from_dict(_load_bundled("score_definition.json"))


def default_preliminary_model() -> PreliminaryModel:
    return PreliminaryModel.from_dict(_load_bundled("preliminary_model.json"))


def default_mortality_model() -> MortalityModel:
    return MortalityModel.from_dict(_load_bundled("mortality_model.json"))


def default_charlson_weights() -> dict:
    return {k: int(v) for k, v in _load_bundled("charlson_weights.json").items()}


def score_events_frame(
    events,
    definition: ScoreDefinition,
    preliminary_model: PreliminaryModel,
    mortality_model: MortalityModel | None = None,
):
    """Batch scoring over a long-format events table.

    ``events`` is a DataFrame with columns (stay_id, variable, timestamp,
    value); timestamps are hours from hospital admission. The six
    preliminary inputs ride along as rows with their feature names (first
    occurrence wins); an optional ``race_code`` row provides the already
    encoded race value for the mortality model.
    """
    import pandas as pd

    required = {"stay_id", "variable", "timestamp", "value"}
    if not required.issubset(events.columns):
        raise ValueError(f"events frame must have columns {sorted(required)}")

    rows = []
    for stay_id, group in events.groupby("stay_id", sort=True):
        prelim = {}
        race_code = None
        panel_obs = []
        for rec in group.itertuples(index=False):
            name = str(rec.variable)
            if name in PreliminaryModel.FEATURES and name not in prelim:
                prelim[name] = float(rec.value)
            if name == "race_code" and race_code is None:
                race_code = float(rec.value)
            if name in definition.variable_names:
                panel_obs.append((name, float(rec.timestamp), float(rec.value)))
        missing = [f for f in PreliminaryModel.FEATURES if f not in prelim]
        if missing:
            raise ValueError(f"stay {stay_id}: missing preliminary inputs {missing}")
        result = laps2_score(LabPanel(panel_obs), prelim, preliminary_model, definition)
        row = {
            "stay_id": stay_id,
            "preliminary_probability": result.preliminary_probability,
            "risk_class": result.risk_class,
            "laps2_total": result.total,
            "n_observed": sum(1 for v in result.per_variable if not v.imputed),
            "n_imputed": sum(1 for v in result.per_variable if v.imputed),
        }
        if mortality_model is not None:
            row["predicted_mortality"] = predicted_mortality(
                laps2=result.total,
                age=prelim["age"],
                gender=prelim["gender"],
                race=race_code if race_code is not None else 0.0,
                model=mortality_model,
            )
        rows.append(row)
    return pd.DataFrame(rows)
