"""Episode data model: CSV I/O, validation, covariate transforms, imputation.

A collection of episodes is a :class:`pandas.DataFrame` with one row per
(episode, landmark) and the canonical columns ``ID, ADMISSION_ID, LM,
eventtime, type`` followed by covariate columns. :class:`EpisodeRecord` is the
typed view of one such row.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .splines import DEFAULT_QUANTILES, rcs_basis, rcs_knots

ID = "ID"
ADMISSION_ID = "ADMISSION_ID"
LM = "LM"
EVENTTIME = "eventtime"
TYPE = "type"
KEY_COLUMNS = (ID, ADMISSION_ID, LM, EVENTTIME, TYPE)
REQUIRED_COLUMNS = (ID, LM, EVENTTIME, TYPE)

CENSORED, CLABSI, DEATH, DISCHARGE = 0, 1, 2, 3
EVENT_CODES = (CENSORED, CLABSI, DEATH, DISCHARGE)
COMPETING = (DEATH, DISCHARGE)


@dataclass(frozen=True)
class Covariate:
    name: str
    label: str
    kind: str  # "binary" or "continuous"
    window: str = ""


# Column names for the 21 predictors. Shipped as data/covariates.csv too.
COVARIATES: tuple[Covariate, ...] = (
    Covariate("CAT_CVC", "Central venous catheter", "binary", "In the last 24h"),
    Covariate("CAT_port_a_cath", "Port-a-cath", "binary", "In the last 24h"),
    Covariate("CAT_tunneled_CVC", "Tunneled central venous catheter", "binary", "In the last 24h"),
    Covariate("CAT_PICC", "Peripherally inserted central catheter", "binary", "In the last 24h"),
    Covariate("CAT_loc_subclavian", "Subclavian", "binary", "In the last 24h"),
    Covariate("CAT_loc_jugular", "Jugular", "binary", "In the last 24h"),
    Covariate("MED_TPN", "Total parenteral nutrition", "binary", "In the last 7 days"),
    Covariate("MED_antibacterials", "Antibacterials for systematic use", "binary", "In the last 7 days"),
    Covariate("MED_antineoplastic", "Antineoplastic agents", "binary", "In the last 7 days"),
    Covariate("CLABSI_history", "History of CLABSI", "binary", "In the last 3 months"),
    Covariate("COM_tumor", "Tumor", "binary", "Before current LM"),
    Covariate("COM_lymphoma", "Lymphoma", "binary", "Before current LM"),
    Covariate("COM_transplant", "Transplant", "binary", "Before current LM"),
    Covariate("MS_is_ICU_unit", "ICU unit", "binary", "In the last 24h"),
    Covariate("MS_mechanical_ventilation", "Mechanical ventilation", "binary", "In the last 24h"),
    Covariate("VS_temperature_max", "Temperature (degC)", "continuous", "Maximum value in the last 24h"),
    Covariate("VS_systolic_bp_last", "Systolic blood pressure (mmHg)", "continuous", "Last value in the last 24h"),
    Covariate("LAB_WBC_last", "WBC count (10^9/L)", "continuous", "Last value in the last 24h"),
    Covariate("LAB_CRP_last", "CRP (mg/L)", "continuous", "Last value in the last 24h"),
    Covariate("LAB_positive_culture", "Positive culture, of any other type than blood", "binary", "In the last 17 days"),
    Covariate("ADM_from_home", "Admitted from home", "binary", "Baseline"),
)
COVARIATE_KINDS = {c.name: c.kind for c in COVARIATES}
NONNEGATIVE = {"VS_temperature_max", "VS_systolic_bp_last", "LAB_WBC_last", "LAB_CRP_last"}


class SchemaError(ValueError):
    """A required column or variable is absent."""


class ValidationError(ValueError):
    """A row violates an episode invariant."""

    def __init__(self, message: str, row: int | None = None):
        super().__init__(message if row is None else f"row {row}: {message}")
        self.row = row


@dataclass(frozen=True)
class EpisodeRecord:
    episode_id: str
    admission_id: str
    landmark: int
    eventtime: float
    event_type: int
    covariates: Mapping[str, float] = field(default_factory=dict)

    @classmethod
    def from_row(cls, row: Mapping, covariates: Sequence[str]) -> "EpisodeRecord":
        return cls(
            episode_id=str(row[ID]),
            admission_id=str(row[ADMISSION_ID]),
            landmark=int(row[LM]),
            eventtime=float(row[EVENTTIME]),
            event_type=int(row[TYPE]),
            covariates={c: float(row[c]) for c in covariates},
        )


DERIVED_PREFIXES = ("lm_", "y_")


def covariate_columns(df: pd.DataFrame) -> list[str]:
    """Every non-key column, in frame order (derived ``lm_*`` features and ``y_*`` labels excluded)."""
    return [c for c in df.columns if c not in KEY_COLUMNS and not c.startswith(DERIVED_PREFIXES)]


def records(df: pd.DataFrame) -> list[EpisodeRecord]:
    covs = covariate_columns(df)
    return [EpisodeRecord.from_row(r, covs) for r in df.to_dict("records")]


def validate_episodes(df: pd.DataFrame) -> pd.DataFrame:
    """Check the episode invariants; raise on the first violated row."""
    missing = [c for c in REQUIRED_COLUMNS if c not in df.columns]
    if missing:
        raise SchemaError(f"missing required column {missing[0]!r}")
    if df.empty:
        return df
    lm = df[LM].to_numpy()
    et = df[EVENTTIME].to_numpy(dtype=float)
    ty = df[TYPE].to_numpy()

    def first(mask, message):
        bad = np.flatnonzero(mask)
        if bad.size:
            raise ValidationError(message, int(bad[0]))

    first(np.isnan(et), "eventtime is missing")
    first(et < 0, "eventtime is negative")
    first((lm < 0) | (lm != np.round(lm)), "landmark must be a nonnegative integer")
    first(et < lm, "eventtime precedes the landmark")
    first(~np.isin(ty, EVENT_CODES), f"unknown event code (allowed {EVENT_CODES})")
    first(df.duplicated([ID, LM]).to_numpy(), "episode appears twice at the same landmark")
    for name in covariate_columns(df):
        col = df[name].to_numpy(dtype=float)
        if COVARIATE_KINDS.get(name) == "binary":
            first(~np.isnan(col) & ~np.isin(col, (0.0, 1.0)), f"{name} must be 0 or 1")
        if name in NONNEGATIVE:
            first(col < 0, f"{name} must be nonnegative")
    return df


def load_episodes(
    path: str | Path,
    schema: Mapping[str, str] | None = None,
    covariates: Sequence[str] | None = None,
) -> pd.DataFrame:
    """Read an episode CSV into a validated frame.

    `schema` maps canonical column names (``ID``, ``LM``, ...) to the names
    used in the file. ``ADMISSION_ID`` defaults to ``ID`` when absent. Empty
    fields are read as missing. Row order is preserved.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    if schema:
        raw = raw.rename(columns={v: k for k, v in schema.items()})
    for col in REQUIRED_COLUMNS:
        if col not in raw.columns:
            raise SchemaError(f"missing required column {col!r} in {path}")
    if ADMISSION_ID not in raw.columns:
        raw[ADMISSION_ID] = raw[ID]
    if covariates is None:
        covariates = [c for c in raw.columns if c not in KEY_COLUMNS]
    else:
        absent = [c for c in covariates if c not in raw.columns]
        if absent:
            raise SchemaError(f"missing covariate column {absent[0]!r} in {path}")

    def numeric(name):
        values = []
        for i, text in enumerate(raw[name].str.strip()):
            try:
                values.append(float(text) if text else np.nan)
            except ValueError:
                raise ValidationError(f"non-numeric value {text!r} in column {name!r}", i) from None
        return pd.Series(values, index=raw.index, dtype=float)

    df = pd.DataFrame({ID: raw[ID].astype(str), ADMISSION_ID: raw[ADMISSION_ID].astype(str)})
    lm = numeric(LM)
    ty = numeric(TYPE)
    for name, col in ((LM, lm), (TYPE, ty)):
        bad = np.flatnonzero(col.isna().to_numpy() | (col != np.round(col)).to_numpy())
        if bad.size:
            raise ValidationError(f"{name} must be an integer", int(bad[0]))
    df[LM] = lm.astype(int)
    df[EVENTTIME] = numeric(EVENTTIME)
    df[TYPE] = ty.astype(int)
    for c in covariates:
        df[c] = numeric(c)
    return validate_episodes(df.reset_index(drop=True))


def format_number(x: float) -> str:
    """Shortest round-trip text for a float; integral values lose the ``.0``."""
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    x = float(x)
    if x.is_integer() and abs(x) < 1e15:
        return str(int(x))
    return repr(x)


def format_time(x: float, min_decimals: int = 2) -> str:
    """Shortest round-trip text padded to at least `min_decimals` decimals."""
    if x is None or math.isnan(x):
        return ""
    text = repr(float(x))
    if "e" in text or "inf" in text:
        return text
    whole, _, frac = text.partition(".")
    frac = frac.rstrip("0") if frac != "0" else ""
    return f"{whole}.{frac.ljust(min_decimals, '0')}"


def write_episodes(df: pd.DataFrame, path, covariates: Sequence[str] | None = None) -> None:
    """Write episodes in the canonical CSV layout (inverse of :func:`load_episodes`)."""
    covariates = covariate_columns(df) if covariates is None else list(covariates)
    header = list(KEY_COLUMNS) + covariates
    with open_output(path) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in df[header].itertuples(index=False):
            writer.writerow(
                [row[0], row[1], str(int(row[2])), format_time(row[3]), str(int(row[4]))]
                + [format_number(v) for v in row[5:]]
            )


class open_output:
    """Open a path for writing, or pass through an already-open text stream."""

    def __init__(self, target):
        self.target = target
        self.fh = None

    def __enter__(self):
        if hasattr(self.target, "write"):
            return self.target
        self.fh = open(Path(self.target), "w", newline="", encoding="utf-8")
        return self.fh

    def __exit__(self, *exc):
        if self.fh is not None:
            self.fh.close()


# --------------------------------------------------------------------------
# transforms


@dataclass(frozen=True)
class TransformConfig:
    covariates: tuple[str, ...]
    spline_variable: str | None = "VS_systolic_bp_last"
    log_variables: tuple[str, ...] = ("LAB_WBC_last", "LAB_CRP_last")
    log_offset: float = 1.0
    knot_quantiles: tuple[float, ...] = DEFAULT_QUANTILES
    standardize: bool = True


@dataclass(frozen=True)
class TransformSpec:
    covariates: tuple[str, ...]
    spline_variable: str | None
    knots: tuple[float, ...]
    log_variables: tuple[str, ...]
    log_offset: float
    means: Mapping[str, float]
    sds: Mapping[str, float]

    @property
    def columns(self) -> list[str]:
        cols = []
        for c in self.covariates:
            cols.append(c)
            if c == self.spline_variable:
                cols.extend(f"{c}_rcs{j}" for j in range(1, len(self.knots) - 1))
        return cols

    def to_dict(self) -> dict:
        return {
            "covariates": list(self.covariates),
            "spline_variable": self.spline_variable,
            "knots": list(self.knots),
            "log_variables": list(self.log_variables),
            "log_offset": self.log_offset,
            "means": dict(self.means),
            "sds": dict(self.sds),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "TransformSpec":
        return cls(
            covariates=tuple(d["covariates"]),
            spline_variable=d["spline_variable"],
            knots=tuple(d["knots"]),
            log_variables=tuple(d["log_variables"]),
            log_offset=float(d["log_offset"]),
            means=dict(d["means"]),
            sds=dict(d["sds"]),
        )


def is_binary(name: str, values) -> bool:
    kind = COVARIATE_KINDS.get(name)
    if kind is not None:
        return kind == "binary"
    v = np.asarray(values, dtype=float)
    v = v[~np.isnan(v)]
    return v.size > 0 and bool(np.isin(v, (0.0, 1.0)).all())


def _expand(df: pd.DataFrame, covariates, spline_variable, knots, log_variables, log_offset):
    out = {}
    for c in covariates:
        if c not in df.columns:
            raise SchemaError(f"variable {c!r} absent from data")
        x = df[c].to_numpy(dtype=float)
        if c in log_variables:
            x = np.log(x + log_offset)
        if c == spline_variable:
            basis = rcs_basis(x, knots)
            out[c] = basis[:, 0]
            for j in range(1, basis.shape[1]):
                out[f"{c}_rcs{j}"] = basis[:, j]
        else:
            out[c] = x
    return pd.DataFrame(out, index=df.index)


def fit_transforms(train: pd.DataFrame, config: TransformConfig) -> TransformSpec:
    """Learn knots and standardization parameters from training rows only."""
    if len(train) == 0:
        raise ValueError("cannot fit transforms on an empty training set")
    covs = tuple(config.covariates)
    spline = config.spline_variable if config.spline_variable in covs else None
    logs = tuple(v for v in config.log_variables if v in covs)
    knots: tuple[float, ...] = ()
    if spline is not None:
        x = train[spline].to_numpy(dtype=float)
        if spline in logs:
            x = np.log(x + config.log_offset)
        knots = tuple(float(k) for k in rcs_knots(x, config.knot_quantiles))
    expanded = _expand(train, covs, spline, knots, logs, config.log_offset)
    means, sds = {}, {}
    if config.standardize:
        for col in expanded.columns:
            base = col.split("_rcs")[0] if col.startswith(f"{spline}_rcs") else col
            if base not in logs and base != spline and is_binary(base, train[base]):
                continue
            x = expanded[col].to_numpy(dtype=float)
            x = x[~np.isnan(x)]
            sd = float(np.std(x, ddof=1)) if x.size > 1 else 0.0
            if not sd > 1e-12 * max(1.0, float(np.abs(x).max())):
                raise ValueError(f"standard deviation of {col!r} is zero on the training set")
            means[col] = float(np.mean(x))
            sds[col] = sd
    return TransformSpec(covs, spline, knots, logs, float(config.log_offset), means, sds)


def apply_transforms(df: pd.DataFrame, spec: TransformSpec) -> pd.DataFrame:
    """Design matrix with named columns (see :attr:`TransformSpec.columns`)."""
    out = _expand(df, spec.covariates, spec.spline_variable, spec.knots, spec.log_variables, spec.log_offset)
    for col, mu in spec.means.items():
        out[col] = (out[col] - mu) / spec.sds[col]
    return out


def invert_standardization(design: pd.DataFrame, spec: TransformSpec) -> pd.DataFrame:
    out = design.copy()
    for col, mu in spec.means.items():
        out[col] = out[col] * spec.sds[col] + mu
    return out


# --------------------------------------------------------------------------
# imputation


@dataclass(frozen=True)
class ImputationModel:
    fill: Mapping[str, float]

    def to_dict(self) -> dict:
        return {"fill": dict(self.fill)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ImputationModel":
        return cls(dict(d["fill"]))


def fit_impute(train: pd.DataFrame, variables: Iterable[str] | None = None) -> ImputationModel:
    """Mean for continuous variables, mode (smallest on ties) for binary ones."""
    variables = covariate_columns(train) if variables is None else list(variables)
    fill = {}
    for name in variables:
        if name not in train.columns:
            raise SchemaError(f"variable {name!r} absent from data")
        x = train[name].to_numpy(dtype=float)
        x = x[~np.isnan(x)]
        if x.size == 0:
            raise ValueError(f"variable {name!r} has no observed training values")
        if is_binary(name, x):
            vals, counts = np.unique(x, return_counts=True)
            fill[name] = float(vals[np.argmax(counts)])
        else:
            fill[name] = float(np.mean(x))
    return ImputationModel(fill)


def impute(df: pd.DataFrame, model: ImputationModel) -> pd.DataFrame:
    """Fill missing values with the training-learned constants."""
    if not any(df[c].isna().any() for c in model.fill if c in df.columns):
        return df
    out = df.copy()
    for name, value in model.fill.items():
        if name in out.columns:
            out[name] = out[name].fillna(value)
    return out
