"""Landmark risk sets, the stacked super-dataset and its counting-process expansion."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import pandas as pd

from .data_model import (
    ADMISSION_ID,
    CENSORED,
    CLABSI,
    COMPETING,
    EVENTTIME,
    ID,
    LM,
    TYPE,
    covariate_columns,
    format_number,
    format_time,
    open_output as _open,
)

LM_LIN = "lm_lin"
LM_QUAD = "lm_quad"
DEFAULT_GRID = tuple(range(31))
DEFAULT_WINDOW = 7.0
LM_SCALE = 30.0

TSTART, TSTOP, STATUS = "Tstart", "Tstop", "status"
WEIGHT, COUNT, FAILCODE = "weight.cens", "count", "failcode"


def interaction_names(variable: str) -> tuple[str, str]:
    return f"{LM_LIN}_x_{variable}", f"{LM_QUAD}_x_{variable}"


def landmark_features(s, variable_values=None, scale: float = LM_SCALE):
    """``s/scale`` and ``(s/scale)**2``, optionally times an interacting covariate."""
    lin = np.asarray(s, dtype=float) / scale
    quad = lin**2
    if variable_values is None:
        return lin, quad
    v = np.asarray(variable_values, dtype=float)
    return lin * v, quad * v


@dataclass(frozen=True)
class StackedLandmarkDataset:
    frame: pd.DataFrame
    window: float
    grid: tuple[int, ...]
    interactions: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.frame)

    @property
    def covariates(self) -> list[str]:
        return covariate_columns(self.frame)

    def subset(self, s: int) -> pd.DataFrame:
        return self.frame[self.frame[LM] == s]


@dataclass(frozen=True)
class ExpandedFineGrayDataset:
    frame: pd.DataFrame
    window: float
    grid: tuple[int, ...]
    interactions: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.frame)

    @property
    def covariates(self) -> list[str]:
        return [c for c in covariate_columns(self.frame) if c not in (TSTART, TSTOP, STATUS, WEIGHT, COUNT, FAILCODE)]


def administrative_censor(df: pd.DataFrame, window: float) -> pd.DataFrame:
    """Censor every row at ``LM + window``; rows already inside the window are untouched."""
    horizon = df[LM].to_numpy(dtype=float) + window
    late = df[EVENTTIME].to_numpy(dtype=float) > horizon
    if not late.any():
        return df
    out = df.copy()
    out.loc[late, EVENTTIME] = horizon[late]
    out.loc[late, TYPE] = CENSORED
    return out


def build_landmark_subset(episodes: pd.DataFrame, s: int, w: float) -> pd.DataFrame:
    """Rows at landmark `s` still at risk (``eventtime > s``), censored at ``s + w``."""
    if not w > 0:
        raise ValueError(f"window must be positive, got {w}")
    at_risk = (episodes[LM] == s) & (episodes[EVENTTIME] > s)
    return administrative_censor(episodes[at_risk], w)


def stack_landmarks(
    episodes: pd.DataFrame,
    grid: Sequence[int] = DEFAULT_GRID,
    w: float = DEFAULT_WINDOW,
    interact: Sequence[str] = ("MS_is_ICU_unit",),
) -> StackedLandmarkDataset:
    """Union of the landmark subsets over `grid`, in input row order.

    Adds ``lm_lin = s/30``, ``lm_quad = (s/30)**2`` and, for each variable in
    `interact` present in the data, its products with both.
    """
    grid = tuple(int(s) for s in grid)
    if not grid:
        raise ValueError("landmark grid is empty")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("landmark grid must be strictly increasing")
    if not w > 0:
        raise ValueError(f"window must be positive, got {w}")
    keep = episodes[LM].isin(grid) & (episodes[EVENTTIME] > episodes[LM])
    frame = administrative_censor(episodes[keep], w).reset_index(drop=True)
    frame = frame.copy()
    frame[LM_LIN], frame[LM_QUAD] = landmark_features(frame[LM])
    used = tuple(v for v in interact if v in frame.columns)
    for v in used:
        lin, quad = interaction_names(v)
        frame[lin], frame[quad] = landmark_features(frame[LM], frame[v])
    return StackedLandmarkDataset(frame, float(w), grid, used)


def attach_binary_labels(stacked: StackedLandmarkDataset) -> pd.DataFrame:
    """Binary (CLABSI within the window), multinomial (event code) and +/-1 labels."""
    out = stacked.frame.copy()
    ty = out[TYPE].to_numpy()
    out["y_binary"] = (ty == CLABSI).astype(int)
    out["y_multi"] = ty.astype(int)
    out["y_rmtl"] = np.where(ty == CLABSI, 1, -1)
    return out


# --------------------------------------------------------------------------
# counting-process expansion


def _censoring_km(times: np.ndarray, censored: np.ndarray):
    """Kaplan-Meier of the censoring distribution: (jump times, G at those times)."""
    order = np.argsort(times, kind="mergesort")
    t, c = times[order], censored[order]
    uniq, first = np.unique(t, return_index=True)
    n_at_risk = t.size - first
    d = np.add.reduceat(c.astype(float), first) if t.size else np.zeros(0)
    jump = d > 0
    g = np.cumprod(1.0 - d / n_at_risk)
    return uniq[jump], g[jump]


def _eval_step(jump_t, values, t, left=False):
    idx = np.searchsorted(jump_t, t, side="left" if left else "right")
    padded = np.concatenate([[1.0], values])
    return padded[idx]


def expand_fine_gray(stacked: StackedLandmarkDataset, censoring: str = "administrative") -> ExpandedFineGrayDataset:
    """Counting-process rows for subdistribution-hazard fitting.

    Within each landmark subset, every competing-event row at time ``u``
    gains an extension row ``(u, t_max]`` where ``t_max`` is the last cause-1
    time of that subset, provided ``t_max > u``. With ``censoring=
    "administrative"`` the censoring weight is 1 throughout. With
    ``censoring="km"`` extension rows are split where the subset's
    Kaplan-Meier censoring curve ``G`` jumps and weighted ``G(a)/G(u)`` on
    the piece starting at ``a``.
    """
    if censoring not in ("administrative", "km"):
        raise ValueError(f"unknown censoring mode {censoring!r}")
    src = stacked.frame
    lm = src[LM].to_numpy()
    et = src[EVENTTIME].to_numpy(dtype=float)
    ty = src[TYPE].to_numpy()
    n = len(src)

    # (source row, Tstart, Tstop, count, weight)
    rows = [np.arange(n)]
    starts = [lm.astype(float)]
    stops = [et]
    counts = [np.ones(n, dtype=int)]
    weights = [np.ones(n)]
    for s in np.unique(lm):
        idx = np.flatnonzero(lm == s)
        t1 = et[idx][ty[idx] == CLABSI]
        if t1.size == 0:
            continue
        t_max = t1.max()
        comp = idx[np.isin(ty[idx], COMPETING) & (et[idx] < t_max)]
        if comp.size == 0:
            continue
        if censoring == "administrative":
            rows.append(comp)
            starts.append(et[comp])
            stops.append(np.full(comp.size, t_max))
            counts.append(np.full(comp.size, 2))
            weights.append(np.ones(comp.size))
            continue
        jump_t, g = _censoring_km(et[idx], ty[idx] == CENSORED)
        for i in comp:
            u = et[i]
            cuts = jump_t[(jump_t > u) & (jump_t < t_max)]
            a = np.concatenate([[u], cuts])
            b = np.concatenate([cuts, [t_max]])
            g_u = _eval_step(jump_t, g, u)
            rows.append(np.full(a.size, i))
            starts.append(a)
            stops.append(b)
            counts.append(np.full(a.size, 2))
            weights.append(_eval_step(jump_t, g, a) / g_u)

    row = np.concatenate(rows)
    count = np.concatenate(counts)
    order = np.lexsort((count, row))
    row, count = row[order], count[order]
    base = src.iloc[row].reset_index(drop=True)
    out = pd.DataFrame({ID: base[ID], ADMISSION_ID: base[ADMISSION_ID], LM: base[LM]})
    out[TSTART] = np.concatenate(starts)[order]
    out[TSTOP] = np.concatenate(stops)[order]
    out[STATUS] = base[TYPE].to_numpy()
    for c in base.columns:
        if c not in (ID, ADMISSION_ID, LM, EVENTTIME, TYPE):
            out[c] = base[c].to_numpy()
    out[WEIGHT] = np.concatenate(weights)[order]
    out[COUNT] = count
    out[FAILCODE] = CLABSI
    return ExpandedFineGrayDataset(out, stacked.window, stacked.grid, stacked.interactions)


def remove_extensions(expanded: ExpandedFineGrayDataset) -> pd.DataFrame:
    """Undo the expansion: original rows back in the stacked layout."""
    f = expanded.frame
    orig = f[f[COUNT] == 1].reset_index(drop=True)
    out = orig.rename(columns={TSTOP: EVENTTIME, STATUS: TYPE}).drop(columns=[TSTART, WEIGHT, COUNT, FAILCODE])
    cols = [ID, ADMISSION_ID, LM, EVENTTIME, TYPE] + [c for c in out.columns if c not in (ID, ADMISSION_ID, LM, EVENTTIME, TYPE)]
    return out[cols]


# --------------------------------------------------------------------------
# writers


def _needs_admission(frame: pd.DataFrame) -> bool:
    return bool((frame[ADMISSION_ID].astype(str) != frame[ID].astype(str)).any())


def write_stacked(stacked: StackedLandmarkDataset, path, features: bool = False) -> None:
    """Stacked rows in the ``ID, LM, eventtime, type, covariates`` layout.

    ``ADMISSION_ID`` is written only when it differs from ``ID`` somewhere.
    """
    f = stacked.frame
    covs = covariate_columns(f)
    extra = [c for c in f.columns if c.startswith("lm_")] if features else []
    adm = _needs_admission(f)
    header = [ID] + ([ADMISSION_ID] if adm else []) + [LM, EVENTTIME, TYPE] + covs + extra
    with _open(path) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for r in f.to_dict("records"):
            writer.writerow(
                [r[ID]]
                + ([r[ADMISSION_ID]] if adm else [])
                + [str(int(r[LM])), format_time(r[EVENTTIME]), str(int(r[TYPE]))]
                + [format_number(r[c]) for c in covs + extra]
            )


def write_expanded(expanded: ExpandedFineGrayDataset, path) -> None:
    """Expanded rows: ``ID, Tstart, Tstop, status, covariates, weight.cens, count, failcode``.

    Original rows start at their integer landmark; extension rows start at
    the competing-event time.
    """
    f = expanded.frame
    covs = expanded.covariates
    adm = _needs_admission(f)
    header = [ID] + ([ADMISSION_ID] if adm else []) + [TSTART, TSTOP, STATUS] + covs + [WEIGHT, COUNT, FAILCODE]
    with _open(path) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for r in f.to_dict("records"):
            start = str(int(r[LM])) if r[COUNT] == 1 else format_time(r[TSTART])
            writer.writerow(
                [r[ID]]
                + ([r[ADMISSION_ID]] if adm else [])
                + [start, format_time(r[TSTOP]), str(int(r[STATUS]))]
                + [format_number(r[c]) for c in covs]
                + [format_number(r[WEIGHT]), str(int(r[COUNT])), str(int(r[FAILCODE]))]
            )
