"""Panel ingestion, balancing and first-stage residualization.

CSV layout: ``household_id,year,log_earnings,age,<z1..zk>,instrument``.
Every column that is not one of the five named roles is treated as a
demographic covariate unless ``demographics`` is given explicitly.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

MIN_PERIODS = 5

DEFAULT_SCHEMA = {
    "household_id": "household_id",
    "year": "year",
    "log_earnings": "log_earnings",
    "age": "age",
    "instrument": "instrument",
}


class PanelError(ValueError):
    """Raised for malformed, unbalanced or too-short panels."""


@dataclass(frozen=True)
class RawPanel:
    """Balanced panel in wide (household x period) layout.

    ``demographics`` has shape (N, T, k); k may be zero.
    """

    household_id: np.ndarray
    year: np.ndarray
    log_earnings: np.ndarray
    age: np.ndarray
    demographics: np.ndarray
    instrument: np.ndarray
    demographic_names: tuple[str, ...] = ()
    n_dropped: int = 0

    def __post_init__(self):
        n, t = self.log_earnings.shape
        for name in ("year", "age", "instrument"):
            if getattr(self, name).shape != (n, t):
                raise PanelError(f"{name} has shape {getattr(self, name).shape}, expected {(n, t)}")
        if self.demographics.shape[:2] != (n, t):
            raise PanelError("demographics do not match the panel dimensions")
        if self.household_id.shape != (n,):
            raise PanelError("household_id must have one entry per household")
        if len(np.unique(self.household_id)) != n:
            raise PanelError("household ids are not unique")
        if t < MIN_PERIODS:
            raise PanelError(f"panel too short: T={t} < {MIN_PERIODS}")
        if n and np.any(np.diff(self.year, axis=1) <= 0):
            raise PanelError("years must be strictly increasing within household")
        if not np.all(np.isin(self.instrument, (0, 1))):
            raise PanelError("instrument must be binary 0/1")

    @property
    def n_households(self) -> int:
        return self.log_earnings.shape[0]

    @property
    def n_periods(self) -> int:
        return self.log_earnings.shape[1]


@dataclass(frozen=True)
class PanelDataset:
    """Residualized panel consumed by the estimator and diagnostics.

    ``age`` holds raw ages in years; ``age_mean``/``age_sd`` are the
    estimation-sample standardizers shared with every sieve basis.
    """

    y: np.ndarray
    age: np.ndarray
    instrument: np.ndarray
    beta_hat: np.ndarray = field(default_factory=lambda: np.zeros(1))
    age_mean: float = 0.0
    age_sd: float = 1.0
    household_id: np.ndarray | None = None

    def __post_init__(self):
        if self.y.ndim != 2:
            raise PanelError("y must be an N x T matrix")
        if self.age.shape != self.y.shape or self.instrument.shape != self.y.shape:
            raise PanelError("y, age and instrument must share one N x T shape")
        if self.n_periods < MIN_PERIODS:
            raise PanelError(f"panel too short: T={self.n_periods} < {MIN_PERIODS}")
        if not np.all(np.isfinite(self.y)):
            raise PanelError("y contains non-finite values")
        for arr in (self.y, self.age, self.instrument):
            arr.setflags(write=False)

    @property
    def n_households(self) -> int:
        return self.y.shape[0]

    @property
    def n_periods(self) -> int:
        return self.y.shape[1]

    def meta(self) -> dict:
        return {
            "n_households": self.n_households,
            "n_periods": self.n_periods,
            "beta_hat": [float(b) for b in self.beta_hat],
            "age_mean": float(self.age_mean),
            "age_sd": float(self.age_sd),
        }

    def write_meta(self, path) -> None:
        Path(path).write_text(json.dumps(self.meta(), indent=2) + "\n")


def _numeric(frame: pd.DataFrame, column: str) -> np.ndarray:
    raw = frame[column].to_numpy(dtype=str)
    try:
        # correctly rounded, unlike pandas' fast parser
        values = raw.astype(float)
    except ValueError:
        values = pd.to_numeric(pd.Series(raw), errors="coerce").to_numpy()
    bad = ~np.isfinite(values)
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        # +2: one header line and 1-based numbering
        raise PanelError(
            f"malformed numeric cell at line {row + 2}, column {column!r}: {raw[row]!r}"
        )
    return values


def parse_panel(path, schema: dict | None = None, demographics=None) -> RawPanel:
    """Read a long-format CSV panel, drop incomplete households, reshape wide.

    The number of periods T is the longest run of consecutive years
    observed for any household; households with fewer (or with gaps)
    are dropped and counted in ``RawPanel.n_dropped``.
    """
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except OSError as exc:
        raise PanelError(f"cannot read panel {path}: {exc}") from exc
    missing = [col for col in schema.values() if col not in frame.columns]
    if missing:
        raise PanelError(f"missing columns in {path}: {missing}")
    if demographics is None:
        demographics = [c for c in frame.columns if c not in schema.values()]
    else:
        absent = [c for c in demographics if c not in frame.columns]
        if absent:
            raise PanelError(f"missing demographic columns: {absent}")

    cols = {role: _numeric(frame, col) for role, col in schema.items()}
    z = np.column_stack([_numeric(frame, c) for c in demographics]) if demographics else np.empty((len(frame), 0))

    hid = cols["household_id"].astype(np.int64)
    year = cols["year"].astype(np.int64)
    order = np.lexsort((year, hid))
    hid, year = hid[order], year[order]
    if np.any((np.diff(hid) == 0) & (np.diff(year) == 0)):
        raise PanelError("duplicate (household_id, year) rows")

    ids, starts, counts = np.unique(hid, return_index=True, return_counts=True)
    consecutive = np.array(
        [np.all(np.diff(year[s:s + c]) == 1) for s, c in zip(starts, counts)], dtype=bool
    )
    n_periods = int(counts[consecutive].max()) if consecutive.any() else 0
    keep = consecutive & (counts == n_periods)
    n_dropped = int((~keep).sum())
    if n_dropped:
        logger.info("dropped %d unbalanced households", n_dropped)
    if n_periods < MIN_PERIODS:
        raise PanelError(f"panel too short: T={n_periods} < {MIN_PERIODS}")

    rows = np.concatenate([np.arange(s, s + n_periods) for s, k in zip(starts, keep) if k])
    take = order[rows]
    n = int(keep.sum())

    def wide(values):
        return values[take].reshape(n, n_periods)

    return RawPanel(
        household_id=ids[keep],
        year=year[rows].reshape(n, n_periods),
        log_earnings=wide(cols["log_earnings"]),
        age=wide(cols["age"]),
        demographics=z[take].reshape(n, n_periods, z.shape[1]),
        instrument=wide(cols["instrument"]).astype(np.int64),
        demographic_names=tuple(demographics),
        n_dropped=n_dropped,
    )


def write_panel(raw: RawPanel, path, schema: dict | None = None) -> None:
    """Write a RawPanel back to the long CSV layout read by parse_panel."""
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    n, t = raw.log_earnings.shape
    columns = {
        schema["household_id"]: np.repeat(raw.household_id, t),
        schema["year"]: raw.year.ravel(),
        schema["log_earnings"]: raw.log_earnings.ravel(),
        schema["age"]: raw.age.ravel(),
    }
    for j, name in enumerate(raw.demographic_names):
        columns[name] = raw.demographics[:, :, j].ravel()
    columns[schema["instrument"]] = raw.instrument.ravel()
    # repr-precision floats so parse(write(x)) == x exactly
    pd.DataFrame(columns).to_csv(path, index=False, float_format="%.17g")


def residualize(raw: RawPanel) -> PanelDataset:
    """Pooled OLS of log earnings on [1, demographics]; keep the residuals."""
    n, t = raw.log_earnings.shape
    k = raw.demographics.shape[2]
    design = np.column_stack([np.ones(n * t), raw.demographics.reshape(n * t, k)])
    if np.linalg.matrix_rank(design) < design.shape[1]:
        raise PanelError("rank-deficient design: demographics are collinear")
    response = raw.log_earnings.ravel()
    beta, *_ = np.linalg.lstsq(design, response, rcond=None)
    y = (response - design @ beta).reshape(n, t)

    age_mean = float(raw.age.mean())
    age_sd = float(raw.age.std())
    if age_sd == 0.0:
        age_sd = 1.0
    return PanelDataset(
        y=y,
        age=raw.age.astype(float),
        instrument=raw.instrument.astype(np.int64),
        beta_hat=beta,
        age_mean=age_mean,
        age_sd=age_sd,
        household_id=raw.household_id,
    )


def load_dataset(path, schema: dict | None = None) -> PanelDataset:
    return residualize(parse_panel(path, schema))
