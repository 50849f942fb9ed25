"""Trial dataset model, CSV ingestion, and stratum bookkeeping.

A :class:`TrialDataset` holds the observed arrays of a two-arm trial:
outcomes ``y``, binary ``assignment``, stratum labels re-encoded to
``1..K``, and an ``n x p`` covariate matrix (``p = 0`` is allowed). For
simulated data the potential-outcome pair may be attached; estimators never
read it.

Datasets are read-only after construction and safe to share across threads.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ParseError, SchemaError, ValidationError


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class TrialDataset:
    """Observed trial data with strata encoded as consecutive ``1..K``.

    Use :meth:`from_arrays` to build one from raw inputs; it re-encodes
    stratum labels (first-appearance order) and validates every invariant.

    Attributes
    ----------
    y : (n,) float array of observed outcomes.
    assignment : (n,) int array, 1 = treatment, 0 = control.
    strata : (n,) int array with values in ``1..K``; every value occurs.
    x : (n, p) float covariate matrix.
    y1, y0 : optional potential-outcome vectors (simulation only).
    stratum_labels : original label for each encoded stratum, index ``k-1``.
    """

    y: np.ndarray
    assignment: np.ndarray
    strata: np.ndarray
    x: np.ndarray
    y1: np.ndarray | None = None
    y0: np.ndarray | None = None
    stratum_labels: tuple = field(default=())

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def n_strata(self) -> int:
        return len(self.stratum_labels)

    @property
    def has_truth(self) -> bool:
        return self.y1 is not None

    @classmethod
    def from_arrays(cls, y, assignment, strata, x=None, y1=None, y0=None) -> "TrialDataset":
        y = np.asarray(y, dtype=float)
        assignment = np.asarray(assignment)
        if y.ndim != 1:
            raise ValidationError("outcome must be a 1-d vector")
        n = y.shape[0]
        if n == 0:
            raise ValidationError("dataset is empty")
        if assignment.shape != (n,):
            raise ValidationError("assignment length does not match outcomes")
        if not np.isin(assignment, (0, 1)).all():
            bad = int(np.flatnonzero(~np.isin(assignment, (0, 1)))[0])
            raise ValidationError(f"assignment must be 0/1; offending row index {bad}")
        assignment = assignment.astype(np.int8)

        codes, labels = encode_strata(strata, n)

        if x is None:
            x = np.empty((n, 0))
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[0] != n:
            raise ValidationError("covariate matrix must have one row per unit")
        if not np.isfinite(y).all() or not np.isfinite(x).all():
            raise ValidationError("non-finite value in outcomes or covariates")

        if (y1 is None) != (y0 is None):
            raise ValidationError("potential outcomes must be supplied as a pair")
        if y1 is not None:
            y1 = np.asarray(y1, dtype=float)
            y0 = np.asarray(y0, dtype=float)
            if y1.shape != (n,) or y0.shape != (n,):
                raise ValidationError("potential-outcome vectors must have length n")
            implied = np.where(assignment == 1, y1, y0)
            if not np.array_equal(implied, y):
                raise ValidationError("observed outcome differs from the assigned potential outcome")

        return cls(
            y=_readonly(y),
            assignment=_readonly(assignment),
            strata=_readonly(codes),
            x=_readonly(x),
            y1=None if y1 is None else _readonly(y1),
            y0=None if y0 is None else _readonly(y0),
            stratum_labels=tuple(labels),
        )

    def with_covariates(self, x) -> "TrialDataset":
        """Return a copy of this dataset with a different covariate matrix."""
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[0] != self.n:
            raise ValidationError("covariate matrix must have one row per unit")
        return replace(self, x=_readonly(x))

    def decode_strata(self) -> np.ndarray:
        """Map the internal ``1..K`` codes back to the original labels."""
        lookup = np.asarray(self.stratum_labels, dtype=object)
        return lookup[self.strata - 1]


def encode_strata(strata, n: int) -> tuple[np.ndarray, list]:
    """Re-encode arbitrary stratum labels to ``1..K`` by first appearance."""
    strata = np.asarray(strata)
    if strata.shape != (n,):
        raise ValidationError("stratum vector length does not match outcomes")
    labels: list = []
    index: dict = {}
    codes = np.empty(n, dtype=np.int64)
    for i, lab in enumerate(strata.tolist()):
        code = index.get(lab)
        if code is None:
            labels.append(lab)
            code = len(labels)
            index[lab] = code
        codes[i] = code
    return codes, labels


@dataclass(frozen=True)
class StratumSummary:
    """Per-stratum counts and arm-wise means.

    ``mean_y1``/``mean_x1`` are NaN-filled when the treated arm is empty
    (mirrored for control); the ``treated_empty``/``control_empty`` flags
    tell consumers, which decide whether that is fatal.
    """

    k: int
    label: object
    n_total: int
    n_treated: int
    n_control: int
    share: float          # n_[k] / n
    treated_fraction: float  # realized within-stratum allocation
    mean_y1: float
    mean_y0: float
    mean_x1: np.ndarray
    mean_x0: np.ndarray
    mean_x: np.ndarray

    @property
    def treated_empty(self) -> bool:
        return self.n_treated == 0

    @property
    def control_empty(self) -> bool:
        return self.n_control == 0

    @property
    def arm_empty(self) -> bool:
        return self.n_treated == 0 or self.n_control == 0


def stratum_summaries(ds: TrialDataset) -> list[StratumSummary]:
    """Compute one :class:`StratumSummary` per stratum, in ``1..K`` order."""
    out = []
    n = ds.n
    for k in range(1, ds.n_strata + 1):
        in_k = ds.strata == k
        treated = in_k & (ds.assignment == 1)
        control = in_k & (ds.assignment == 0)
        n_k = int(in_k.sum())
        n_k1 = int(treated.sum())
        n_k0 = n_k - n_k1
        mean_y1 = float(ds.y[treated].mean()) if n_k1 else float("nan")
        mean_y0 = float(ds.y[control].mean()) if n_k0 else float("nan")
        if ds.p:
            mean_x1 = ds.x[treated].mean(axis=0) if n_k1 else np.full(ds.p, np.nan)
            mean_x0 = ds.x[control].mean(axis=0) if n_k0 else np.full(ds.p, np.nan)
            mean_x = ds.x[in_k].mean(axis=0)
        else:
            mean_x1 = mean_x0 = mean_x = np.empty(0)
        out.append(
            StratumSummary(
                k=k,
                label=ds.stratum_labels[k - 1],
                n_total=n_k,
                n_treated=n_k1,
                n_control=n_k0,
                share=n_k / n,
                treated_fraction=n_k1 / n_k,
                mean_y1=mean_y1,
                mean_y0=mean_y0,
                mean_x1=mean_x1,
                mean_x0=mean_x0,
                mean_x=mean_x,
            )
        )
    return out


@dataclass(frozen=True)
class CsvSchema:
    """Column roles for :func:`load_csv`."""

    outcome: str
    assignment: str
    stratum: str
    covariates: tuple[str, ...] = ()


def load_csv(path, schema: CsvSchema) -> TrialDataset:
    """Load a trial dataset from a headered, UTF-8, ``.``-decimal CSV file.

    Stratum labels are kept verbatim (strings) and re-encoded internally.
    Missing values are rejected: the file must be complete.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: file is empty") from None
        header = [h.strip() for h in header]
        roles = [schema.outcome, schema.assignment, schema.stratum, *schema.covariates]
        missing = [c for c in roles if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {missing}; header is {header}")
        col = {name: header.index(name) for name in roles}

        ys: list[float] = []
        assigns: list[int] = []
        strata: list[str] = []
        xrows: list[list[float]] = []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", line=line_no)
            ys.append(_parse_float(row[col[schema.outcome]], schema.outcome, line_no))
            a_raw = row[col[schema.assignment]].strip()
            if a_raw not in ("0", "1"):
                raise ParseError(
                    f"assignment column {schema.assignment!r} must be 0 or 1, got {a_raw!r}",
                    line=line_no,
                )
            assigns.append(int(a_raw))
            s_raw = row[col[schema.stratum]].strip()
            if not s_raw:
                raise ParseError(f"empty stratum label in column {schema.stratum!r}", line=line_no)
            strata.append(s_raw)
            xrows.append([_parse_float(row[col[c]], c, line_no) for c in schema.covariates])

    if not ys:
        raise ValidationError(f"{path}: no data rows")
    x = np.asarray(xrows, dtype=float) if schema.covariates else None
    return TrialDataset.from_arrays(ys, assigns, strata, x)


def _parse_float(cell: str, column: str, line_no: int) -> float:
    cell = cell.strip()
    if not cell:
        raise ParseError(f"missing value in column {column!r}", line=line_no)
    try:
        return float(cell)
    except ValueError:
        raise ParseError(f"non-numeric value {cell!r} in column {column!r}", line=line_no) from None


def save_csv(path, ds: TrialDataset, covariate_names: list[str] | None = None) -> None:
    """Write a dataset back to CSV with columns ``outcome,assignment,stratum,<covariates>``."""
    names = covariate_names or [f"x{j + 1}" for j in range(ds.p)]
    if len(names) != ds.p:
        raise ValidationError("covariate_names length does not match p")
    labels = ds.decode_strata()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["outcome", "assignment", "stratum", *names])
        for i in range(ds.n):
            writer.writerow(
                [repr(float(ds.y[i])), int(ds.assignment[i]), labels[i]]
                + [repr(float(v)) for v in ds.x[i]]
            )
