"""Polynomial and interaction expansion of a covariate matrix.

Continuous columns contribute powers of degree 1..3 plus their pairwise
products; binary columns contribute the column itself plus pairwise products
(squares of a 0/1 column are the column itself, so no powers); optionally
every continuous-by-binary product is appended. Output column order is
deterministic: powers in input order, then continuous interactions, then
binary columns, binary interactions, and cross products. Columns that come
out exactly constant are dropped so downstream designs stay non-singular.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import ValidationError


@dataclass(frozen=True)
class ExpansionSpec:
    """Which input columns are continuous vs binary, and whether to cross them."""

    continuous: tuple[int, ...] = ()
    binary: tuple[int, ...] = ()
    cross: bool = True

    def validate(self, p: int) -> None:
        cols = (*self.continuous, *self.binary)
        if len(set(cols)) != len(cols):
            raise ValidationError("a column may be declared continuous or binary, not both")
        for j in cols:
            if not 0 <= j < p:
                raise ValidationError(f"column index {j} out of range for p={p}")


def _term_columns(
    x: np.ndarray, spec: ExpansionSpec, base_names: list[str] | None = None
) -> tuple[list[np.ndarray], list[str]]:
    cont, binr = spec.continuous, spec.binary
    for j in binr:
        vals = np.unique(x[:, j])
        if not np.isin(vals, (0.0, 1.0)).all():
            raise ValidationError(f"column {j} declared binary but holds values outside {{0,1}}")

    def label(j: int) -> str:
        return base_names[j] if base_names is not None else f"x{j}"

    cols: list[np.ndarray] = []
    names: list[str] = []
    for j in cont:
        c = x[:, j]
        for d in (1, 2, 3):
            cols.append(c**d)
            names.append(label(j) if d == 1 else f"{label(j)}^{d}")
    for a in range(len(cont)):
        for b in range(a + 1, len(cont)):
            cols.append(x[:, cont[a]] * x[:, cont[b]])
            names.append(f"{label(cont[a])}*{label(cont[b])}")
    for j in binr:
        cols.append(x[:, j])
        names.append(label(j))
    for a in range(len(binr)):
        for b in range(a + 1, len(binr)):
            cols.append(x[:, binr[a]] * x[:, binr[b]])
            names.append(f"{label(binr[a])}*{label(binr[b])}")
    if spec.cross:
        for i in cont:
            for j in binr:
                cols.append(x[:, i] * x[:, j])
                names.append(f"{label(i)}*{label(j)}")
    return cols, names


def expand_covariates(x, spec: ExpansionSpec, return_names: bool = False, base_names=None):
    """Expand ``x`` according to ``spec``; constant output columns are dropped.

    Returns the expanded matrix, or ``(matrix, names)`` when ``return_names``
    is set. Deterministic: identical input gives identical output bytes.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise ValidationError("covariate matrix must be 2-d")
    spec.validate(x.shape[1])
    if base_names is not None and len(base_names) != x.shape[1]:
        raise ValidationError("base_names length must match the number of columns")
    cols, names = _term_columns(x, spec, base_names)
    if not cols:
        out = np.empty((x.shape[0], 0))
        return (out, []) if return_names else out
    mat = np.column_stack(cols)
    keep = np.ptp(mat, axis=0) > 0.0
    mat = mat[:, keep]
    kept_names = [nm for nm, k in zip(names, keep) if k]
    return (mat, kept_names) if return_names else mat


class CovariateExpander(TransformerMixin, BaseEstimator):
    """Sklearn-style transformer wrapping :func:`expand_covariates`.

    ``fit`` records which expanded columns are non-constant on the training
    data; ``transform`` builds the same terms and applies that mask, so the
    output schema is stable across calls.
    """

    def __init__(self, continuous=(), binary=(), cross: bool = True):
        self.continuous = continuous
        self.binary = binary
        self.cross = cross

    def _spec(self) -> ExpansionSpec:
        return ExpansionSpec(tuple(self.continuous), tuple(self.binary), bool(self.cross))

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=float)
        spec = self._spec()
        spec.validate(X.shape[1])
        cols, names = _term_columns(X, spec)
        if cols:
            mat = np.column_stack(cols)
            self.keep_mask_ = np.ptp(mat, axis=0) > 0.0
        else:
            self.keep_mask_ = np.zeros(0, dtype=bool)
        self.term_names_ = names
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        if not hasattr(self, "keep_mask_"):
            raise ValidationError("CovariateExpander must be fitted before transform")
        X = np.asarray(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise ValidationError(
                f"expected {self.n_features_in_} input columns, got {X.shape[1]}"
            )
        cols, _ = _term_columns(X, self._spec())
        if not cols:
            return np.empty((X.shape[0], 0))
        return np.column_stack(cols)[:, self.keep_mask_]

    def get_feature_names_out(self, input_features=None):
        if not hasattr(self, "keep_mask_"):
            raise ValidationError("CovariateExpander must be fitted first")
        names = self.term_names_
        if input_features is not None:
            if len(input_features) != self.n_features_in_:
                raise ValidationError("input_features length does not match fitted data")
            x_dummy = np.zeros((1, self.n_features_in_))
            _, names = _term_columns(x_dummy, self._spec(), list(input_features))
        return np.asarray([nm for nm, k in zip(names, self.keep_mask_) if k], dtype=object)
