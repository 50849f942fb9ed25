"""Sequential treatment-assignment engine.

Five schemes, all targeting allocation ``pi``:

* ``simple`` -- independent Bernoulli(pi) draws.
* ``stratified_block`` -- permuted blocks within each stratum; each block of
  size ``block_size`` contains exactly ``block_size * pi`` treatments, and a
  trailing partial block is a truncated permutation of a full block.
* ``biased_coin`` -- stratified biased coin: inside the unit's stratum, with
  imbalance ``D = n_treated - pi * n``, assign treatment with probability
  1/2 when D = 0, ``1 - bias_prob`` when D > 0, ``bias_prob`` when D < 0.
* ``wei`` -- adaptive coin with a linear allocation function: treatment
  probability ``clamp(pi - (D / n) / 2, 0, 1)`` (configurable rule; this is
  the documented default).
* ``pocock_simon`` -- minimization: for each candidate arm, sum the weighted
  post-assignment marginal imbalances ``|n_level,1 / pi - n_level,0 /
  (1 - pi)|`` over margins; the minimizing arm is chosen with probability
  ``bias_prob``, ties fall back to a pi-coin. Unseen margin levels
  auto-register with zero counts.

Unequal allocations use the pi-normalized deficit throughout, which reduces
to the classical count difference at pi = 1/2.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import streams
from .errors import ValidationError

SIMPLE = "simple"
STRATIFIED_BLOCK = "stratified_block"
BIASED_COIN = "biased_coin"
WEI = "wei"
POCOCK_SIMON = "pocock_simon"
ALL_SCHEMES = (SIMPLE, STRATIFIED_BLOCK, BIASED_COIN, WEI, POCOCK_SIMON)

_ZERO_TOL = 1e-9


@dataclass(frozen=True)
class RandomizationScheme:
    """Configuration of a sequential assignment rule."""

    variant: str = SIMPLE
    pi: float = 0.5
    block_size: int = 6
    bias_prob: float = 0.75
    margin_weights: tuple[float, ...] | None = None  # None -> equal weights

    def __post_init__(self):
        if self.variant not in ALL_SCHEMES:
            raise ValidationError(f"unknown scheme {self.variant!r}; choose from {ALL_SCHEMES}")
        if not 0.0 < self.pi < 1.0:
            raise ValidationError("target allocation must lie in (0, 1)")
        if self.variant == STRATIFIED_BLOCK:
            if self.block_size < 1:
                raise ValidationError("block size must be positive")
            treated = self.block_size * self.pi
            if abs(treated - round(treated)) > _ZERO_TOL:
                raise ValidationError(
                    f"block_size * pi = {treated:.6g} must be an integer "
                    f"(block_size={self.block_size}, pi={self.pi})"
                )
        if self.variant in (BIASED_COIN, POCOCK_SIMON) and not 0.5 < self.bias_prob <= 1.0:
            raise ValidationError("bias probability must lie in (1/2, 1]")
        if self.margin_weights is not None:
            w = np.asarray(self.margin_weights, dtype=float)
            if (w < 0).any() or w.sum() <= 0:
                raise ValidationError("margin weights must be non-negative with positive sum")

    @property
    def treated_per_block(self) -> int:
        return round(self.block_size * self.pi)


@dataclass
class AssignmentState:
    """Running counts for one realization of a scheme. Single-threaded."""

    scheme: RandomizationScheme
    emitted: int = 0
    treated: int = 0
    stratum_counts: dict = field(default_factory=dict)   # stratum -> [n_treated, n_total]
    block_queues: dict = field(default_factory=dict)     # stratum -> pending assignments
    margin_counts: list = field(default_factory=list)    # per margin: level -> [n1, n0]


def new_state(scheme: RandomizationScheme) -> AssignmentState:
    return AssignmentState(scheme=scheme)


def _deficit(n_treated: int, n_total: int, pi: float) -> float:
    return n_treated - pi * n_total


def assign_next(
    state: AssignmentState,
    rng: np.random.Generator,
    stratum=None,
    margins=None,
) -> int:
    """Assign the next unit and update ``state``.

    Stratified variants need ``stratum``; minimization needs ``margins``
    (a sequence of levels, one per margin variable).
    """
    scheme = state.scheme
    if scheme.variant == SIMPLE:
        arm = int(rng.random() < scheme.pi)
    elif scheme.variant == STRATIFIED_BLOCK:
        arm = _next_from_block(state, rng, _require_stratum(stratum))
    elif scheme.variant in (BIASED_COIN, WEI):
        stratum = _require_stratum(stratum)
        n1, n = state.stratum_counts.get(stratum, (0, 0))
        d = _deficit(n1, n, scheme.pi)
        if scheme.variant == BIASED_COIN:
            if abs(d) <= _ZERO_TOL:
                prob = 0.5
            else:
                prob = scheme.bias_prob if d < 0 else 1.0 - scheme.bias_prob
        else:
            frac = d / n if n else 0.0
            prob = min(max(scheme.pi - frac / 2.0, 0.0), 1.0)
        arm = int(rng.random() < prob)
    elif scheme.variant == POCOCK_SIMON:
        if margins is None:
            raise ValidationError("pocock_simon requires margin levels for each unit")
        arm = _next_minimizing(state, rng, tuple(margins))
    else:  # pragma: no cover - guarded in scheme validation
        raise ValidationError(f"unknown scheme {scheme.variant!r}")

    if stratum is not None:
        n1, n = state.stratum_counts.get(stratum, (0, 0))
        state.stratum_counts[stratum] = (n1 + arm, n + 1)
    state.emitted += 1
    state.treated += arm
    return arm


def _require_stratum(stratum):
    if stratum is None:
        raise ValidationError("this scheme requires a stratum label for each unit")
    return stratum


def _next_from_block(state: AssignmentState, rng, stratum) -> int:
    queue = state.block_queues.get(stratum)
    if not queue:
        scheme = state.scheme
        block = np.zeros(scheme.block_size, dtype=np.int8)
        block[: scheme.treated_per_block] = 1
        queue = list(rng.permutation(block))
        state.block_queues[stratum] = queue
    return int(queue.pop(0))


def _next_minimizing(state: AssignmentState, rng, levels: tuple) -> int:
    scheme = state.scheme
    if not state.margin_counts:
        state.margin_counts = [dict() for _ in levels]
    if len(levels) != len(state.margin_counts):
        raise ValidationError(
            f"unit has {len(levels)} margin levels, state tracks {len(state.margin_counts)}"
        )
    weights = scheme.margin_weights or (1.0,) * len(levels)
    if len(weights) != len(levels):
        raise ValidationError("margin_weights length must match the number of margins")
    pi = scheme.pi
    imbalance = {0: 0.0, 1: 0.0}
    for w, table, level in zip(weights, state.margin_counts, levels):
        n1, n0 = table.get(level, (0, 0))
        imbalance[1] += w * abs((n1 + 1) / pi - n0 / (1.0 - pi))
        imbalance[0] += w * abs(n1 / pi - (n0 + 1) / (1.0 - pi))
    if abs(imbalance[1] - imbalance[0]) <= _ZERO_TOL:
        arm = int(rng.random() < pi)
    else:
        favored = 1 if imbalance[1] < imbalance[0] else 0
        take_favored = rng.random() < scheme.bias_prob
        arm = favored if take_favored else 1 - favored
    for table, level in zip(state.margin_counts, levels):
        n1, n0 = table.get(level, (0, 0))
        table[level] = (n1 + arm, n0 + (1 - arm))
    return arm


def assign_all(
    scheme: RandomizationScheme,
    n: int | None = None,
    strata=None,
    margins=None,
    rng: int | np.random.Generator = 0,
) -> np.ndarray:
    """Assign an ordered cohort; deterministic given (scheme, units, rng seed).

    ``strata`` is a length-n sequence of stratum labels (required by the
    stratified variants); ``margins`` an (n, J) array of margin levels
    (required by minimization, defaulting to the stratum as a single
    margin). ``rng`` may be a seed or a Generator.
    """
    if isinstance(rng, (int, np.integer)):
        rng = streams.substream(int(rng))
    if strata is not None:
        strata = np.asarray(strata)
        n = strata.shape[0] if n is None else n
        if strata.shape[0] != n:
            raise ValidationError("strata length must match n")
    if margins is not None:
        margins = np.asarray(margins)
        if margins.ndim == 1:
            margins = margins[:, None]
        n = margins.shape[0] if n is None else n
        if margins.shape[0] != n:
            raise ValidationError("margins length must match n")
    if n is None:
        raise ValidationError("supply n, strata, or margins to size the cohort")
    if scheme.variant == POCOCK_SIMON and margins is None:
        if strata is None:
            raise ValidationError("pocock_simon needs margins (or strata as a single margin)")
        margins = strata[:, None]
    state = new_state(scheme)
    out = np.empty(n, dtype=np.int8)
    for i in range(n):
        out[i] = assign_next(
            state,
            rng,
            stratum=None if strata is None else strata[i],
            margins=None if margins is None else tuple(margins[i]),
        )
    return out
