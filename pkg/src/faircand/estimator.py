"""Clipped inverse-propensity estimates and distribution-free bounds.

The per-request statistic for a group at threshold t is

    Z_i = sum over ranks j <= t of min(lambda, 1/p_ij) * c_ij,

which lies in [0, t*lambda]. Its mean estimates the expected number of
relevant items among the top t; an empirical-Bernstein argument around the
sample variance of the Z's yields the lower bound, and the upper bound adds
a Hoeffding term over queries plus a computable cap on the clipping bias.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .clicklog import InteractionLog, LogRecord
from .io import write_csv

BOUND_CSV_FIELDS = (
    "group", "t", "lambda", "m", "estimate", "variance", "alpha", "lower", "upper", "bias_cap",
)


def _check_alpha(alpha: float) -> None:
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")


def _check_t(log: InteractionLog, group: str, t: int) -> None:
    if t < 0:
        raise ValueError("t must be >= 0")
    if t > log.t_max[group]:
        raise ValueError(
            f"t={t} exceeds the logged positions for group {group!r} "
            f"(log was built with t_max={log.t_max[group]}); re-simulate with a larger t_max"
        )


def cipw_per_request(record: LogRecord, group: str, t: int, lam: float) -> float:
    """Clipped inverse-propensity estimate of one logged request.

    Queries whose group holds fewer than t items contribute only their
    logged positions; asking beyond the t_max the log was built with is an
    error because those ranks were never logged.
    """
    if lam <= 0:
        raise ValueError("lambda must be positive")
    if t < 0:
        raise ValueError("t must be >= 0")
    if t > record.t_max[group]:
        raise ValueError(
            f"t={t} exceeds the logged positions for group {group!r} "
            f"(log was built with t_max={record.t_max[group]})"
        )
    _, props, clicks = record.slots[group]
    k = min(t, len(props))
    if k == 0:
        return 0.0
    w = np.minimum(lam, 1.0 / props[:k])
    return float(w @ clicks[:k])


def _cumulative_z(log: InteractionLog, group: str, lam: float) -> np.ndarray:
    """(m, t_max) matrix whose column t-1 holds Z_i at threshold t."""
    gl = log.per_group[group]
    w = np.minimum(lam, 1.0 / gl.propensity) * gl.click
    z = np.cumsum(w, axis=1)
    t_cap = log.t_max[group]
    if z.shape[1] < t_cap:  # every slate shorter than t_max: flat extension
        z = np.pad(z, ((0, 0), (0, t_cap - z.shape[1])), mode="edge")
    return z[:, :t_cap]


def _cumulative_bias(log: InteractionLog, group: str, lam: float) -> np.ndarray:
    """(m, t_max) matrix of cumulative clipping-bias caps max(0, 1 - lambda*p)."""
    gl = log.per_group[group]
    with np.errstate(invalid="ignore"):
        b = np.maximum(0.0, 1.0 - lam * gl.propensity)
    b[~np.isfinite(gl.propensity)] = 0.0
    cum = np.cumsum(b, axis=1)
    t_cap = log.t_max[group]
    if cum.shape[1] < t_cap:
        cum = np.pad(cum, ((0, 0), (0, t_cap - cum.shape[1])), mode="edge")
    return cum[:, :t_cap]


def cipw_estimate(log: InteractionLog, group: str, t: int, lam: float) -> float:
    """Mean clipped inverse-propensity estimate over the log's m requests."""
    if lam <= 0:
        raise ValueError("lambda must be positive")
    _check_t(log, group, t)
    if t == 0:
        return 0.0
    z = _cumulative_z(log, group, lam)
    return float(z[:, t - 1].mean())


def ipw_estimate(log: InteractionLog, group: str, t: int) -> float:
    """Unclipped variant: weights are exactly 1/p (lambda = +inf)."""
    _check_t(log, group, t)
    if t == 0:
        return 0.0
    z = _cumulative_z(log, group, np.inf)
    return float(z[:, t - 1].mean())


def sample_variance(z: Sequence[float] | np.ndarray) -> float:
    """Sample variance of per-request estimates.

    Computed in O(m); equals the pairwise mean of squared differences
    (1/(m(m-1))) * sum_{i<j} (Z_i - Z_j)^2.
    """
    z = np.asarray(z, dtype=float)
    if z.size <= 1:
        raise ValueError("sample variance needs m > 1 values")
    return float(np.var(z, ddof=1))


def _lower_value(est: float, var: float, t: int, lam: float, m: int, alpha: float) -> float:
    if t == 0:
        return 0.0
    ln = math.log(2.0 / alpha)
    return est - math.sqrt(2.0 * var * ln / m) - 7.0 * t * lam * ln / (3.0 * (m - 1))


def _upper_value(
    est: float, var: float, bias_cap: float, t: int, lam: float, m: int, alpha: float
) -> float:
    if t == 0:
        return 0.0
    ln4 = math.log(4.0 / alpha)
    ln2 = math.log(2.0 / alpha)
    return (
        est
        + math.sqrt(2.0 * var * ln4 / m)
        + 7.0 * t * lam * ln4 / (3.0 * (m - 1))
        + t * math.sqrt(ln2 / (2.0 * m))
        + bias_cap
    )


def lower_bound(log: InteractionLog, group: str, t: int, lam: float, alpha: float) -> float:
    """Lower confidence bound on the expected relevant count at threshold t.

    May be negative; it is returned unclamped. Valid for t in
    [0, t_max - 1]; t = 0 is exactly 0.
    """
    _check_alpha(alpha)
    if lam <= 0:
        raise ValueError("lambda must be positive")
    if not 0 <= t <= log.t_max[group] - 1:
        raise ValueError(f"t must lie in [0, {log.t_max[group] - 1}]")
    if t == 0:
        return 0.0
    z = _cumulative_z(log, group, lam)[:, t - 1]
    return _lower_value(float(z.mean()), sample_variance(z), t, lam, log.m, alpha)


def upper_bound(log: InteractionLog, group: str, t: int, lam: float, alpha: float) -> float:
    """Upper confidence bound; adds the Hoeffding-over-queries term and the
    averaged clipping-bias cap to the empirical-Bernstein terms."""
    _check_alpha(alpha)
    if lam <= 0:
        raise ValueError("lambda must be positive")
    if not 0 <= t <= log.t_max[group] - 1:
        raise ValueError(f"t must lie in [0, {log.t_max[group] - 1}]")
    if t == 0:
        return 0.0
    z = _cumulative_z(log, group, lam)[:, t - 1]
    bias = float(_cumulative_bias(log, group, lam)[:, t - 1].mean())
    return _upper_value(float(z.mean()), sample_variance(z), bias, t, lam, log.m, alpha)


@dataclass(frozen=True)
class BoundTable:
    """Sufficient statistics per (group, threshold) for bound evaluation.

    Arrays are indexed by t in [0, t_max - 1]; row 0 is identically zero.
    Bounds at any alpha are cheap closed forms over these statistics, so a
    single pass over the log serves every failure-probability budget the
    selection rules need.
    """

    lam: float
    m: int
    t_max: dict[str, int]
    estimate: dict[str, np.ndarray]
    variance: dict[str, np.ndarray]
    bias_cap: dict[str, np.ndarray]

    @property
    def groups(self) -> tuple[str, ...]:
        return tuple(self.estimate)

    def _check(self, group: str, t: int) -> None:
        if not 0 <= t <= self.t_max[group] - 1:
            raise ValueError(f"t must lie in [0, {self.t_max[group] - 1}] for group {group!r}")

    def lower(self, group: str, t: int, alpha: float) -> float:
        _check_alpha(alpha)
        self._check(group, t)
        return _lower_value(
            float(self.estimate[group][t]), float(self.variance[group][t]),
            t, self.lam, self.m, alpha,
        )

    def upper(self, group: str, t: int, alpha: float) -> float:
        _check_alpha(alpha)
        self._check(group, t)
        return _upper_value(
            float(self.estimate[group][t]), float(self.variance[group][t]),
            float(self.bias_cap[group][t]), t, self.lam, self.m, alpha,
        )

    def rows(self, alpha: float) -> list[dict]:
        out = []
        for g in self.groups:
            for t in range(self.t_max[g]):
                out.append(
                    {
                        "group": g,
                        "t": t,
                        "lambda": self.lam,
                        "m": self.m,
                        "estimate": float(self.estimate[g][t]),
                        "variance": float(self.variance[g][t]),
                        "alpha": alpha,
                        "lower": self.lower(g, t, alpha),
                        "upper": self.upper(g, t, alpha),
                        "bias_cap": float(self.bias_cap[g][t]),
                    }
                )
        return out

    def save_csv(self, path, alpha: float, config: Mapping | None = None) -> None:
        write_csv(path, BOUND_CSV_FIELDS, self.rows(alpha), config=config)


def build_bound_table(
    log: InteractionLog, lam: float, groups: Sequence[str] | None = None
) -> BoundTable:
    """One pass over the log per group; selection rules consume the result."""
    if lam <= 0:
        raise ValueError("lambda must be positive")
    groups = tuple(groups) if groups is not None else log.groups
    est: dict[str, np.ndarray] = {}
    var: dict[str, np.ndarray] = {}
    bias: dict[str, np.ndarray] = {}
    for g in groups:
        t_cap = log.t_max[g]
        z = _cumulative_z(log, g, lam)
        b = _cumulative_bias(log, g, lam)
        means = z.mean(axis=0)
        variances = z.var(axis=0, ddof=1)
        biases = b.mean(axis=0)
        # row t holds the statistics for threshold t; t = 0 is all zeros
        est[g] = np.concatenate([[0.0], means[: t_cap - 1]])
        var[g] = np.concatenate([[0.0], variances[: t_cap - 1]])
        bias[g] = np.concatenate([[0.0], biases[: t_cap - 1]])
    return BoundTable(
        lam=lam, m=log.m, t_max={g: log.t_max[g] for g in groups},
        estimate=est, variance=var, bias_cap=bias,
    )
