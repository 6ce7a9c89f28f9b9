"""Run traces, residual decompositions, conservation checks and rate fitting."""
from dataclasses import dataclass, field
import math

import numpy as np

from .errors import IncomparableTraces, InsufficientData

COLUMNS = (
    "k",
    "residual_sq",
    "feas_norm",
    "coupled_feas_norm",
    "consensus_perp",
    "consensus_par",
    "sum_lambda_drift",
    "sum_z_drift",
    "comm_entries_cum",
    "comm_bits_cum",
)


@dataclass
class RunTrace:
    """Recorded rounds, one dict per record keyed by :data:`COLUMNS`.

    Quantities that do not apply (no certificate, or the coupled-only columns
    on a DLEC run) are ``None``.
    """

    rounds: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    final_x: np.ndarray = None

    def column(self, name):
        return np.array([np.nan if r[name] is None else r[name] for r in self.rounds], dtype=float)

    @property
    def ks(self):
        return np.array([r["k"] for r in self.rounds], dtype=np.int64)

    def __len__(self):
        return len(self.rounds)

    def truncated(self, k_max):
        return RunTrace([r for r in self.rounds if r["k"] <= k_max], dict(self.metadata), self.final_x)


@dataclass
class RateReport:
    beta_hat: float
    r_squared: float
    window: tuple
    floor_detected: bool
    points: int

    @property
    def converging(self):
        return self.beta_hat < 1.0

    def as_dict(self):
        return {
            "beta_hat": self.beta_hat,
            "r_squared": self.r_squared,
            "window": list(self.window),
            "floor_detected": self.floor_detected,
            "points": self.points,
            "converging": self.converging,
        }


def residual_sq(x_k, x_star):
    """``sum_i ||x_i - x*||^2`` for stacked or ``(n, d)`` states."""
    x_star = np.asarray(x_star, dtype=float)
    X = np.asarray(x_k, dtype=float).reshape(-1, x_star.shape[0])
    return float(np.sum((X - x_star) ** 2))


def consensus_decomposition(x_k, x_star, spectral):
    """Norms of the disagreement and agreement parts of ``x_k - 1 (x) x*``.

    The agreement part uses the normalised direction ``1/sqrt(n)`` so that
    ``perp**2 + par**2 == residual_sq``.
    """
    x_star = np.asarray(x_star, dtype=float)
    E = np.asarray(x_k, dtype=float).reshape(-1, x_star.shape[0]) - x_star
    n = E.shape[0]
    perp = spectral.basis_S.T @ E
    par = E.sum(axis=0) / math.sqrt(n)
    return {"perp_norm": float(np.linalg.norm(perp)), "par_norm": float(np.linalg.norm(par))}


def fit_linear_rate(trace, start_fraction=0.1, floor_factor=1e3, min_points=50, column="residual_sq"):
    """Least-squares slope of ``log(residual_sq)`` against ``k``.

    The window opens at ``start_fraction`` of the recorded rounds and closes
    just before the first record under ``floor_factor * eps**2 * initial``,
    where fitting would only see round-off.
    """
    ks = trace.ks.astype(float)
    res = trace.column(column)
    ok = np.isfinite(res)
    ks, res = ks[ok], res[ok]
    if ks.size == 0 or not res[0] > 0:
        raise InsufficientData("trace has no positive initial residual")
    floor = floor_factor * np.finfo(float).eps ** 2 * res[0]
    below = np.flatnonzero(res < floor)
    floor_detected = below.size > 0
    stop = below[0] if floor_detected else ks.size
    if stop < min_points:
        raise InsufficientData(f"only {stop} usable records before the round-off floor; need {min_points}")
    k_lo = ks[0] + start_fraction * (ks[stop - 1] - ks[0])
    sel = (ks >= k_lo) & (np.arange(ks.size) < stop)
    kw, yw = ks[sel], np.log(res[sel])
    if kw.size < 2:
        raise InsufficientData("fit window holds fewer than two records")
    slope, intercept = np.polyfit(kw, yw, 1)
    fitted = slope * kw + intercept
    ss_res = float(np.sum((yw - fitted) ** 2))
    ss_tot = float(np.sum((yw - yw.mean()) ** 2))
    if ss_tot <= 1e-300:
        r2 = 1.0
    else:
        r2 = min(1.0, max(0.0, 1.0 - ss_res / ss_tot))
    return RateReport(
        beta_hat=float(np.exp(slope)),
        r_squared=r2,
        window=(int(kw[0]), int(kw[-1])),
        floor_detected=bool(floor_detected),
        points=int(kw.size),
    )


def median_trace(traces):
    """Per-round median of ``residual_sq`` over replicate traces with identical ``k``."""
    if not traces:
        raise InsufficientData("no traces to combine")
    ks = [tuple(t.ks) for t in traces]
    common = min(ks, key=len)
    rows = []
    for idx, k in enumerate(common):
        vals = [t.rounds[idx]["residual_sq"] for t in traces]
        if any(t.rounds[idx]["k"] != k for t in traces) or any(v is None for v in vals):
            break
        rows.append({**traces[0].rounds[idx], "residual_sq": float(np.median(vals))})
    return RunTrace(rows, {"median_of": len(traces)})


def conservation_check(trace):
    """Largest drift of ``sum_i lambda_i`` and ``sum_i z_i`` from their initial values."""
    if not trace.rounds:
        raise InsufficientData("empty trace")
    lam = trace.column("sum_lambda_drift")
    z = trace.column("sum_z_drift")
    return {
        "max_lambda_drift": float(np.nanmax(lam)) if np.isfinite(lam).any() else None,
        "max_z_drift": float(np.nanmax(z)) if np.isfinite(z).any() else None,
    }


def comm_savings(trace_compressed, trace_identity):
    """Cumulative (entries, bits) sent by the compressed run relative to identity."""
    a, b = trace_compressed.rounds, trace_identity.rounds
    if not a or not b or a[-1]["k"] != b[-1]["k"]:
        raise IncomparableTraces(
            f"traces end at different rounds ({a[-1]['k'] if a else None} vs {b[-1]['k'] if b else None})"
        )
    if b[-1]["comm_entries_cum"] == 0:
        return {"entries": 1.0, "bits": 1.0}
    return {
        "entries": a[-1]["comm_entries_cum"] / b[-1]["comm_entries_cum"],
        "bits": a[-1]["comm_bits_cum"] / b[-1]["comm_bits_cum"],
    }
