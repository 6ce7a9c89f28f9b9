"""Spatio-temporal (ST) compressors and an empirical contract checker.

A compressor maps an innovation ``x_e`` and the round index ``k`` (starting at 1)
to a vector of the same size.  Two properties are required: a norm bound
``||C(x, k)|| <= L_c ||x||`` and exponential stability of the error recursion
``x <- x - kappa0 * C(x, k)``.

Every kind here is a pure transition ``(spec, state, x) -> (y, state')``.
Stochastic kinds use counter-based Philox streams keyed per agent and variable,
with the round index as the counter, so a stream never depends on how many
other streams exist or in which order they are advanced.
"""
from dataclasses import dataclass, field, replace
import math

import numpy as np

from .errors import InvalidSpec, NumericalError
from .seeding import philox_key

BUILTIN_KINDS = (
    "identity",
    "top_k",
    "norm_quantizer",
    "scalarized",
    "stochastic_quantizer",
    "event_triggered",
)
# ``scaled`` (C(x) = factor * x) exists for user-supplied specs and for
# exercising the contract checker on compressors that should fail.
KINDS = BUILTIN_KINDS + ("scaled",)

VALUE_BITS = 64


@dataclass(frozen=True)
class CompressorSpec:
    kind: str = "identity"
    kappa0: float = 0.5
    k: int = 1
    levels: int = 4
    schedule: str = "cyclic"
    seed: int = 0
    theta0: float = 1.0
    rho: float = 0.97
    factor: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidSpec(f"unknown compressor kind {self.kind!r}; expected one of {KINDS}")
        if not self.kappa0 > 0:
            raise InvalidSpec(f"kappa0 must be > 0, got {self.kappa0}")
        if self.kind == "top_k" and self.k < 1:
            raise InvalidSpec(f"top_k needs k >= 1, got {self.k}")
        if self.kind in ("norm_quantizer", "stochastic_quantizer") and self.levels < 1:
            raise InvalidSpec(f"{self.kind} needs levels >= 1, got {self.levels}")
        if self.kind == "scalarized" and self.schedule != "cyclic":
            raise InvalidSpec(f"scalarized supports schedule 'cyclic' only, got {self.schedule!r}")
        if self.kind == "event_triggered" and not (self.theta0 >= 0 and 0 < self.rho < 1):
            raise InvalidSpec("event_triggered needs theta0 >= 0 and 0 < rho < 1")

    @property
    def stochastic(self):
        return self.kind == "stochastic_quantizer"

    def check_dim(self, d):
        if self.kind == "top_k" and self.k > d:
            raise InvalidSpec(f"top_k k={self.k} exceeds dimension {d}")

    def label(self):
        if self.kind == "top_k":
            return f"top_k({self.k})"
        if self.kind in ("norm_quantizer", "stochastic_quantizer"):
            return f"{self.kind}({self.levels})"
        if self.kind == "scaled":
            return f"scaled({self.factor:g})"
        return self.kind


def parse_spec(text, **overrides):
    """Parse shorthand such as ``"top_k(2)"`` or ``"norm_quantizer(8)"``."""
    text = text.strip()
    kind, arg = text, None
    if text.endswith(")") and "(" in text:
        kind, arg = text[:-1].split("(", 1)
        kind = kind.strip()
    fields = dict(kind=kind)
    if arg is not None and arg.strip():
        if kind == "top_k":
            fields["k"] = int(arg)
        elif kind in ("norm_quantizer", "stochastic_quantizer"):
            fields["levels"] = int(arg)
        elif kind == "scaled":
            fields["factor"] = float(arg)
        else:
            raise InvalidSpec(f"compressor {kind!r} takes no argument")
    fields.update(overrides)
    return CompressorSpec(**fields)


@dataclass(frozen=True)
class CompressorState:
    """State of one or more streams that advance in lock-step.

    Row ``r`` of ``keys``/``last_sent``/``triggered`` belongs to stream ``r``;
    a single stream is a one-row state.  ``triggered`` records whether each
    stream actually transmitted on the call that produced this state.
    """

    round: int = 1
    keys: tuple = None
    last_sent: np.ndarray = field(default=None, repr=False)
    triggered: np.ndarray = field(default=None, repr=False)

    @property
    def rows(self):
        if self.keys is not None:
            return len(self.keys)
        if self.last_sent is not None:
            return self.last_sent.shape[0]
        return None


def new_state(spec, d, master_seed=None, labels=("stream",)):
    """Fresh state at round 1 for the streams named by ``labels``.

    ``master_seed`` defaults to ``spec.seed``; only stochastic kinds use it.
    """
    if isinstance(labels, str):
        labels = (labels,)
    keys = None
    if spec.stochastic:
        seed = spec.seed if master_seed is None else master_seed
        keys = tuple(philox_key(seed, lab) for lab in labels)
    last = trig = None
    if spec.kind == "event_triggered":
        last = np.zeros((len(labels), d))
        trig = np.ones(len(labels), dtype=bool)
    return CompressorState(round=1, keys=keys, last_sent=last, triggered=trig)


def documented_bound(spec, d):
    """Norm-bound constant ``L_c`` guaranteed for ``spec`` in dimension ``d``."""
    if spec.kind == "norm_quantizer":
        return 2.0
    if spec.kind == "stochastic_quantizer":
        return min(math.sqrt(d), 1.0 + math.sqrt(d) / spec.levels)
    if spec.kind == "scaled":
        return abs(spec.factor)
    return 1.0


def _top_k_rows(X, k):
    order = np.argsort(-np.abs(X), axis=1, kind="stable")[:, :k]
    Y = np.zeros_like(X)
    rows = np.arange(X.shape[0])[:, None]
    Y[rows, order] = X[rows, order]
    return Y


def _norm_quantize_rows(X, levels):
    scale = np.max(np.abs(X), axis=1, keepdims=True)
    safe = np.where(scale > 0, scale, 1.0)
    q = np.rint(levels * X / safe) / levels
    return np.where(scale > 0, q * scale, 0.0)


def _stochastic_quantize(x, levels, key, round_):
    scale = np.max(np.abs(x))
    if scale == 0:
        return np.zeros_like(x)
    gen = np.random.Generator(np.random.Philox(key=key, counter=[0, round_, 0, 0]))
    u = gen.random(x.shape[0])
    t = levels * np.abs(x) / scale
    lower = np.floor(t)
    level = lower + (u < (t - lower))
    return np.sign(x) * level * (scale / levels)


def compress(spec: CompressorSpec, state: CompressorState, x_e):
    """Apply ``C(x_e, state.round)`` to one vector; returns output and advanced state."""
    x_e = np.asarray(x_e, dtype=float)
    Y, new = compress_rows(spec, state, x_e[None, :])
    return Y[0], new


def compress_rows(spec: CompressorSpec, state: CompressorState, X):
    """Compress row ``r`` of ``X`` with stream ``r`` of ``state``.

    Equivalent to calling :func:`compress` on each row with its own one-row
    state; all streams share the round index.
    """
    X = np.asarray(X, dtype=float)
    if not np.isfinite(X).all():
        raise NumericalError("compressor input contains non-finite entries")
    d = X.shape[1]
    spec.check_dim(d)
    k = state.round
    kind = spec.kind
    if kind == "identity":
        return X.copy(), CompressorState(k + 1)
    if kind == "scaled":
        return spec.factor * X, CompressorState(k + 1)
    if kind == "top_k":
        return _top_k_rows(X, spec.k), CompressorState(k + 1)
    if kind == "norm_quantizer":
        return _norm_quantize_rows(X, spec.levels), CompressorState(k + 1)
    if kind == "scalarized":
        j = (k - 1) % d
        Y = np.zeros_like(X)
        Y[:, j] = X[:, j]
        return Y, CompressorState(k + 1)
    if kind == "stochastic_quantizer":
        Y = np.stack([_stochastic_quantize(X[r], spec.levels, key, k) for r, key in enumerate(state.keys)])
        return Y, CompressorState(k + 1, keys=state.keys)
    threshold = spec.theta0 * spec.rho ** k
    fire = np.linalg.norm(X - state.last_sent, axis=1) > threshold
    Y = np.where(fire[:, None], X, 0.0)
    last = np.where(fire[:, None], X, state.last_sent)
    return Y, CompressorState(k + 1, last_sent=last, triggered=fire)


def transmit_size(spec, d):
    """Payload entries per transmission (index/value pairs count as two entries)."""
    spec.check_dim(d)
    if spec.kind == "top_k":
        return 2 * spec.k
    if spec.kind == "scalarized":
        return 1
    return d


def payload_bits(spec, d):
    """Estimated wire bits per transmission, assuming float64 values."""
    spec.check_dim(d)
    if spec.kind == "top_k":
        return spec.k * (VALUE_BITS + max(1, math.ceil(math.log2(d))))
    if spec.kind == "scalarized":
        return VALUE_BITS
    if spec.kind in ("norm_quantizer", "stochastic_quantizer"):
        return d * math.ceil(math.log2(2 * spec.levels + 1)) + VALUE_BITS
    return d * VALUE_BITS


def payload_cost(spec, d, state_after, rows=1):
    """Per-stream (entries, bits) arrays for the call that produced ``state_after``."""
    entries = np.full(rows, transmit_size(spec, d), dtype=np.int64)
    bits = np.full(rows, payload_bits(spec, d), dtype=np.int64)
    if spec.kind == "event_triggered":
        entries = entries * state_after.triggered
        bits = bits * state_after.triggered
    return entries, bits


@dataclass
class ContractReport:
    kind: str
    dim: int
    kappa0: float
    horizon: int
    trials: int
    L_c_hat: float
    L_c_bound: float
    gamma_hat: float
    passed: bool
    diagnostic: str = ""

    def as_dict(self):
        return {
            "kind": self.kind,
            "dim": self.dim,
            "kappa0": self.kappa0,
            "horizon": self.horizon,
            "trials": self.trials,
            "L_c_hat": self.L_c_hat,
            "L_c_bound": self.L_c_bound,
            "gamma_hat": self.gamma_hat,
            "pass": self.passed,
            "diagnostic": self.diagnostic,
        }


def verify_st_contract(spec, dim, horizon=300, trials=10, seed=0, samples=1000):
    """Simulate the error recursion from random starts and estimate its decay.

    ``gamma_hat`` is the worst per-round decay ``(||x_K|| / ||x_0||)^(1/K)``
    over trials; ``L_c_hat`` is the worst ratio ``||C(x,k)|| / ||x||`` seen on
    the trajectories and on ``samples`` extra random probes.
    """
    if horizon < 100:
        raise InvalidSpec(f"horizon must be >= 100, got {horizon}")
    if trials < 10:
        raise InvalidSpec(f"trials must be >= 10, got {trials}")
    spec.check_dim(dim)
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(dim, horizon)))
    kappa0 = spec.kappa0
    lc_hat = 0.0
    gamma_hat = 0.0
    diagnostic = ""
    passed = True

    for t in range(trials):
        state = new_state(spec, dim, master_seed=seed, labels=f"verify/trial={t}")
        x0 = rng.standard_normal(dim) * 10.0 ** rng.uniform(-3, 3)
        n0 = np.linalg.norm(x0)
        x = x0
        for step in range(horizon):
            nx = np.linalg.norm(x)
            if nx == 0:
                break
            y, state = compress(spec, state, x)
            lc_hat = max(lc_hat, np.linalg.norm(y) / nx)
            x = x - kappa0 * y
            if not np.all(np.isfinite(x)) or np.linalg.norm(x) > 1e12 * n0:
                passed = False
                diagnostic = f"trial {t} diverged at round {step + 1}"
                gamma_hat = math.inf
                break
        if not passed:
            break
        gamma_hat = max(gamma_hat, (np.linalg.norm(x) / n0) ** (1.0 / horizon))

    for s in range(samples):
        state = new_state(spec, dim, master_seed=seed, labels=f"verify/sample={s}")
        state = replace(state, round=int(rng.integers(1, 10 * horizon)))
        if spec.kind == "event_triggered":
            state = replace(state, last_sent=rng.standard_normal((1, dim)))
        x = rng.standard_normal(dim) * 10.0 ** rng.uniform(-3, 3)
        y, _ = compress(spec, state, x)
        lc_hat = max(lc_hat, np.linalg.norm(y) / np.linalg.norm(x))

    passed = passed and gamma_hat < 1.0 and math.isfinite(lc_hat)
    if not passed and not diagnostic:
        diagnostic = f"gamma_hat={gamma_hat:.6g} is not below 1"
    return ContractReport(
        kind=spec.label(),
        dim=dim,
        kappa0=kappa0,
        horizon=horizon,
        trials=trials,
        L_c_hat=float(lc_hat),
        L_c_bound=documented_bound(spec, dim),
        gamma_hat=float(gamma_hat),
        passed=bool(passed),
        diagnostic=diagnostic,
    )
