"""Compressed distributed saddle-point iterations (CDC-DE and CDC-CE).

Each round has two phases.  In phase 1 every agent compresses the innovation
``v_i - sigma_i`` of each transmitted variable and broadcasts only that
payload.  Receivers hold a mirror of every neighbour's filter state (one row
per directed edge) and rebuild ``v_{j,c} = mirror + payload``; mirrors and
owners advance by the same expression on the same operands, so they stay
bit-identical.  In phase 2 every agent updates its primal and dual states
from its own rows and the per-edge reconstructions addressed to it.

States are stored agent-major as ``(n, dim)`` arrays; row ``i`` is agent ``i``.
"""
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from . import compressors as comp
from .errors import CompressorRejected, Diverged, InvalidSpec, TuningFailed
from .graph import laplacian, spectral as spectral_data
from .metrics import RunTrace, consensus_decomposition, residual_sq
from .seeding import rng_for
from .problems import ClecProblem, DlecProblem, kkt_oracle_clec, kkt_oracle_dlec

DIVERGENCE_GUARD = 1e12
AUGMENTATIONS = ("none", "literal")


@dataclass(frozen=True)
class StepSizes:
    kappa: float
    kappa0: float
    eta: float

    def __post_init__(self):
        for name in ("kappa", "kappa0", "eta"):
            if not getattr(self, name) > 0:
                raise InvalidSpec(f"step size {name} must be > 0, got {getattr(self, name)}")


@dataclass(frozen=True)
class InitSpec:
    mode: str = "zeros"
    scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("zeros", "random", "certificate"):
            raise InvalidSpec(f"unknown init mode {self.mode!r}")


@dataclass(frozen=True)
class CommLedger:
    """Entries and bits sent per directed edge: cumulative and for the latest round."""

    edge_entries: np.ndarray
    edge_bits: np.ndarray
    last_entries: np.ndarray
    last_bits: np.ndarray
    rounds: int = 0

    @classmethod
    def empty(cls, n_arcs):
        z = lambda: np.zeros(n_arcs, dtype=np.int64)  # noqa: E731
        return cls(z(), z(), z(), z(), 0)

    @property
    def entries(self):
        return int(self.edge_entries.sum())

    @property
    def bits(self):
        return int(self.edge_bits.sum())

    def advance(self, entries, bits, rounds=1):
        """Ledger after ``rounds`` further rounds that each send ``entries``/``bits`` per arc."""
        return CommLedger(self.edge_entries + rounds * entries, self.edge_bits + rounds * bits,
                          entries, bits, self.rounds + rounds)


@dataclass(frozen=True)
class AgentStateDE:
    x: np.ndarray
    nu: np.ndarray
    lam: np.ndarray
    sigma_x: np.ndarray
    sigma_lam: np.ndarray


@dataclass(frozen=True)
class AgentStateCE(AgentStateDE):
    z: np.ndarray = None
    sigma_z: np.ndarray = None
    sigma_nu: np.ndarray = None


@dataclass
class Engine:
    problem: object
    graph: object
    spec: comp.CompressorSpec
    steps: StepSizes
    coupled: bool
    augmentation: str
    state: dict
    sigma: dict
    mirrors: dict
    streams: dict
    ledger: CommLedger
    k: int = 0
    initial_sums: dict = field(default_factory=dict)

    @property
    def transmitted(self):
        return tuple(self.sigma)

    def agent(self, i):
        s, g = self.state, self.sigma
        common = dict(x=s["x"][i], nu=s["nu"][i], lam=s["lam"][i], sigma_x=g["x"][i], sigma_lam=g["lam"][i])
        if not self.coupled:
            return AgentStateDE(**common)
        return AgentStateCE(**common, z=s["z"][i], sigma_z=g["z"][i], sigma_nu=g["nu"][i])


EngineDE = Engine
EngineCE = Engine


def _dims(p, coupled):
    dims = {"x": p.d, "nu": p.q, "lam": p.d}
    if coupled:
        dims["z"] = p.q
    return dims


@lru_cache(maxsize=256)
def _variable_spec(spec, dim):
    # top_k on a variable shorter than k keeps every entry
    if spec.kind == "top_k" and spec.k > dim:
        return replace(spec, k=dim)
    return spec


def initial_state(p, init, coupled, certificate=None):
    """Starting ``x, nu, lam`` (and ``z``) arrays for an :class:`InitSpec`."""
    n = p.n
    dims = _dims(p, coupled)
    if init.mode == "zeros":
        state = {v: np.zeros((n, m)) for v, m in dims.items()}
    elif init.mode == "random":
        rng = rng_for(init.seed, "init/state")
        state = {v: init.scale * rng.standard_normal((n, m)) for v, m in dims.items()}
    else:
        if certificate is None:
            raise InvalidSpec("init mode 'certificate' needs a certificate")
        state = {
            "x": np.tile(np.asarray(certificate.x_star, dtype=float), (n, 1)),
            "nu": np.array(certificate.nu_star, dtype=float).reshape(n, p.q),
            "lam": np.array(certificate.lambda_star, dtype=float).reshape(n, p.d),
        }
        if coupled:
            state["z"] = np.array(certificate.z_star, dtype=float).reshape(n, p.q)
    for v, m in dims.items():
        if state[v].shape != (n, m):
            raise InvalidSpec(f"initial {v} has shape {state[v].shape}, expected {(n, m)}")
    return state


def _init(p, g, spec, steps, init, certificate, master_seed, coupled, augmentation, check_contract):
    if augmentation not in AUGMENTATIONS:
        raise InvalidSpec(f"augmentation must be one of {AUGMENTATIONS}")
    if g.n != p.n:
        raise InvalidSpec(f"graph has {g.n} agents but the problem has {p.n}")
    init = init or InitSpec()
    spec = replace(spec, kappa0=steps.kappa0)
    n = p.n
    dims = _dims(p, coupled)
    sent = ("x", "lam", "z", "nu") if coupled else ("x", "lam")

    if check_contract:
        for dim in sorted({dims[v] for v in sent}):
            report = comp.verify_st_contract(_variable_spec(spec, dim), dim, seed=master_seed)
            if not report.passed:
                raise CompressorRejected(f"{spec.label()} fails the contract at kappa0={spec.kappa0}: {report.diagnostic}")

    state = initial_state(p, init, coupled, certificate)

    # filters start at the state only for certificate init; otherwise at zero
    if init.mode == "certificate":
        sigma = {v: state[v].copy() for v in sent}
    else:
        sigma = {v: np.zeros((n, dims[v])) for v in sent}
    dst, src, _ = g.directed
    mirrors = {v: sigma[v][src].copy() for v in sent}
    streams = {
        v: comp.new_state(
            _variable_spec(spec, dims[v]),
            dims[v],
            master_seed=master_seed,
            labels=[f"compressor/agent={i}/var={v}" for i in range(n)],
        )
        for v in sent
    }
    sums = {"lam": state["lam"].sum(axis=0)}
    if coupled:
        sums["z"] = state["z"].sum(axis=0)
    return Engine(
        problem=p,
        graph=g,
        spec=spec,
        steps=steps,
        coupled=coupled,
        augmentation=augmentation,
        state=state,
        sigma=sigma,
        mirrors=mirrors,
        streams=streams,
        ledger=CommLedger.empty(dst.size),
        initial_sums=sums,
    )


def init_de(p: DlecProblem, g, spec, steps, init=None, certificate=None, master_seed=0, check_contract=True):
    return _init(p, g, spec, steps, init, certificate, master_seed, False, "literal", check_contract)


def init_ce(p: ClecProblem, g, spec, steps, init=None, certificate=None, master_seed=0,
            augmentation="none", check_contract=True):
    """Coupled engine.

    ``augmentation="none"`` (default) leaves the penalty gradient
    ``A_i^T (A_i x_i - b_i)`` out of the primal step, so KKT points of the
    coupled problem are fixed points.  ``"literal"`` keeps it; per-agent
    residuals need not vanish at the coupled optimum, so that limit is biased
    unless every agent shares the same ``A_i``.
    """
    return _init(p, g, spec, steps, init, certificate, master_seed, True, augmentation, check_contract)


_RECEIVE = {}


def _receive_matrix(g):
    """0/1 matrix summing per-arc values into their receiving agent."""
    mat = _RECEIVE.get(id(g))
    if mat is None or mat[0] is not g:
        dst, _, _ = g.directed
        R = np.zeros((g.n, dst.size))
        R[dst, np.arange(dst.size)] = 1.0
        mat = _RECEIVE[id(g)] = (g, R)
    return mat[1]


@lru_cache(maxsize=256)
def _fixed_arc_cost(spec, dim, n_arcs):
    ent, bts = comp.payload_cost(spec, dim, None, rows=n_arcs)
    ent.setflags(write=False)
    bts.setflags(write=False)
    return ent, bts


def _exchange(engine, var, new_sigma, new_mirrors, new_streams, edge_entries, edge_bits):
    """Phase 1 for one variable: compress, broadcast, reconstruct, aggregate.

    Returns ``sum_j L_ij v_{j,c}`` for every agent.
    """
    dst, src, w = engine.graph.directed
    kappa0 = engine.steps.kappa0
    n, dim = engine.state[var].shape
    spec = _variable_spec(engine.spec, dim)
    sigma = engine.sigma[var]
    payload, streams = comp.compress_rows(spec, engine.streams[var], engine.state[var] - sigma)

    own_c = sigma + payload  # what every neighbour will reconstruct for this agent
    seen_c = engine.mirrors[var] + payload[src]  # receiver dst[e]'s copy of sender src[e]
    flux = w[:, None] * (own_c[dst] - seen_c)
    agg = _receive_matrix(engine.graph) @ flux

    new_sigma[var] = sigma + kappa0 * payload
    new_mirrors[var] = engine.mirrors[var] + kappa0 * payload[src]
    new_streams[var] = streams

    if spec.kind == "event_triggered":
        ent, bts = comp.payload_cost(spec, dim, streams, rows=n)
        ent, bts = ent[src], bts[src]
    else:
        ent, bts = _fixed_arc_cost(spec, dim, src.size)
    edge_entries += ent
    edge_bits += bts
    return agg


def _step(engine):
    p = engine.problem
    kappa, eta = engine.steps.kappa, engine.steps.eta
    new_sigma, new_mirrors, new_streams = {}, {}, {}
    n_arcs = engine.graph.directed[0].size
    edge_entries = np.zeros(n_arcs, dtype=np.int64)
    edge_bits = np.zeros(n_arcs, dtype=np.int64)

    # phase 1: every payload is produced before any state moves
    agg = {
        v: _exchange(engine, v, new_sigma, new_mirrors, new_streams, edge_entries, edge_bits)
        for v in engine.transmitted
    }

    # phase 2
    x, nu, lam = engine.state["x"], engine.state["nu"], engine.state["lam"]
    r = p.agent_residuals(x)
    if engine.coupled:
        r_dual = r + agg["z"]
        r_aug = r if engine.augmentation == "literal" else None
    else:
        r_dual = r_aug = r
    At = lambda v: np.einsum("iqd,iq->id", p.A, v)  # noqa: E731
    new_state = {
        "x": x - kappa * (agg["x"] + At(nu if r_aug is None else nu + r_aug) + agg["lam"] + eta * p.grad(x)),
        "nu": nu + kappa * r_dual,
        "lam": lam + kappa * agg["x"],
    }
    if engine.coupled:
        new_state["z"] = engine.state["z"] - kappa * agg["nu"]

    k = engine.k + 1
    for v, arr in new_state.items():
        if not np.abs(arr).max(initial=0.0) <= DIVERGENCE_GUARD:  # also catches nan
            raise Diverged(f"state {v} left the divergence guard at round {k}", round_index=k)

    ledger = engine.ledger.advance(edge_entries, edge_bits)
    return replace(engine, state=new_state, sigma=new_sigma, mirrors=new_mirrors, streams=new_streams, ledger=ledger, k=k)


def step_de(engine):
    if engine.coupled:
        raise InvalidSpec("step_de needs a DLEC engine")
    return _step(engine)


def step_ce(engine):
    if not engine.coupled:
        raise InvalidSpec("step_ce needs a CLEC engine")
    return _step(engine)


# Uncompressed reference written directly on the stacked (global) vectors with
# dense Kronecker operators.  It shares no code with the per-agent path above.

@dataclass
class Baseline:
    problem: object
    steps: StepSizes
    coupled: bool
    augmentation: str
    Ld: np.ndarray
    Lq: np.ndarray
    A: np.ndarray
    H: np.ndarray
    x: np.ndarray
    nu: np.ndarray
    lam: np.ndarray
    z: np.ndarray = None
    k: int = 0


def baseline_init(p, g, steps, engine_state=None, augmentation="none"):
    """Stacked baseline; ``engine_state`` (an engine's ``state`` dict) sets the start point."""
    coupled = isinstance(p, ClecProblem)
    L = laplacian(g)
    n = p.n
    st = engine_state or {}
    get = lambda name, m: np.array(st[name], dtype=float).reshape(-1) if name in st else np.zeros(n * m)  # noqa: E731
    return Baseline(
        problem=p,
        steps=steps,
        coupled=coupled,
        augmentation=augmentation,
        Ld=np.kron(L, np.eye(p.d)),
        Lq=np.kron(L, np.eye(p.q)),
        A=p.A_blk,
        H=p.H_blk,
        x=get("x", p.d),
        nu=get("nu", p.q),
        lam=get("lam", p.d),
        z=get("z", p.q) if coupled else None,
    )


def _baseline_step(bl):
    p, s = bl.problem, bl.steps
    kappa, eta = s.kappa, s.eta
    b = p.b_vec
    grad = bl.H @ bl.x + p.c.reshape(-1)
    res = bl.A @ bl.x - b
    if bl.coupled:
        dual_res = res + bl.Lq @ bl.z
        aug = res if bl.augmentation == "literal" else np.zeros_like(res)
    else:
        dual_res = aug = res
    x = bl.x - kappa * (bl.Ld @ bl.x + bl.A.T @ bl.nu + bl.Ld @ bl.lam + eta * grad + bl.A.T @ aug)
    nu = bl.nu + kappa * dual_res
    lam = bl.lam + kappa * (bl.Ld @ bl.x)
    z = bl.z - kappa * (bl.Lq @ bl.nu) if bl.coupled else None
    return replace(bl, x=x, nu=nu, lam=lam, z=z, k=bl.k + 1)


def baseline_step_de(bl):
    return _baseline_step(bl)


def baseline_step_ce(bl):
    return _baseline_step(bl)


def _record(engine, certificate, spec_data):
    p = engine.problem
    x = engine.state["x"]
    L = spec_data.laplacian
    row = dict.fromkeys(("residual_sq", "coupled_feas_norm", "consensus_perp", "consensus_par", "sum_z_drift"))
    row["k"] = engine.k
    resid = p.agent_residuals(x)
    if engine.coupled:
        row["feas_norm"] = float(np.linalg.norm(resid + L @ engine.state["z"]))
        row["coupled_feas_norm"] = float(np.linalg.norm(resid.sum(axis=0)))
        row["sum_z_drift"] = float(np.linalg.norm(engine.state["z"].sum(axis=0) - engine.initial_sums["z"]))
    else:
        row["feas_norm"] = float(np.linalg.norm(resid))
    if certificate is not None:
        row["residual_sq"] = residual_sq(x, certificate.x_star)
        parts = consensus_decomposition(x, certificate.x_star, spec_data)
        row["consensus_perp"] = parts["perp_norm"]
        row["consensus_par"] = parts["par_norm"]
    row["sum_lambda_drift"] = float(np.linalg.norm(engine.state["lam"].sum(axis=0) - engine.initial_sums["lam"]))
    row["comm_entries_cum"] = engine.ledger.entries
    row["comm_bits_cum"] = engine.ledger.bits
    return row


def _kernel_arrays(engine):
    """Contiguous working copies of every array the compiled loop mutates."""
    p = engine.problem
    n_arcs = engine.graph.directed[0].size
    dims = {"x": p.d, "lam": p.d, "nu": p.q, "z": p.q}

    def grab(store, v, rows):
        if v in store:
            return np.array(store[v], dtype=float, order="C")
        return np.zeros((rows, dims[v]))

    arr = {v: grab(engine.state, v, p.n) for v in dims}
    for v, tag in (("x", "x"), ("lam", "lam"), ("z", "z"), ("nu", "nu")):
        arr["s" + tag] = grab(engine.sigma, v, p.n)
        arr["m" + tag] = grab(engine.mirrors, v, n_arcs)
    return arr


def _engine_from_arrays(engine, arr, rounds):
    sent = engine.transmitted
    state = {"x": arr["x"].copy(), "nu": arr["nu"].copy(), "lam": arr["lam"].copy()}
    if engine.coupled:
        state["z"] = arr["z"].copy()
    sig_key = {"x": "sx", "lam": "slam", "z": "sz", "nu": "snu"}
    mir_key = {"x": "mx", "lam": "mlam", "z": "mz", "nu": "mnu"}
    sigma = {v: arr[sig_key[v]].copy() for v in sent}
    mirrors = {v: arr[mir_key[v]].copy() for v in sent}
    streams = {v: replace(st, round=st.round + rounds) for v, st in engine.streams.items()}
    n_arcs = engine.graph.directed[0].size
    ent = np.zeros(n_arcs, dtype=np.int64)
    bts = np.zeros(n_arcs, dtype=np.int64)
    for v in sent:
        dim = engine.state[v].shape[1]
        e, b = _fixed_arc_cost(_variable_spec(engine.spec, dim), dim, n_arcs)
        ent += e
        bts += b
    ledger = engine.ledger.advance(ent, bts, rounds) if rounds else engine.ledger
    return replace(engine, state=state, sigma=sigma, mirrors=mirrors, streams=streams, ledger=ledger,
                   k=engine.k + rounds)


def _kernel_chunk(engine, arr, rounds, x_star, target):
    """Run up to ``rounds`` compiled rounds; returns ``(engine, reached, diverged)``."""
    from . import kernels

    p, st, spec = engine.problem, engine.steps, engine.spec
    dst, src, w = engine.graph.directed
    first = engine.streams["x"].round
    code, done = kernels.run_rounds(
        kernels.KIND_CODES[spec.kind], spec.k, spec.levels, spec.factor, first, rounds,
        st.kappa, st.kappa0, st.eta, engine.coupled, engine.augmentation == "literal",
        p.Q, p.c, p.A, p.b, dst, src, w,
        arr["x"], arr["nu"], arr["lam"], arr["z"],
        arr["sx"], arr["slam"], arr["sz"], arr["snu"],
        arr["mx"], arr["mlam"], arr["mz"], arr["mnu"],
        x_star, target, DIVERGENCE_GUARD,
    )
    engine = _engine_from_arrays(engine, arr, done)
    return engine, code == kernels.TARGET_REACHED, code == kernels.DIVERGED


def compiled_supported(engine):
    from .kernels import KIND_CODES

    return engine.spec.kind in KIND_CODES


def run(engine, max_iters, target_residual=None, record_every=1, certificate=None, metadata=None, compiled=True):
    """Iterate until ``max_iters`` rounds or until ``residual_sq <= target_residual``.

    Records round 0, every ``record_every``-th round and the final round.
    Returns ``(trace, final_engine)``.  On divergence the partial trace is
    attached to the raised :class:`Diverged`.

    With ``compiled=True`` deterministic compressors run through the compiled
    loop in :mod:`csaddle.kernels`; otherwise every round goes through
    :func:`step_de` / :func:`step_ce`.
    """
    if max_iters < 1:
        raise InvalidSpec(f"max_iters must be >= 1, got {max_iters}")
    if record_every < 1:
        raise InvalidSpec(f"record_every must be >= 1, got {record_every}")
    if target_residual is not None and certificate is None:
        raise InvalidSpec("a target residual needs a certificate")
    step = step_ce if engine.coupled else step_de
    spec_data = spectral_data(engine.graph)
    trace = RunTrace(metadata=dict(metadata or {}))
    trace.rounds.append(_record(engine, certificate, spec_data))
    x_star = np.zeros(engine.problem.d) if certificate is None else np.asarray(certificate.x_star, dtype=float)
    use_kernel = compiled and compiled_supported(engine)
    arr = _kernel_arrays(engine) if use_kernel else None
    target = -1.0 if target_residual is None else float(target_residual)
    remaining = int(max_iters)
    while remaining > 0:
        if use_kernel:
            chunk = min(remaining, record_every - engine.k % record_every)
            engine, done, diverged = _kernel_chunk(engine, arr, chunk, x_star, target)
            remaining -= chunk if not (done or diverged) else remaining
            if diverged:
                trace.final_x = engine.state["x"].copy()
                raise Diverged(f"state left the divergence guard at round {engine.k}", round_index=engine.k,
                               trace=trace)
        else:
            try:
                engine = step(engine)
            except Diverged as exc:
                exc.trace = trace
                trace.final_x = engine.state["x"].copy()
                raise
            remaining -= 1
            done = target >= 0 and float(np.sum((engine.state["x"] - x_star) ** 2)) <= target
        if done or engine.k % record_every == 0 or remaining == 0:
            trace.rounds.append(_record(engine, certificate, spec_data))
        if done:
            break
    trace.final_x = engine.state["x"].copy()
    return trace, engine


def default_eta(p):
    return min(1.0, p.mu / float(np.linalg.eigvalsh(p.hessian_sum())[-1]))


def initial_kappa(p, g, eta):
    return 1.0 / (spectral_data(g).lambda_max + p.constraint_norm_sq() + eta * p.grad_lipschitz())


def envelope_decreasing(residuals, blocks=10, floor_factor=1e3):
    """Monotone-envelope test on a probe trajectory.

    The trajectory is cut into ``blocks`` equal blocks.  It passes when every
    block maximum after the first is strictly below the one before it, and the
    last is below the first.  Blocks whose maximum sits at the round-off floor
    ``floor_factor * eps**2 * initial`` count as decreasing.
    """
    r = np.asarray(residuals, dtype=float)
    if r.size < blocks or not np.all(np.isfinite(r)):
        return False
    floor = floor_factor * np.finfo(float).eps ** 2 * r[0]
    peaks = np.array([blk.max() for blk in np.array_split(r, blocks)])
    later = peaks[1:]
    steps_ok = (np.diff(later) < 0) | (later[1:] <= floor)
    return bool(np.all(steps_ok) and peaks[-1] < peaks[0])


def tune_steps(p, g, spec, budget=8, probe_rounds=500, master_seed=0, augmentation="none"):
    """Pick ``(kappa, kappa0, eta)`` by halving ``kappa`` until a probe run contracts.

    ``kappa0`` is the compressor's own; ``eta = min(1, mu / lambda_max(sum Q_i))``;
    ``kappa`` starts at ``1 / (lambda_n + max ||A_i||^2 + eta * max ||Q_i||)``.
    """
    if budget < 1:
        raise InvalidSpec(f"tuning budget must be >= 1, got {budget}")
    coupled = isinstance(p, ClecProblem)
    eta = default_eta(p)
    kappa = initial_kappa(p, g, eta)
    cert = (kkt_oracle_clec if coupled else kkt_oracle_dlec)(p, g, eta=eta)
    init = init_ce if coupled else init_de
    extra = {"augmentation": augmentation} if coupled else {}
    checked = False
    for _ in range(budget):
        steps = StepSizes(kappa=kappa, kappa0=spec.kappa0, eta=eta)
        engine = init(p, g, spec, steps, master_seed=master_seed, check_contract=not checked, **extra)
        checked = True
        try:
            trace, _ = run(engine, probe_rounds, certificate=cert)
        except Diverged:
            kappa /= 2.0
            continue
        if envelope_decreasing(trace.column("residual_sq")):
            return steps
        kappa /= 2.0
    raise TuningFailed(f"no contracting kappa after {budget} probe runs (last tried {2 * kappa:.3e})")
