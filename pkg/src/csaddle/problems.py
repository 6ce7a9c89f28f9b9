"""Quadratic DLEC/CLEC instances, exact KKT certificates, and the z-reformulation.

Stacked conventions: agent blocks are concatenated in agent order, so the
stacked primal is ``x = [x_1; ...; x_n]`` (length ``n*d``), ``A`` is the block
diagonal of the ``A_i`` and ``L_d = kron(L, I_d)``.

The stationarity identity used throughout is the one the saddle-point engine
actually has as its fixed point::

    eta * grad F(x*) + A^T nu* + L_d lambda* = 0
"""
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import block_diag, null_space

from .errors import DegenerateInstance, InvalidSpec, NotInRange
from .graph import laplacian
from .seeding import rng_for

MAX_DRAWS = 20


@dataclass(frozen=True)
class QuadraticObjective:
    """``f(x) = 0.5 x^T Q x + c^T x``."""

    Q: np.ndarray
    c: np.ndarray

    def value(self, x):
        return 0.5 * x @ self.Q @ x + self.c @ x

    def grad(self, x):
        return self.Q @ x + self.c


@dataclass(frozen=True, eq=False)
class _Instance:
    n: int
    d: int
    q: int
    mu: float
    Q: np.ndarray = field(repr=False)  # (n, d, d)
    c: np.ndarray = field(repr=False)  # (n, d)
    A: np.ndarray = field(repr=False)  # (n, q, d)
    b: np.ndarray = field(repr=False)  # (n, q)
    witness: np.ndarray = field(repr=False)  # (d,)
    seed: int = None

    kind = None

    def __post_init__(self):
        n, d, q = self.n, self.d, self.q
        shapes = {"Q": (n, d, d), "c": (n, d), "A": (n, q, d), "b": (n, q), "witness": (d,)}
        for name, shape in shapes.items():
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != shape:
                raise InvalidSpec(f"{name} has shape {arr.shape}, expected {shape}")
            object.__setattr__(self, name, arr)
        if not np.allclose(self.Q, np.swapaxes(self.Q, 1, 2), atol=1e-12, rtol=0):
            raise InvalidSpec("objective matrices Q_i must be symmetric")

    @property
    def objectives(self):
        return [QuadraticObjective(self.Q[i], self.c[i]) for i in range(self.n)]

    def grad(self, X):
        """Per-agent gradients for states ``X`` of shape ``(n, d)``."""
        return np.einsum("ijk,ik->ij", self.Q, X) + self.c

    @property
    def A_blk(self):
        return block_diag(*self.A)

    @property
    def b_vec(self):
        return self.b.reshape(-1)

    @property
    def H_blk(self):
        return block_diag(*self.Q)

    def hessian_sum(self):
        return self.Q.sum(axis=0)

    def strong_convexity(self):
        return float(np.linalg.eigvalsh(self.hessian_sum())[0])

    def grad_lipschitz(self):
        return float(max(np.linalg.norm(Qi, 2) for Qi in self.Q))

    def constraint_norm_sq(self):
        return float(max(np.linalg.norm(Ai, 2) for Ai in self.A) ** 2)

    def agent_residuals(self, X):
        """``A_i x_i - b_i`` for every agent, shape ``(n, q)``."""
        return np.einsum("iqd,id->iq", self.A, X) - self.b

    def to_dict(self):
        return {
            "kind": self.kind,
            "n": self.n,
            "d": self.d,
            "q": self.q,
            "mu": float(self.mu),
            "seed": self.seed,
            "Q": self.Q.tolist(),
            "c": self.c.tolist(),
            "A": self.A.tolist(),
            "b": self.b.tolist(),
            "witness": self.witness.tolist(),
        }


class DlecProblem(_Instance):
    """Each agent carries its own constraint ``A_i x = b_i``."""

    kind = "dlec"


class ClecProblem(_Instance):
    """Only the coupled sum ``sum_i (A_i x - b_i) = 0`` is imposed."""

    kind = "clec"


def problem_from_dict(doc):
    cls = {"dlec": DlecProblem, "clec": ClecProblem}.get(doc.get("kind"))
    if cls is None:
        raise InvalidSpec(f"unknown problem kind {doc.get('kind')!r}")
    return cls(
        n=int(doc["n"]),
        d=int(doc["d"]),
        q=int(doc["q"]),
        mu=float(doc["mu"]),
        Q=np.array(doc["Q"], dtype=float),
        c=np.array(doc["c"], dtype=float),
        A=np.array(doc["A"], dtype=float),
        b=np.array(doc["b"], dtype=float),
        witness=np.array(doc["witness"], dtype=float),
        seed=doc.get("seed"),
    )


def _draw_common(rng, n, d, q, mu, shared_constraint):
    B = rng.standard_normal((n, d, d))
    Q = np.einsum("ikj,ikl->ijl", B, B) + (mu / n) * np.eye(d)
    Q = 0.5 * (Q + np.swapaxes(Q, 1, 2))
    c = rng.standard_normal((n, d))
    if shared_constraint:
        A = np.broadcast_to(rng.standard_normal((q, d)), (n, q, d)).copy()
    else:
        A = rng.standard_normal((n, q, d))
    witness = rng.standard_normal(d)
    return Q, c, A, witness


def _full_row_rank(A):
    return all(np.linalg.svd(Ai, compute_uv=False)[-1] > 1e-6 * max(1.0, np.linalg.norm(Ai)) for Ai in A)


def _check_dims(n, d, q, mu):
    if n < 1 or d < 1 or q < 1:
        raise InvalidSpec(f"dimensions must be positive, got n={n}, d={d}, q={q}")
    if q > d:
        raise InvalidSpec(f"need q <= d for solvable local constraints, got q={q}, d={d}")
    if not mu > 0:
        raise InvalidSpec(f"mu must be > 0, got {mu}")


def generate_dlec(seed, n, d, q, mu, shared_constraint=False) -> DlecProblem:
    """Random instance with ``Q_i = B_i^T B_i + (mu/n) I`` and ``b_i = A_i x_w``.

    ``shared_constraint`` uses one ``A`` for all agents.
    """
    _check_dims(n, d, q, mu)
    for attempt in range(MAX_DRAWS):
        rng = rng_for(seed, f"problem/dlec/draw={attempt}")
        Q, c, A, witness = _draw_common(rng, n, d, q, mu, shared_constraint)
        if _full_row_rank(A):
            b = np.einsum("iqd,d->iq", A, witness)
            return DlecProblem(n=n, d=d, q=q, mu=mu, Q=Q, c=c, A=A, b=b, witness=witness, seed=seed)
    raise DegenerateInstance(f"no full-row-rank constraint draw in {MAX_DRAWS} attempts")


def generate_clec(seed, n, d, q, mu, perturb=True, shared_constraint=False, min_violation=0.1) -> ClecProblem:
    """As :func:`generate_dlec`, then ``b_i += delta_i`` with ``sum_i delta_i = 0``.

    With ``perturb`` the draw is repeated until some agent's own constraint is
    violated by more than ``min_violation`` at the witness (needs ``n >= 2``).
    """
    _check_dims(n, d, q, mu)
    for attempt in range(MAX_DRAWS):
        rng = rng_for(seed, f"problem/clec/draw={attempt}")
        Q, c, A, witness = _draw_common(rng, n, d, q, mu, shared_constraint)
        if not _full_row_rank(A):
            continue
        b = np.einsum("iqd,d->iq", A, witness)
        if perturb and n > 1:
            delta = rng.standard_normal((n, q))
            delta -= delta.mean(axis=0)
            if np.max(np.linalg.norm(delta, axis=1)) <= min_violation:
                continue
            b = b + delta
        return ClecProblem(n=n, d=d, q=q, mu=mu, Q=Q, c=c, A=A, b=b, witness=witness, seed=seed)
    raise DegenerateInstance(f"no usable coupled draw in {MAX_DRAWS} attempts")


@dataclass(frozen=True)
class OptimalityCertificate:
    x_star: np.ndarray
    nu_star: np.ndarray  # (n, q)
    lambda_star: np.ndarray  # (n, d)
    eta: float
    z_star: np.ndarray = None  # (n, q), coupled only

    def to_dict(self):
        doc = {
            "eta": float(self.eta),
            "x_star": self.x_star.tolist(),
            "nu_star": self.nu_star.tolist(),
            "lambda_star": self.lambda_star.tolist(),
        }
        if self.z_star is not None:
            doc["z_star"] = self.z_star.tolist()
        return doc


def _constrained_minimizer(H, g, C, r):
    """argmin 0.5 x^T H x + g^T x  s.t.  C x = r  (C may be rank deficient)."""
    x_p, *_ = np.linalg.lstsq(C, r, rcond=None)
    if np.linalg.norm(C @ x_p - r) > 1e-9 * max(1.0, np.linalg.norm(r)):
        raise DegenerateInstance("linear constraints are inconsistent")
    N = null_space(C)
    if N.shape[1] == 0:
        return x_p
    w = np.linalg.solve(N.T @ H @ N, -N.T @ (H @ x_p + g))
    return x_p + N @ w


def _min_norm(M, rhs, what):
    sol, *_ = np.linalg.lstsq(M, rhs, rcond=None)
    res = np.linalg.norm(M @ sol - rhs)
    if res > 1e-10 * max(1.0, np.linalg.norm(rhs)):
        raise DegenerateInstance(f"{what}: least-squares residual {res:.3e}")
    return sol


def kkt_oracle_dlec(p: DlecProblem, graph, eta=1.0) -> OptimalityCertificate:
    """Consensus optimum and minimum-norm multipliers ``(nu*, lambda*)``."""
    n, d, q = p.n, p.d, p.q
    x_star = _constrained_minimizer(
        p.hessian_sum(), p.c.sum(axis=0), p.A.reshape(n * q, d), p.b.reshape(-1)
    )
    Ld = np.kron(laplacian(graph), np.eye(d))
    rhs = -eta * p.grad(np.tile(x_star, (n, 1))).reshape(-1)
    sol = _min_norm(np.hstack([p.A_blk.T, Ld]), rhs, "DLEC multipliers")
    return OptimalityCertificate(
        x_star=x_star,
        nu_star=sol[: n * q].reshape(n, q),
        lambda_star=sol[n * q :].reshape(n, d),
        eta=eta,
    )


def kkt_oracle_clec(p: ClecProblem, graph, eta=1.0, z0=None) -> OptimalityCertificate:
    """Coupled optimum with consensual ``nu*`` and ``z*`` pinned to ``sum_i z0_i``."""
    n, d, q = p.n, p.d, p.q
    x_star = _constrained_minimizer(p.hessian_sum(), p.c.sum(axis=0), p.A.sum(axis=0), p.b.sum(axis=0))
    L = laplacian(graph)
    Ld = np.kron(L, np.eye(d))
    Lq = np.kron(L, np.eye(q))
    rhs = -eta * p.grad(np.tile(x_star, (n, 1))).reshape(-1)
    # nu* = 1 (x) nu_bar; scale the column block by 1/sqrt(n) so the
    # least-squares minimum norm is the norm of the stacked nu*.
    sqn = np.sqrt(n)
    At_stack = np.concatenate(list(np.swapaxes(p.A, 1, 2)), axis=0) / sqn
    sol = _min_norm(np.hstack([At_stack, Ld]), rhs, "CLEC multipliers")
    nu_bar = sol[:q] / sqn
    lam = sol[q:].reshape(n, d)
    resid = (p.b - np.einsum("iqd,d->iq", p.A, x_star)).reshape(-1)
    z = _min_norm(Lq, resid, "CLEC auxiliary z").reshape(n, q)
    if z0 is not None:
        z = z + (np.asarray(z0, dtype=float).reshape(n, q).mean(axis=0) - z.mean(axis=0))
    return OptimalityCertificate(
        x_star=x_star,
        nu_star=np.tile(nu_bar, (n, 1)),
        lambda_star=lam,
        eta=eta,
        z_star=z,
    )


def kkt_residuals(p, cert, graph):
    """Named residual norms of every optimality condition."""
    n, d, q = p.n, p.d, p.q
    L = laplacian(graph)
    X = np.tile(cert.x_star, (n, 1))
    nu = np.asarray(cert.nu_star).reshape(n, q)
    lam = np.asarray(cert.lambda_star).reshape(n, d)
    res = {}
    feas = p.agent_residuals(X)
    if isinstance(p, ClecProblem):
        feas = feas + L @ np.asarray(cert.z_star).reshape(n, q)
        res["dual_consensus"] = float(np.linalg.norm(L @ nu))
    res["feasibility"] = float(np.linalg.norm(feas))
    res["consensus"] = float(np.linalg.norm(L @ X))
    stat = cert.eta * p.grad(X) + np.einsum("iqd,iq->id", p.A, nu) + L @ lam
    res["stationarity"] = float(np.linalg.norm(stat))
    return res


def check_kkt(p, cert, graph) -> float:
    return max(kkt_residuals(p, cert, graph).values())


def coupled_residual(p, X):
    """``sum_i (A_i x_i - b_i)`` for stacked or ``(n, d)`` states."""
    X = np.asarray(X, dtype=float).reshape(p.n, p.d)
    return p.agent_residuals(X).sum(axis=0)


def auxiliary_from_coupled(p, graph, x, tol=1e-8):
    """Minimum-norm ``z`` with ``A x - b + L_q z = 0`` for a coupled-feasible ``x``."""
    if np.linalg.norm(coupled_residual(p, x)) > tol:
        raise NotInRange("x violates the coupled constraint; A x - b is outside range(L_q)")
    X = np.asarray(x, dtype=float).reshape(p.n, p.d)
    Lq = np.kron(laplacian(graph), np.eye(p.q))
    z, *_ = np.linalg.lstsq(Lq, -p.agent_residuals(X).reshape(-1), rcond=None)
    return z.reshape(p.n, p.q)


def reformulation_holds(x, z, p, graph, tol=1e-9):
    """True iff ``(x, z)`` satisfies ``A x - b + L_q z = 0`` and hence the coupled constraint.

    Returns False when the reformulated residual exceeds ``tol`` or the
    coupled sum exceeds ``tol * sqrt(n)``.
    """
    X = np.asarray(x, dtype=float).reshape(p.n, p.d)
    Z = np.asarray(z, dtype=float).reshape(p.n, p.q)
    own = p.agent_residuals(X)
    if np.linalg.norm(own + laplacian(graph) @ Z) > tol:
        return False
    return bool(np.linalg.norm(own.sum(axis=0)) <= tol * np.sqrt(p.n))


# alternative names for the two maps above
lemma1_forward = auxiliary_from_coupled
lemma1_backward = reformulation_holds
