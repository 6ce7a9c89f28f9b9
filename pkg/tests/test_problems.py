import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import null_space

from csaddle.errors import InvalidSpec, NotInRange
from csaddle.graph import GraphSpec, build_graph, laplacian
from csaddle.problems import (
    ClecProblem, DlecProblem, check_kkt, coupled_residual, generate_clec, generate_dlec, kkt_oracle_clec,
    kkt_oracle_dlec, reformulation_holds, auxiliary_from_coupled, problem_from_dict,
)

from conftest import random_graph


def kkt_solve(H, g, C, r):
    """Independent oracle: the bordered system [[H, C^T], [C, 0]] solved densely."""
    d, m = H.shape[0], C.shape[0]
    K = np.block([[H, C.T], [C, np.zeros((m, m))]])
    sol = np.linalg.lstsq(K, np.concatenate([-g, r]), rcond=None)[0]
    return sol[:d]


def instance(seed, coupled=False, **kw):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 11))
    d = int(rng.integers(1, 7))
    q = int(rng.integers(1, d + 1))
    gen = generate_clec if coupled else generate_dlec
    return gen(seed, n, d, q, mu=float(rng.uniform(0.1, 3)), **kw), random_graph(seed, n)


def test_dlec_small_example():
    p = generate_dlec(1, 2, 1, 1, 2.0)
    assert np.all(p.A != 0)
    np.testing.assert_allclose(p.A[:, 0, 0] * p.witness[0], p.b[:, 0], atol=1e-15)


def test_dlec_witness_feasible():
    p = generate_dlec(42, 4, 3, 1, 1.0)
    assert np.abs(p.agent_residuals(np.tile(p.witness, (4, 1)))).max() <= 1e-14


def test_q_above_d_rejected():
    with pytest.raises(InvalidSpec):
        generate_dlec(0, 3, 2, 3, 1.0)


def test_clec_witness_couples_but_violates_locally():
    p = generate_clec(3, 3, 2, 2, 1.0)
    X = np.tile(p.witness, (3, 1))
    assert np.linalg.norm(coupled_residual(p, X)) <= 1e-12
    assert np.linalg.norm(p.agent_residuals(X), axis=1).max() > 0.1


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), coupled=st.booleans())
def test_strong_convexity(seed, coupled):
    p, _ = instance(seed, coupled)
    assert np.linalg.eigvalsh(p.Q.sum(axis=0))[0] >= p.mu - 1e-10
    if coupled:
        assert np.linalg.norm(coupled_residual(p, np.tile(p.witness, (p.n, 1)))) <= 1e-12


def test_roundtrip_through_dict():
    p = generate_clec(5, 3, 3, 2, 1.0)
    r = problem_from_dict(p.to_dict())
    assert isinstance(r, ClecProblem)
    for name in ("Q", "c", "A", "b", "witness"):
        np.testing.assert_array_equal(getattr(r, name), getattr(p, name))


@pytest.mark.parametrize("seed", range(30))
def test_dlec_oracle_against_bordered_system(seed):
    p, g = instance(seed)
    cert = kkt_oracle_dlec(p, g, eta=0.7)
    x_ref = kkt_solve(p.Q.sum(axis=0), p.c.sum(axis=0), p.A.reshape(-1, p.d), p.b.reshape(-1))
    np.testing.assert_allclose(cert.x_star, x_ref, atol=1e-8)
    assert check_kkt(p, cert, g) <= 1e-10
    assert np.allclose(cert.lambda_star.sum(axis=0), 0, atol=1e-9)  # min-norm representative


@pytest.mark.parametrize("seed", range(30))
def test_clec_oracle_against_bordered_system(seed):
    p, g = instance(seed, coupled=True)
    z0 = np.random.default_rng(seed).standard_normal((p.n, p.q))
    cert = kkt_oracle_clec(p, g, eta=0.7, z0=z0)
    x_ref = kkt_solve(p.Q.sum(axis=0), p.c.sum(axis=0), p.A.sum(axis=0), p.b.sum(axis=0))
    np.testing.assert_allclose(cert.x_star, x_ref, atol=1e-8)
    assert check_kkt(p, cert, g) <= 1e-10
    assert np.abs(laplacian(g) @ cert.nu_star).max() <= 1e-10
    np.testing.assert_allclose(cert.z_star.sum(axis=0), z0.sum(axis=0), atol=1e-10)


def test_unconstrained_limit():
    p0 = generate_dlec(2, 3, 2, 1, 1.0)
    p = DlecProblem(n=3, d=2, q=1, mu=1.0, Q=p0.Q, c=p0.c, A=np.zeros((3, 1, 2)), b=np.zeros((3, 1)),
                    witness=np.zeros(2))
    g = build_graph(GraphSpec("ring", 3))
    cert = kkt_oracle_dlec(p, g, eta=1.0)
    np.testing.assert_allclose(cert.x_star, np.linalg.solve(p.Q.sum(axis=0), -p.c.sum(axis=0)), atol=1e-12)
    assert np.abs(p.grad(np.tile(cert.x_star, (3, 1))).sum(axis=0)).max() <= 1e-10
    assert np.abs(cert.nu_star).max() <= 1e-12
    assert check_kkt(p, cert, g) <= 1e-10


def test_pinned_scalar_example():
    c = np.array([1.0, 4.0])
    p = DlecProblem(n=2, d=1, q=1, mu=2.0, Q=np.ones((2, 1, 1)), c=-c[:, None], A=np.ones((2, 1, 1)),
                    b=np.full((2, 1), c.mean()), witness=np.array([c.mean()]))
    cert = kkt_oracle_dlec(p, build_graph(GraphSpec("path", 2)))
    assert cert.x_star[0] == pytest.approx(2.5, abs=1e-12)


def test_identity_constraints_average_b():
    n, d = 4, 3
    p0 = generate_clec(9, n, d, d, 1.0)
    A = np.broadcast_to(np.eye(d), (n, d, d)).copy()
    b = np.random.default_rng(1).standard_normal((n, d))
    p = ClecProblem(n=n, d=d, q=d, mu=1.0, Q=p0.Q, c=p0.c, A=A, b=b, witness=b.mean(axis=0))
    cert = kkt_oracle_clec(p, build_graph(GraphSpec("ring", n)))
    np.testing.assert_allclose(n * cert.x_star, b.sum(axis=0), atol=1e-12)


def test_single_constrained_agent_embedding():
    """CLEC with one unconstrained agent equals DLEC with that agent's constraint dropped."""
    p0 = generate_dlec(4, 2, 3, 2, 1.0)
    A = p0.A.copy()
    A[1] = 0.0
    b = p0.b.copy()
    b[1] = 0.0
    g = build_graph(GraphSpec("path", 2))
    common = dict(n=2, d=3, q=2, mu=1.0, Q=p0.Q, c=p0.c, A=A, b=b, witness=p0.witness)
    cd = kkt_oracle_dlec(DlecProblem(**common), g)
    cc = kkt_oracle_clec(ClecProblem(**common), g)
    np.testing.assert_allclose(cc.x_star, cd.x_star, atol=1e-8)


@pytest.mark.parametrize("seed", range(10))
def test_dlec_clec_agree_without_perturbation(seed):
    rng = np.random.default_rng(seed)
    n, d = int(rng.integers(2, 8)), int(rng.integers(1, 6))
    q = int(rng.integers(1, d + 1))
    pc = generate_clec(seed, n, d, q, 1.0, perturb=False, shared_constraint=True)
    fields = {k: getattr(pc, k) for k in ("n", "d", "q", "mu", "Q", "c", "A", "b", "witness")}
    g = random_graph(seed, n)
    xd = kkt_oracle_dlec(DlecProblem(**fields), g).x_star
    xc = kkt_oracle_clec(pc, g).x_star
    np.testing.assert_allclose(xd, xc, atol=1e-8)


def test_check_kkt_detects_primal_perturbation():
    p, g = instance(11)
    cert = kkt_oracle_dlec(p, g)
    x = cert.x_star.copy()
    x[0] += 1e-3
    bumped = type(cert)(x_star=x, nu_star=cert.nu_star, lambda_star=cert.lambda_star, eta=cert.eta)
    assert check_kkt(p, bumped, g) >= 1e-4


def test_check_kkt_flat_along_multiplier_null_direction():
    p, g = instance(12)
    cert = kkt_oracle_dlec(p, g)
    n, d, q = p.n, p.d, p.q
    M = np.hstack([p.A_blk.T, np.kron(laplacian(g), np.eye(d))])
    v = null_space(M)[:, 0]
    moved = type(cert)(x_star=cert.x_star, nu_star=cert.nu_star + v[: n * q].reshape(n, q),
                       lambda_star=cert.lambda_star + v[n * q:].reshape(n, d), eta=cert.eta)
    assert abs(check_kkt(p, moved, g) - check_kkt(p, cert, g)) <= 1e-10


def solve_local(p, target):
    """Per-agent least-norm solve of ``A_i x_i = target_i`` with one refinement pass."""
    X = np.stack([np.linalg.lstsq(p.A[i], target[i], rcond=None)[0] for i in range(p.n)])
    fix = target - np.einsum("iqd,id->iq", p.A, X)
    return X + np.stack([np.linalg.lstsq(p.A[i], fix[i], rcond=None)[0] for i in range(p.n)])


def coupled_feasible_point(p, rng):
    X = rng.standard_normal((p.n, p.d)) * 3
    C = np.hstack(list(p.A))  # q x (n d)
    x = X.reshape(-1)
    fix = np.linalg.lstsq(C, C @ x - p.b.sum(axis=0), rcond=None)[0]
    return (x - fix).reshape(p.n, p.d)


def test_auxiliary_z_zero_case():
    p, g = instance(21, coupled=True)
    X = np.stack([np.linalg.lstsq(p.A[i], p.b[i], rcond=None)[0] for i in range(p.n)])
    z = auxiliary_from_coupled(p, g, X)
    assert np.abs(z).max() <= 1e-10


def test_auxiliary_z_two_agents():
    p0 = generate_clec(1, 2, 1, 1, 1.0)
    r = 0.75
    p = ClecProblem(n=2, d=1, q=1, mu=1.0, Q=p0.Q, c=p0.c, A=np.ones((2, 1, 1)), b=np.zeros((2, 1)),
                    witness=np.zeros(1))
    z = auxiliary_from_coupled(p, build_graph(GraphSpec("path", 2)), np.array([[r], [-r]]))
    np.testing.assert_allclose(z[:, 0], [-r / 2, r / 2], atol=1e-15)


def test_auxiliary_z_rejects_infeasible():
    p, g = instance(22, coupled=True)
    with pytest.raises(NotInRange):
        auxiliary_from_coupled(p, g, np.tile(p.witness, (p.n, 1)) + 1.0)


@pytest.mark.parametrize("seed", range(25))
def test_reformulation_round_trip(seed):
    p, g = instance(seed, coupled=True)
    rng = np.random.default_rng(seed)
    X = coupled_feasible_point(p, rng)
    z = auxiliary_from_coupled(p, g, X)
    assert np.linalg.norm(p.agent_residuals(X) + laplacian(g) @ z) <= 1e-9
    assert reformulation_holds(X, z, p, g)
    w = rng.standard_normal(p.q)
    assert reformulation_holds(X, z + w, p, g)
    bad = X.copy()
    bad[0] += np.linalg.lstsq(p.A[0], np.ones(p.q), rcond=None)[0]
    assert not reformulation_holds(bad, z, p, g)


@pytest.mark.parametrize("seed", range(25))
def test_reformulated_solution_satisfies_coupled_sum(seed):
    p, g = instance(seed, coupled=True)
    rng = np.random.default_rng(seed + 1000)
    Z = rng.standard_normal((p.n, p.q))
    target = p.b - laplacian(g) @ Z
    X = solve_local(p, target)
    assert np.linalg.norm(p.agent_residuals(X) + laplacian(g) @ Z) <= 1e-12
    # coupled sum by an independent loop over agents
    total = sum(p.A[i] @ X[i] - p.b[i] for i in range(p.n))
    assert np.linalg.norm(total) <= 1e-10
