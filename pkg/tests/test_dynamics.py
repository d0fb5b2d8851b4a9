import numpy as np
import pytest

from singlet_feedback.dynamics import (
    DegenerateKernelError,
    StiffnessError,
    appendix_oracle,
    check_density_matrix,
    evolve,
    partial_trace_keep_first,
    run_trajectories,
    state_fidelity,
    steady_state,
    steady_state_by_evolution,
)
from singlet_feedback.model import (
    FeedbackStrategy,
    Generator,
    SystemParams,
    basis_state,
    build_cavity_me,
    build_effective_me,
    build_feedback_me,
    build_full_me,
    projector,
    singlet_state,
    vacuum_product,
)
from singlet_feedback.opalg import LindbladTerm

from conftest import random_density

W = 0.3 * np.pi
RHO111 = projector(basis_state(1, 1, 1))


def nonlocal_gen(ratio=0.5, w=W, eta=1.0):
    p = SystemParams.effective(ratio, omega_fb=w, eta=eta)
    return build_feedback_me(p, FeedbackStrategy("nonlocal", w, eta))


def test_zero_generator_is_static(rng):
    rho = random_density(rng, 4)
    res = evolve(Generator(np.zeros((4, 4))), rho, 5.0, n_points=11)
    np.testing.assert_allclose(res.final_rho, rho, atol=1e-14)


def test_singlet_stays_put():
    gen = build_effective_me(SystemParams.effective(0.5))
    res = evolve(gen, projector(singlet_state()), 50.0, n_points=51)
    assert np.all(np.abs(res.fidelities - 1.0) < 1e-8)


def test_two_level_decay_against_exponential():
    lower = np.array([[0, 1], [0, 0]], dtype=complex)  # |1> -> |0>
    gen = Generator(np.zeros((2, 2)), [LindbladTerm(0.7, lower)])
    rho0 = np.diag([0.0, 1.0]).astype(complex)
    res = evolve(gen, rho0, 4.0, n_points=9, observables={"P1": np.diag([0, 1]).astype(complex)}, target=None)
    np.testing.assert_allclose(res.expectations["P1"], np.exp(-0.7 * res.times), atol=1e-8)


def test_rk_matches_exact_propagator():
    gen = nonlocal_gen()
    rk = evolve(gen, RHO111, 60.0, n_points=31)
    ex = evolve(gen, RHO111, 60.0, n_points=31, method="expm")
    np.testing.assert_allclose(rk.fidelities, ex.fidelities, atol=1e-7)


def test_evolve_hygiene():
    res = evolve(nonlocal_gen(), RHO111, 100.0, n_points=51)
    assert np.max(np.abs(res.traces - 1)) < 1e-6
    assert np.min(res.min_eigenvalues) > -1e-7
    assert np.all((res.fidelities >= 0) & (res.fidelities <= 1 + 1e-9))


def test_evolve_rejects_bad_input():
    gen = nonlocal_gen()
    with pytest.raises(ValueError):
        evolve(gen, 2 * RHO111, 1.0)
    with pytest.raises(ValueError):
        evolve(gen, RHO111, -1.0)
    with pytest.raises(ValueError):
        check_density_matrix(np.diag([1.5, -0.5]))


def test_stiffness_reported():
    gen = Generator(np.diag([0.0, 1e9]), [LindbladTerm(1e-3, np.array([[0, 1], [0, 0]]))])
    with pytest.raises(StiffnessError, match="ratio"):
        evolve(gen, np.diag([0.5, 0.5]).astype(complex), 1.0, max_steps=50)


def test_steady_state_feedback_unique():
    rho = steady_state(nonlocal_gen())
    assert state_fidelity(singlet_state(), rho) >= 0.999
    assert np.linalg.eigvalsh(rho)[0] >= -1e-9
    L = nonlocal_gen().liouvillian()
    from singlet_feedback.opalg import vectorize

    assert np.linalg.norm(L.matrix @ vectorize(rho)) < 1e-8


def test_steady_state_degenerate_without_feedback():
    with pytest.raises(DegenerateKernelError) as info:
        steady_state(build_effective_me(SystemParams.effective(0.5)))
    assert info.value.kernel_dim > 1


@pytest.mark.parametrize("ratio,w", [(0.0, W), (0.5, 0.0)])
def test_steady_state_degenerate_on_boundary(ratio, w):
    with pytest.raises(DegenerateKernelError):
        steady_state(nonlocal_gen(ratio, w))


def test_sparse_and_dense_steady_state_agree():
    gen = nonlocal_gen(0.8, 1.0)
    a = steady_state(gen, method="dense")
    b = steady_state(gen, method="sparse")
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_relaxation_agrees_with_kernel():
    gen = nonlocal_gen(1.0, 0.5 * np.pi)
    relaxed = steady_state_by_evolution(gen, 3000.0, tol=1e-9, rtol=1e-11, atol=1e-13)
    assert relaxed.converged
    trace_dist = 0.5 * np.abs(np.linalg.eigvalsh(relaxed.rho - steady_state(gen))).sum()
    assert trace_dist < 1e-6


def test_relaxation_to_ground_state():
    lower = np.array([[0, 1], [0, 0]], dtype=complex)
    relaxed = steady_state_by_evolution(Generator(np.zeros((2, 2)), [LindbladTerm(1.0, lower)]), 50.0, tol=1e-9)
    np.testing.assert_allclose(relaxed.rho, np.diag([1, 0]), atol=1e-8)


def test_relaxation_flags_non_convergence():
    relaxed = steady_state_by_evolution(nonlocal_gen(), 1.0, tol=1e-12, n_chunks=2)
    assert not relaxed.converged and relaxed.residual > 1e-12


def test_partial_trace_of_product():
    a, b = random_density(np.random.default_rng(0), 3), random_density(np.random.default_rng(1), 2)
    np.testing.assert_allclose(partial_trace_keep_first(np.kron(a, b), 3), a, atol=1e-14)


def test_cavity_steady_state_sparse():
    p = SystemParams(G=1.0, kappa=20.0, Omega=0.025, omega_fb=W, n_max=1)
    rho = steady_state(build_cavity_me(p, FeedbackStrategy("nonlocal", W)))
    assert state_fidelity(singlet_state(), rho) > 0.999


def test_full_model_truncations_agree_on_short_horizon():
    p = SystemParams(G=1.0, kappa=5.0, Omega=0.1, delta_big=20.0, omega_fb=W, n_max=1)
    s = FeedbackStrategy("nonlocal", W)
    out = []
    for tr in ("mode", "total"):
        gen = build_full_me(p, s, tr)
        psi = vacuum_product(basis_state(1, 1, 1), gen.mode_dim)
        out.append(evolve(gen, np.outer(psi, psi.conj()), 20.0, n_points=11))
    np.testing.assert_allclose(out[0].fidelities, out[1].fidelities, atol=1e-4)
    assert np.max(np.abs(out[0].traces - 1)) < 1e-8


def test_trajectories_no_jumps_from_singlet():
    ens = run_trajectories(SystemParams.effective(0.5, omega_fb=W), FeedbackStrategy("nonlocal", W),
                           singlet_state(), 20.0, 1, seed=3)
    assert ens.jump_counts.tolist() == [0]
    np.testing.assert_allclose(ens.mean_fidelity, 1.0, atol=1e-12)


def test_trajectories_deterministic_and_thread_independent():
    p = SystemParams.effective(0.5, omega_fb=W)
    s = FeedbackStrategy("nonlocal", W)
    a = run_trajectories(p, s, basis_state(1, 1, 1), 30.0, 40, seed=7, chunk_size=16)
    b = run_trajectories(p, s, basis_state(1, 1, 1), 30.0, 40, seed=7, chunk_size=16, threads=3)
    assert np.array_equal(a.jump_counts, b.jump_counts)
    assert np.array_equal(a.mean_fidelity, b.mean_fidelity)
    c = run_trajectories(p, s, basis_state(1, 1, 1), 30.0, 40, seed=8, chunk_size=16)
    assert not np.array_equal(a.jump_counts, c.jump_counts)


def test_trajectories_match_master_equation():
    p = SystemParams.effective(0.5, omega_fb=W)
    s = FeedbackStrategy("local", 0.5 * np.pi)
    n = 400
    ens = run_trajectories(p, s, basis_state(1, 1, 1), 40.0, n, seed=11, n_points=21)
    me = evolve(build_feedback_me(p, s), RHO111, 40.0, n_points=21, method="expm")
    assert np.max(np.abs(ens.mean_population - me.fidelities**2)) < 3 / np.sqrt(n)


def test_appendix_oracle_trivial():
    _, _, dev = appendix_oracle(0.0, 0.0, 0.5, 0.5, 100.0, 10.0, n_points=11)
    assert dev == 0.0


def test_appendix_oracle_agreement():
    lam, delta = 1.0, 100.0
    full, eff, dev = appendix_oracle(lam, lam, 0.5, 0.5, delta, 10 * delta / lam**2)
    assert dev < 5 * lam / delta
    np.testing.assert_allclose(full.traces, 1.0, atol=1e-9)
