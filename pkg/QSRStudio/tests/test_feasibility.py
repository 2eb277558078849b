import os
import sys

import numpy as np
import pytest
from pydantic import ValidationError

# Add the project root to the Python path
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..', '..')))

from QSRStudio.feasibility import (CvxpyBackend, NumericalFailure, Objective, Regime, SolverSettings, Status,
                                   StepProblem, StepSolution, evaluate, recover_gain, solve_analysis_step,
                                   solve_compositional_step, solve_design_step, solve_switched_step,
                                   solve_synthesis_step, strictness_eps)
from QSRStudio.messenger import IncomingBlock, NeighborPayload
from QSRStudio.model import DimensionError
from QSRStudio.model import SubsystemDynamics, network_from_dict, supply_preset
from QSRStudio.tests.common import load_data


def _scalar(a, b1=1.0):
    return SubsystemDynamics(A=[[a]], B1=[[b1]], B2=[[1]], B3=[[1]], C=[[1]])


def _problem(a, supply="passive", b1=1.0, **extra):
    return StepProblem(modes=[_scalar(a, b1)], supply=supply_preset(supply), **extra)


def test_settings_validation():
    """Tests that nonpositive tolerances and negative weights are refused."""
    with pytest.raises(ValidationError):
        SolverSettings(eps_rel=0.0)
    with pytest.raises(ValidationError):
        SolverSettings(gain_weight=-1.0)
    with pytest.raises(ValidationError):
        SolverSettings(robust_eps={0: -0.1})

def test_strictness_eps_scales_with_data():
    """Tests eps = eps_rel (1 + largest data entry)."""
    problem = _problem(-4.0)
    assert strictness_eps(problem, SolverSettings()) == pytest.approx(1e-6 * 5.0)

def test_missing_solver_is_a_numerical_failure():
    """Tests that a backend without any installed solver cannot be built."""
    with pytest.raises(NumericalFailure):
        CvxpyBackend("NO_SUCH_SOLVER", None)

def test_recover_gain_checks_range():
    """Tests exact recovery inside the range of P B3 and the residual check outside it."""
    PB3 = np.array([[1.0], [0.0]])
    K, exact = recover_gain(PB3, np.array([[2.0, 3.0], [0.0, 0.0]]), 1e-6)
    assert exact and np.allclose(K, [[2.0, 3.0]])
    _, exact = recover_gain(PB3, np.array([[2.0, 3.0], [1.0, 0.0]]), 1e-6)
    assert not exact

def test_analysis_of_stable_passive_scalar():
    """Tests that x' = -x + w, y = x is certified with P = 1/2 and no gains."""
    outcome = solve_analysis_step(_problem(-1.0))
    assert outcome.feasible
    assert outcome.regime == Regime.ANALYSIS
    assert outcome.record.structured
    assert outcome.solution.P[0, 0] == pytest.approx(0.5, abs=1e-6)
    assert outcome.record.M[0, 0] == pytest.approx(1.0, abs=1e-5)
    assert outcome.min_margin >= 0.5 * strictness_eps(_problem(-1.0), SolverSettings())

def test_analysis_of_unstable_plant_is_infeasible():
    """Tests that analysis cannot certify x' = x + w + u without a gain."""
    outcome = solve_analysis_step(_problem(1.0, b1=0.0))
    assert outcome.status == Status.INFEASIBLE
    assert outcome.record is None

def test_synthesis_stabilizes_scalar_plant():
    """Tests that synthesis finds K < -1 and reaches the margin target on the scalar plant."""
    settings = SolverSettings()
    outcome = solve_synthesis_step(_problem(1.0, b1=0.0), settings)
    assert outcome.feasible
    assert outcome.regime == Regime.JOINT
    K = outcome.solution.self_gain[0, 0]
    assert K < -1.0
    # cap = margin_target (1 + supply scale) = 0.25 * 1.5
    assert outcome.record.M[0, 0] == pytest.approx(0.375, abs=1e-3)
    assert K == pytest.approx(-1.375, abs=1e-3)

def test_synthesis_of_unreachable_unstable_state_is_infeasible():
    """Tests that no gain certifies a plant whose unstable state the actuator cannot reach."""
    net = network_from_dict(load_data("fixtures", "rank_deficient.json"))
    problem = StepProblem(modes=net.modes(0), supply=net.supplies[0])
    outcome = solve_synthesis_step(problem)
    assert not outcome.feasible
    assert outcome.status in (Status.INFEASIBLE, Status.RECOVERY_FAILURE)

def test_l2_gain_as_decision_variable():
    """Tests that the smallest L2 gain of 1/(s + 1) is found close to one."""
    outcome = solve_analysis_step(_problem(-1.0, supply="l2-free", b1=0.0))
    assert outcome.feasible
    assert outcome.record.gamma == pytest.approx(1.0, rel=1e-2)
    assert not outcome.record.structured

def test_robust_bound_tightens_the_margin():
    """Tests that ||dA|| < eps is certified only while 2 eps P stays below the state block."""
    loose = solve_analysis_step(_problem(-1.0, robust_eps=0.4))
    assert loose.feasible
    assert loose.record.margin is not None
    assert loose.record.M[0, 0] == pytest.approx(0.6, abs=1e-5)
    tight = solve_analysis_step(_problem(-1.0, robust_eps=1.2))
    assert not tight.feasible

def test_compositional_step_with_certified_neighbor():
    """Tests the join of Sigma3 behind Sigma2 with the published Sigma2 messenger."""
    payload = NeighborPayload(sender=1, M=[[0.375, 0.0], [0.0, 0.0]], P=[[0.5]], structured=True,
                              coupling=[[[-0.05]]], actuation=[[[0.5]]])
    problem = _problem(-1.0, index=2, self_coupling=[[0.2]],
                       incoming=[IncomingBlock(payload=payload, H_in=[[-0.7]])])
    outcome = solve_compositional_step(problem)
    assert outcome.feasible
    assert outcome.regime == Regime.ANALYSIS
    assert outcome.record.M[0, 0] == pytest.approx(0.8 - 0.16 / 0.375, abs=1e-5)
    assert 1 in outcome.elimination

def test_switched_step_common_energy_matrix():
    """Tests that two stable modes share one certificate over both combinations."""
    problem = StepProblem(modes=[_scalar(-1.0), _scalar(-2.0)], supply=supply_preset("passive"))
    outcome = solve_switched_step(problem)
    assert outcome.feasible
    assert outcome.combos == [(0,), (1,)]
    assert len(outcome.margins) == 2
    assert all(m > 0 for m in outcome.margins)

def _sigma2_payload():
    return NeighborPayload(sender=1, M=[[0.375, 0.0], [0.0, 0.0]], P=[[0.5]], structured=True,
                           coupling=[[[-0.05]]], actuation=[[[0.5]]])

def test_l2_level_is_monotone():
    """Tests that fixed L2 levels of 1/(s + 1) are certified exactly above the true gain of one."""
    verdicts = []
    for gamma in (0.5, 0.9, 1.1, 2.0, 5.0):
        problem = StepProblem(modes=[_scalar(-1.0, b1=0.0)], supply=supply_preset("L2", [gamma]))
        verdicts.append(solve_analysis_step(problem).feasible)
    assert verdicts == [False, False, True, True, True]

def test_evaluate_rejects_indefinite_energy_matrix():
    """Tests that a point with P <= 0 comes back as a numerical failure instead of raising."""
    outcome = evaluate(_problem(-1.0), SolverSettings(), StepSolution(P=[[-1.0]]))
    assert outcome.status == Status.NUMERICAL_FAILURE
    assert "positive definite" in outcome.detail
    outcome = evaluate(_problem(-1.0), SolverSettings(), StepSolution(P=[[float("nan")]]))
    assert outcome.status == Status.NUMERICAL_FAILURE

def test_min_trace_objective_keeps_the_smallest_energy_matrix():
    """Tests that the min-trace form certifies with trace(P) no larger than the margin form."""
    margin = solve_analysis_step(_problem(-2.0, supply="l2-free", b1=0.0))
    trace = solve_analysis_step(_problem(-2.0, supply="l2-free", b1=0.0), SolverSettings(objective=Objective.MIN_TRACE))
    assert margin.feasible and trace.feasible
    assert np.trace(trace.solution.P) <= np.trace(margin.solution.P) + 1e-6
    assert trace.min_margin >= 0.5 * strictness_eps(_problem(-2.0), SolverSettings())

def test_synthesis_tries_own_gain_before_coupling_gains():
    """Tests that a node whose own gain suffices designs no K_ij or K_ji towards its neighbor."""
    problem = _problem(1.0, b1=0.0, index=2, incoming=[IncomingBlock(payload=_sigma2_payload(), H_in=[[-0.7]])])
    outcome = solve_synthesis_step(problem)
    assert outcome.feasible
    assert outcome.solution.gains_out == {}
    assert outcome.solution.gains_in == {}
    assert outcome.solution.self_gain[0, 0] < -1.0
    assert "held at zero" in outcome.detail

def test_design_step_skips_analysis_for_free_l2_level():
    """Tests that an undecided L2 level is minimized together with the gains."""
    outcome = solve_design_step(_problem(-1.0, supply="l2-free", b1=0.0))
    assert outcome.feasible
    assert outcome.regime != Regime.ANALYSIS
    assert outcome.record.gamma < 1.0

def test_compositional_step_checks_neighbor_set():
    """Tests that a joined node coupled to a sender without a payload is refused."""
    block = IncomingBlock(payload=_sigma2_payload(), H_in=[[-0.7]])
    problem = _problem(-1.0, index=2, self_coupling=[[0.2]], incoming=[block], neighbors=[1])
    assert solve_compositional_step(problem).feasible
    with pytest.raises(DimensionError):
        solve_compositional_step(problem.copy(update={"neighbors": [0, 1]}))

def test_robust_certificate_holds_for_sampled_perturbations():
    """Tests that the certificate for ||dA|| < 0.4 still certifies a - 0.38 <= a + dA <= a + 0.38 with the same P."""
    certified = solve_analysis_step(_problem(-1.0, robust_eps=0.4))
    assert certified.feasible
    P = certified.solution.P
    rng = np.random.default_rng(17)
    for delta in rng.uniform(-0.38, 0.38, size=200):
        outcome = evaluate(_problem(-1.0 + delta), SolverSettings(), StepSolution(P=P))
        assert outcome.feasible, delta

@pytest.mark.slow
def test_invertible_actuation_is_always_synthesizable():
    """Tests that random nodes with invertible B3 and R >= 0 are certified by synthesis."""
    rng = np.random.default_rng(7)
    feasible = 0
    for _ in range(100):
        n = int(rng.integers(1, 4))
        B3 = np.eye(n) + 0.3 * rng.standard_normal((n, n))
        while abs(np.linalg.det(B3)) <= 0.1:
            B3 = np.eye(n) + 0.3 * rng.standard_normal((n, n))
        node = SubsystemDynamics(A=2.0 * rng.standard_normal((n, n)), B1=rng.standard_normal((n, 1)),
                                 B2=rng.standard_normal((n, 1)), B3=B3, C=rng.standard_normal((1, n)))
        problem = StepProblem(modes=[node], supply=supply_preset("L2", [1.0]),
                              self_coupling=[[0.5 * rng.standard_normal()]])
        feasible += solve_synthesis_step(problem).feasible
    assert feasible == 100
