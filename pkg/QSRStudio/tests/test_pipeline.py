import os
import sys

import numpy as np
import pytest

# Add the project root to the Python path
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..', '..')))

from QSRStudio.feasibility import SolverSettings
from QSRStudio.messenger import NeighborPayload
from QSRStudio.model import (ControllerSet, MessengerRecord, SequenceError, SubsystemDynamics, network_from_dict,
                             supply_from_entry, SupplyEntry, subsystem_from_dict)
from QSRStudio.pipeline import (AgentState, Channel, CompositionError, RunMode, StepStatus, SubsystemAgent, load_report,
                                network_hash, route, run_analysis, run_compositional, run_switched_synthesis,
                                run_synthesis, save_report, verify_report)
from QSRStudio.sim import load_scenario, simulate
from QSRStudio.tests.common import data_file, load_data


def _net(name):
    return network_from_dict(load_data("fixtures", name))


def _addition(name, net):
    add = load_data("fixtures", name)
    sub = subsystem_from_dict(add["subsystem"])
    coupling = {(e["to"], e["from"]): e["H"] for e in add["coupling"]}
    supply = supply_from_entry(SupplyEntry(subsystem=net.size, **add["supply"]), sub.dims)
    return sub, coupling, supply


def _agents(net):
    return {i: SubsystemAgent.from_network(net, i, SolverSettings()) for i in range(net.size)}


def _certify(agent, elimination=None):
    n, l = agent.n, agent.modes[0].dims.l
    agent.state = AgentState(record=MessengerRecord(M=np.eye(n + l), P=np.eye(n)), elimination=elimination or {})


@pytest.fixture(scope="module")
def decoupled_report():
    net = _net("decoupled_passive.json")
    return net, run_analysis(net)


def test_channel_round_trip_counts_payloads():
    """Tests that payloads survive the JSON channel and are counted."""
    channel = Channel()
    payload = NeighborPayload(sender=3, M=[[2.0, 0.5], [0.5, 1.0]], P=[[1.0]], coupling=[[[0.1]]],
                              actuation=[[[1.0]]], elimination={1: [[0.25]]})
    received = channel.transmit(payload)
    assert channel.sent == 1
    assert received.sender == 3
    assert np.allclose(received.M, payload.M)
    assert np.allclose(received.elimination[1], [[0.25]])

def test_agent_publishes_products_only():
    """Tests that a payload carries P B1 H and P B3, not the raw dynamics."""
    net = _net("t3_passive.json")
    agents = _agents(net)
    agent = agents[1]
    agent.state = AgentState(record=MessengerRecord(M=[[1.0, 0.0], [0.0, 0.0]], P=[[0.5]], structured=True))
    payload = agent.publish(receiver=2, receiver_n=1, adjacent=True)
    assert np.allclose(payload.coupling[0], [[-0.05]])
    assert np.allclose(payload.actuation[0], [[0.5]])
    assert payload.structured

def test_publish_without_certificate_fails():
    """Tests that an unprocessed agent has nothing to send."""
    agents = _agents(_net("t3_passive.json"))
    with pytest.raises(SequenceError):
        agents[0].publish(receiver=1, receiver_n=1, adjacent=True)

def test_route_adds_fill_senders():
    """Tests that a sender reached only through an earlier neighbor is routed as non-adjacent."""
    net = _net("t3_passive.json").with_sequence([1, 0, 2])
    agents = _agents(net)
    _certify(agents[1])
    _certify(agents[0], elimination={1: np.array([[0.3], [0.1]])})
    payloads = route(net, agents, [1, 0], 2, Channel())
    assert [p.sender for p in payloads] == [1, 0]
    assert [p.adjacent for p in payloads] == [True, False]

def test_route_rejects_fill_in_switched_networks():
    """Tests that a switched network refuses a sequence that needs fill."""
    net = _net("microgrid.json").with_sequence([0, 1, 2])
    agents = _agents(net)
    _certify(agents[0])
    _certify(agents[1], elimination={0: np.ones((4, 4))})
    with pytest.raises(SequenceError):
        route(net, agents, [0, 1], 2, Channel())

def test_route_accepts_fill_free_switched_sequence():
    """Tests that the star centre in the middle of the sequence needs no fill."""
    net = _net("microgrid.json")
    agents = _agents(net)
    _certify(agents[1])
    _certify(agents[0], elimination={1: np.ones((4, 4))})
    payloads = route(net, agents, [1, 0], 2, Channel())
    assert [p.sender for p in payloads] == [0]

def test_analysis_certifies_decoupled_network(decoupled_report):
    """Tests that two stable passive nodes are certified by analysis alone."""
    net, report = decoupled_report
    assert report.certified
    assert [s.status for s in report.steps] == [StepStatus.ANALYSIS_FEASIBLE] * 2
    assert report.gains.gains == {}
    assert report.network_hash == network_hash(net)
    assert all(check.verdict for check in verify_report(net, report))

def test_analysis_stops_at_first_uncertified_step():
    """Tests that T3 analysis fails at Sigma1 and skips the rest."""
    report = run_analysis(_net("t3_passive.json"))
    assert not report.certified
    assert report.steps[0].status == StepStatus.INFEASIBLE
    assert [s.status for s in report.steps[1:]] == [StepStatus.SKIPPED] * 2
    assert "Sigma1" in report.detail

def test_synthesis_of_scalar_plant():
    """Tests that synthesis designs a stabilizing self gain and passes the network check."""
    net = _net("scalar_plant.json")
    report = run_synthesis(net, verify=True)
    assert report.certified
    assert report.steps[0].status == StepStatus.SYNTHESIZED
    assert report.steps[0].verified is True
    assert report.gains.get(0, 0)[0, 0] < -1.0

def test_switched_synthesis_covers_every_mode():
    """Tests that a switched node is certified with one storage matrix over both of its modes."""
    data = load_data("fixtures", "decoupled_passive.json")
    data["subsystems"][0] = {"name": "left", "modes": [
        {"A": [[-1]], "B1": [[1]], "B2": [[1]], "B3": [[1]], "C": [[1]]},
        {"A": [[-3]], "B1": [[1]], "B2": [[1]], "B3": [[1]], "C": [[1]]}]}
    net = network_from_dict(data)
    report = run_switched_synthesis(net, verify=True)
    assert report.mode == RunMode.SWITCHED
    assert report.certified
    assert report.steps[0].combinations == 2
    assert all(s.verified for s in report.steps)

def test_report_save_and_load(tmp_path, decoupled_report):
    """Tests that a saved report reloads with its records and verdict."""
    _, report = decoupled_report
    path = str(tmp_path / "report.json")
    save_report(report, path)
    again = load_report(path)
    assert again.certified
    assert again.sequence == report.sequence
    for i in (0, 1):
        assert np.allclose(again.step_for(i).P, report.step_for(i).P)
        assert again.step_for(i).structured

def test_compose_disconnected_node(decoupled_report):
    """Tests that a node with no coupling joins a certified network by analysis."""
    net, report = decoupled_report
    sub, coupling, supply = _addition("disconnected_passive.json", net)
    ext, out = run_compositional(net, report, sub, coupling, supply, net_hash=network_hash(net))
    assert ext.size == 3
    assert out.certified
    assert out.sequence == [0, 1, 2]
    assert out.steps[2].status == StepStatus.ANALYSIS_FEASIBLE
    assert out.steps[2].senders == []
    assert out.network_hash == network_hash(ext)
    assert all(check.verdict for check in verify_report(ext, out))

def test_compose_guards(decoupled_report):
    """Tests the uncertified-base, hash and duplicate-name guards."""
    net, report = decoupled_report
    sub, coupling, supply = _addition("disconnected_passive.json", net)
    with pytest.raises(CompositionError):
        run_compositional(net, report.copy(update={"certified": False}), sub, coupling, supply)
    with pytest.raises(CompositionError):
        run_compositional(net, report, sub, coupling, supply, net_hash="sha256:0000")
    twin = SubsystemDynamics(name="left", A=[[-1]], B1=[[1]], B2=[[1]], B3=[[1]], C=[[1]])
    with pytest.raises(CompositionError):
        run_compositional(net, report, twin, {}, supply)

@pytest.mark.slow
def test_synthesis_of_t3_chain():
    """Tests the T3 run: gains at Sigma1 and Sigma2, analysis suffices at Sigma3."""
    net = _net("t3_passive.json")
    report = run_synthesis(net, verify=True)
    assert report.certified
    assert [s.status for s in report.steps] == [StepStatus.SYNTHESIZED, StepStatus.SYNTHESIZED,
                                                StepStatus.ANALYSIS_FEASIBLE]
    assert all(s.verified for s in report.steps)
    assert all(2 not in key for key in report.gains.gains)
    assert all(check.verdict for check in verify_report(net, report))

@pytest.mark.slow
def test_compose_sigma4_leaves_earlier_steps_alone():
    """Tests that joining Sigma4 reuses the T3 records and solves only at the new node."""
    net = _net("t3_passive.json")
    base = run_synthesis(net)
    sub, coupling, supply = _addition("sigma4.json", net)
    ext, out = run_compositional(net, base, sub, coupling, supply)
    assert ext.size == 4
    assert len(out.steps) == 4
    for before, after in zip(base.steps, out.steps[:3]):
        assert after.status == before.status
        assert np.allclose(after.M, before.M)
    assert out.steps[3].senders[:2] == [0, 1]

@pytest.mark.slow
@pytest.mark.parametrize("sequence", [[0, 1, 2, 3], [2, 1, 0, 3], [2, 3, 0, 1]])
def test_synthesis_of_t4_in_every_sequence(sequence):
    """Tests that T4 is certified and passes the network check in each of the three orders."""
    net = _net("t4_passive.json").with_sequence(sequence)
    report = run_synthesis(net, verify=True)
    assert report.certified
    assert report.sequence == sequence
    assert all(s.verified for s in report.steps)
    assert all(check.verdict for check in verify_report(net, report))
    if sequence == [2, 1, 0, 3]:
        for key in ((1, 2), (2, 1)):
            K = report.gains.get(*key)
            assert K is None or not np.any(K)
    if sequence == [2, 3, 0, 1]:
        assert 2 not in report.step_for(3).senders

@pytest.fixture(scope="module")
def t4_certified():
    net = _net("t4_passive.json")
    return net, run_synthesis(net)

@pytest.mark.slow
def test_t4_audit_over_disturbance_seeds(t4_certified):
    """Tests that the T4 closed loop stays dissipative for 50 disturbance draws."""
    net, report = t4_certified
    assert report.certified
    sc = load_scenario(data_file("scenarios", "t4_disturbance.json"))
    for seed in range(50):
        tr, audit = simulate(net, report, sc.copy(update={"seed": seed}))
        assert not tr.divergent
        assert audit.verdict, (seed, audit.min_slack)

@pytest.mark.slow
def test_t4_audit_fails_with_flipped_gain(t4_certified):
    """Tests that negating K_11 breaks the certified loop in simulation and in the network check."""
    net, report = t4_certified
    K = report.gains.get(0, 0)
    assert K is not None
    flipped = report.copy(update={"gains": ControllerSet(gains={**report.gains.gains, (0, 0): -K})})
    sc = load_scenario(data_file("scenarios", "t4_disturbance.json"))
    _, audit = simulate(net, flipped, sc)
    assert not audit.verdict
    assert not all(check.verdict for check in verify_report(net, flipped))

@pytest.mark.slow
def test_robust_t4_tolerates_sampled_perturbations():
    """Tests that a T4 certificate for ||dA_i|| < 0.1 holds for sampled block perturbations of norm 0.095."""
    net = _net("t4_passive.json")
    report = run_synthesis(net, SolverSettings(robust_eps={i: 0.1 for i in range(net.size)}))
    assert report.certified
    rng = np.random.default_rng(5)
    for _ in range(100):
        perturbed = []
        for sub in net.subsystems:
            dA = rng.standard_normal(sub.A.shape)
            perturbed.append(sub.copy(update={"A": sub.A + 0.095 * dA / np.linalg.norm(dA, 2)}))
        checks = verify_report(net.copy(update={"subsystems": perturbed}), report)
        assert all(check.verdict for check in checks)

def _random_network(rng):
    subsystems, coupling = [], []
    for i in range(3):
        n = int(rng.integers(1, 3))
        subsystems.append({"name": f"N{i}", "A": rng.standard_normal((n, n)).tolist(),
                           "B1": rng.standard_normal((n, 1)).tolist(), "B2": rng.standard_normal((n, 1)).tolist(),
                           "B3": rng.standard_normal((n, 1)).tolist(), "C": rng.standard_normal((1, n)).tolist()})
    for i in range(3):
        for j in range(3):
            if i == j or rng.random() < 0.6:
                coupling.append({"from": j, "to": i, "H": [[float(0.5 * rng.standard_normal())]]})
    supplies = [{"subsystem": i, "preset": "passive"} for i in range(3)]
    return network_from_dict({"subsystems": subsystems, "coupling": coupling, "supplies": supplies})

@pytest.mark.slow
def test_certified_random_networks_pass_network_check():
    """Tests that every certificate on random networks is confirmed by the centralized check."""
    rng = np.random.default_rng(99)
    certified = 0
    for _ in range(20):
        net = _random_network(rng)
        report = run_synthesis(net)
        if not report.certified:
            continue
        certified += 1
        assert all(check.verdict for check in verify_report(net, report))
    assert certified > 0

@pytest.mark.slow
def test_microgrid_plug_in_and_out():
    """Tests switched synthesis of the microgrid, per-mode network checks and the plug scenario audit."""
    net = _net("microgrid.json")
    report = run_switched_synthesis(net, verify=True)
    assert report.certified, report.detail
    assert all(s.verified for s in report.steps)
    gammas = report.gammas()
    assert sorted(gammas) == [0, 1, 2]
    assert all(0 < g <= 10.0 for g in gammas.values())
    checks = verify_report(net, report)
    assert len(checks) == 2
    assert all(check.verdict for check in checks)
    tr, audit = simulate(net, report, load_scenario(data_file("scenarios", "microgrid_plug.json")))
    assert not tr.divergent
    assert audit.verdict
