import copy
import socket
import threading

import numpy as np
import pytest
import torch

from eqhamnet.core.exceptions import CommunicationError, DivergenceError, UsageError
from eqhamnet.core.transport import InProcessHub, TcpTransport
from eqhamnet.middleware.timing import PhaseTimer
from eqhamnet.models.partition import PartitionAssignment, PartitionMethod
from eqhamnet.models.structure import BasisSpec
from eqhamnet.network import layers
from eqhamnet.network.model import GraphView, ModelSettings
from eqhamnet.services import model_service
from eqhamnet.services.partition_service import compute_metrics, lownn_partition
from eqhamnet.services.runtime_service import (
    RankState,
    TransportReducer,
    build_comm_plan,
    distributed_forward,
    distributed_train,
    distributed_train_step,
    forward_rank,
    gather_timers,
    halo_exchange,
    run_world,
)
from eqhamnet.services.structure_service import build_graph
from eqhamnet.services.synthetic_service import DEFAULT_BASIS, SyntheticSpec, lattice_structure, toy_hamiltonian

DOUBLE = ModelSettings(l_max=2, embed_dim=4, num_layers=2, num_gaussians=8, r_cut=3.0, seed=0, precision="double")


def split(structure, graph, depth):
    return lownn_partition(structure, graph, depth, graph.r_cut)


def serial_blocks(graph, model):
    with torch.no_grad():
        return model_service.forward(graph, model).to_numpy()


def random_targets(graph, model, seed=0):
    pred = serial_blocks(graph, model)
    rng = np.random.default_rng(seed)
    return pred.with_blocks({key: rng.normal(size=value.shape) for key, value in pred.items()})


def sgd(learning_rate=0.05):
    return lambda model: model_service.Trainer(model, learning_rate, optimizer="sgd")


# Communication plans

def test_triangle_plan_three_ranks(triangle):
    plan = build_comm_plan(triangle, PartitionAssignment(3, np.array([0, 1, 2]), PartitionMethod.MINCUT))
    assert plan.sends_per_exchange() == 6
    assert plan.total_received() == 6
    rank = plan[0]
    assert rank.owned_nodes.tolist() == [0]
    assert rank.n_interior == 0
    assert rank.neighbors == [1, 2]
    assert rank.recv[1].slots.tolist() == [1] and rank.recv[2].slots.tolist() == [2]
    assert rank.source_global_ids().tolist() == [0, 1, 2]
    assert sorted(rank.edge_src_slot.tolist()) == [1, 2]
    assert rank.edge_dst_local.tolist() == [0, 0]


def test_plan_covers_every_edge(toy_lattice):
    _, structure, graph = toy_lattice
    assignment = split(structure, graph, 2)
    plan = build_comm_plan(graph, assignment)
    metrics = compute_metrics(graph, assignment)

    owned = np.concatenate([rank.owned_edges for rank in plan.ranks])
    assert sorted(owned.tolist()) == list(range(graph.n_edges))
    for rank in plan.ranks:
        table = rank.source_global_ids()
        assert np.array_equal(table[rank.edge_src_slot], graph.src[rank.owned_edges])
        assert np.array_equal(rank.owned_nodes[rank.edge_dst_local], graph.dst[rank.owned_edges])
        assert rank.n_remote == metrics.recv_volume[rank.rank]
        # boundary nodes sit at the tail of the local order
        exported = set()
        for idx in rank.send.values():
            exported.update(rank.owned_nodes[idx].tolist())
        assert set(rank.boundary_nodes.tolist()) == exported
    for p, rank in enumerate(plan.ranks):
        for q, idx in rank.send.items():
            assert np.array_equal(rank.owned_nodes[idx], plan[q].recv[p].global_ids)


def test_single_rank_plan_has_no_links(lattice):
    graph = build_graph(lattice, 1.05)
    plan = build_comm_plan(graph, PartitionAssignment(1, np.zeros(27), PartitionMethod.LOWNN))
    assert plan.sends_per_exchange() == 0
    assert plan[0].owned_nodes.tolist() == list(range(27))
    assert plan[0].n_remote == 0


def test_plan_rejects_foreign_assignment(triangle):
    with pytest.raises(UsageError):
        build_comm_plan(triangle, PartitionAssignment(2, np.array([0, 1]), PartitionMethod.LOWNN))


# Transport

def test_receive_stashes_other_tags():
    hub = InProcessHub(2, timeout=1.0)
    t0, t1 = hub.transports()
    t0.post_send(1, 5, b"first")
    t0.post_send(1, 7, b"second")
    assert t1.post_recv(0, 7) == b"second"
    assert t1.post_recv(0, 5) == b"first"
    assert t0.stats["send"] == 2 and t1.stats["recv"] == 2
    assert t0.bytes_to[1] == 11


def test_receive_times_out():
    hub = InProcessHub(2, timeout=0.05)
    with pytest.raises(CommunicationError):
        hub.transport(0).post_recv(1, 3)


def test_unknown_peer_rejected():
    with pytest.raises(UsageError):
        InProcessHub(2).transport(0).post_send(5, 0, b"")


def test_allgather_in_rank_order():
    results = run_world(3, lambda t: t.allgather(bytes([t.rank * 10])))
    assert all(r == [b"\x00", b"\n", b"\x14"] for r in results)


def test_reducer_sums_in_rank_order():
    results = run_world(3, lambda t: TransportReducer(t).sum_floats([t.rank + 0.5, 1.0]))
    for total in results:
        assert total.tolist() == [4.5, 3.0]


def test_gathered_timers():
    def program(transport):
        timer = PhaseTimer(rank=transport.rank)
        timer.add(0, "compute", float(transport.rank + 1))
        return gather_timers(transport, timer)

    for timers in run_world(2, program):
        assert [t.totals() for t in timers] == [{(0, "compute"): 1.0}, {(0, "compute"): 2.0}]


def test_failed_rank_aborts_world():
    def program(transport):
        if transport.rank == 1:
            raise UsageError("rank 1 gives up")
        return transport.post_recv(1, 0)

    with pytest.raises(UsageError, match="gives up"):
        run_world(2, program, timeout=5.0)


def test_tcp_transport_mesh():
    with socket.socket() as listener:
        listener.bind(("127.0.0.1", 0))
        port = listener.getsockname()[1]
    results, errors = {}, []

    def run(rank):
        try:
            transport = TcpTransport(rank, 3, "127.0.0.1", port, timeout=10.0)
            try:
                results[rank] = transport.allgather(f"rank{rank}".encode())
                transport.barrier()
            finally:
                transport.close()
        except Exception as e:  # surfaced below
            errors.append(e)

    threads = [threading.Thread(target=run, args=(rank,)) for rank in range(3)]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join(timeout=30)
    assert not errors
    assert all(results[rank] == [b"rank0", b"rank1", b"rank2"] for rank in range(3))


# Halo exchange

def test_halo_exchange_shape_check(triangle):
    plan = build_comm_plan(triangle, PartitionAssignment(3, np.array([0, 1, 2]), PartitionMethod.MINCUT))
    state = RankState(0, plan[0], InProcessHub(3).transport(0), PhaseTimer())
    with pytest.raises(UsageError):
        halo_exchange(torch.zeros(2, 9, 4), state)


def test_halo_exchange_rows_and_gradients(triangle):
    plan = build_comm_plan(triangle, PartitionAssignment(3, np.array([0, 1, 2]), PartitionMethod.MINCUT))
    values = torch.arange(3, dtype=torch.float64).reshape(3, 1, 1) + 1.0

    def program(transport):
        state = RankState(transport.rank, plan[transport.rank], transport, PhaseTimer(rank=transport.rank))
        local = values[transport.rank:transport.rank + 1].clone().requires_grad_(True)
        table = halo_exchange(local, state)
        # every rank weights the row it received from peer p by (p + 1)
        weights = torch.as_tensor([1.0] + [p + 1.0 for p in sorted(state.plan.recv)], dtype=torch.float64)
        (table.reshape(-1) * weights).sum().backward()
        return table.detach().reshape(-1).tolist(), local.grad.item(), dict(transport.stats)

    results = run_world(3, program)
    for rank, (table, grad, stats) in enumerate(results):
        assert table[0] == rank + 1.0
        assert sorted(table[1:]) == sorted(v + 1.0 for v in range(3) if v != rank)
        # own weight 1 plus (rank + 1) from each of the two readers
        assert grad == pytest.approx(1.0 + 2 * (rank + 1.0))
        assert stats["send"] == 4 and stats["recv"] == 4


# Distributed execution

@pytest.mark.parametrize("depth", [1, 2])
def test_distributed_forward_matches_serial(toy_lattice, basis, settings, depth):
    _, structure, graph = toy_lattice
    model = model_service.build_model(settings, basis)
    reports = distributed_forward(graph, model, split(structure, graph, depth))
    expected = serial_blocks(graph, model)
    blocks = reports[0].blocks
    assert len(blocks) == graph.n_nodes + graph.n_edges
    for key, value in expected.items():
        np.testing.assert_allclose(blocks[key], value, atol=1e-5, rtol=1e-5)
    for report in reports[1:]:
        assert report.parameter_hash == reports[0].parameter_hash


def test_forward_under_jitter(toy_lattice, basis, settings):
    _, structure, graph = toy_lattice
    model = model_service.build_model(settings, basis)
    reports = distributed_forward(graph, model, split(structure, graph, 2), jitter=0.001)
    expected = serial_blocks(graph, model)
    for key, value in expected.items():
        np.testing.assert_allclose(reports[0].blocks[key], value, atol=1e-5, rtol=1e-5)


def test_exchange_counts(toy_lattice, basis, settings):
    _, structure, graph = toy_lattice
    model = model_service.build_model(settings, basis)
    assignment = split(structure, graph, 2)
    plan = build_comm_plan(graph, assignment)
    reports = distributed_forward(graph, model, assignment)
    for report in reports:
        n_send = len(plan[report.rank].send)
        n_recv = len(plan[report.rank].recv)
        assert report.exchanges == 2 * settings.num_layers
        assert report.stats["send"] == 2 * settings.num_layers * n_send
        assert report.stats["recv"] == 2 * settings.num_layers * n_recv
        assert report.bytes_sent > 0


def test_single_rank_world_matches_serial(toy_lattice, basis, settings):
    _, _, graph = toy_lattice
    model = model_service.build_model(settings, basis)
    reports = distributed_forward(graph, model, PartitionAssignment(1, np.zeros(graph.n_nodes), PartitionMethod.LOWNN))
    expected = serial_blocks(graph, model)
    assert reports[0].exchanges == 2 * settings.num_layers
    assert reports[0].stats.get("send", 0) == 0
    for key, value in expected.items():
        np.testing.assert_allclose(reports[0].blocks[key], value, atol=1e-6)


def test_no_communication_inside_softmax(mocker, toy_lattice, basis, settings):
    _, structure, graph = toy_lattice
    model = model_service.build_model(settings, basis)
    plan = build_comm_plan(graph, split(structure, graph, 1))
    transports, violations, calls = {}, [], []
    original = layers.segment_softmax

    def watched(*args, **kwargs):
        rank = int(threading.current_thread().name.split("-")[1])
        before = sum(transports[rank].stats.values())
        out = original(*args, **kwargs)
        calls.append(rank)
        if sum(transports[rank].stats.values()) != before:
            violations.append(rank)
        return out

    mocker.patch("eqhamnet.network.layers.segment_softmax", side_effect=watched)
    replicas = [copy.deepcopy(model) for _ in range(2)]

    def program(transport):
        transports[transport.rank] = transport
        return forward_rank(transport, graph, replicas[transport.rank], plan)

    run_world(2, program)
    assert sorted(calls) == [0, 0, 1, 1]
    assert violations == []


def test_diverged_replica_detected(toy_lattice, basis, settings):
    _, structure, graph = toy_lattice
    model = model_service.build_model(settings, basis)
    plan = build_comm_plan(graph, split(structure, graph, 1))
    replicas = [copy.deepcopy(model) for _ in range(2)]
    with torch.no_grad():
        next(replicas[1].parameters()).add_(1e-3)
    with pytest.raises(DivergenceError):
        run_world(2, lambda t: forward_rank(t, graph, replicas[t.rank], plan))


# Distributed training

def test_training_step_matches_serial(toy_lattice, basis):
    _, structure, graph = toy_lattice
    serial = model_service.build_model(DOUBLE, basis)
    distributed = copy.deepcopy(serial)
    targets = random_targets(graph, serial)

    expected = sgd()(serial).step(graph, GraphView.from_graph(graph, serial), targets).loss
    assignment = split(structure, graph, 1)
    loss = distributed_train_step(graph, distributed, assignment,
                                  model_service.split_targets(targets, assignment), sgd())
    assert loss == pytest.approx(expected, rel=1e-10)
    for (name, a), b in zip(serial.state_dict().items(), distributed.state_dict().values()):
        np.testing.assert_allclose(b.numpy(), a.numpy(), atol=1e-10, err_msg=name)


def test_training_with_target_free_rank(toy_lattice, basis):
    _, structure, graph = toy_lattice
    serial = model_service.build_model(DOUBLE, basis)
    distributed = copy.deepcopy(serial)
    assignment = split(structure, graph, 1)
    full = random_targets(graph, serial, seed=4)
    # only rank 0 holds targets
    targets = full.subset([key for key in full.keys() if assignment.node_to_part[key[1]] == 0])

    trainer = sgd()(serial)
    history = trainer.fit(graph, GraphView.from_graph(graph, serial), targets, 2)
    reports = distributed_train(graph, distributed, assignment,
                                model_service.split_targets(targets, assignment), sgd(), num_steps=2)
    assert len(reports[1].history) == 2
    assert [r.loss for r in reports[0].history] == pytest.approx([r.loss for r in history], rel=1e-10)
    for a, b in zip(serial.parameters(), distributed.parameters()):
        np.testing.assert_allclose(b.detach().numpy(), a.detach().numpy(), atol=1e-10)


def test_symmetrize_is_serial_only(toy_lattice, basis, settings):
    _, structure, graph = toy_lattice
    model = model_service.build_model(settings, basis)
    assignment = split(structure, graph, 1)
    targets = model_service.split_targets(random_targets(graph, model), assignment)

    def factory(m):
        return model_service.Trainer(m, 1e-3, symmetrize_blocks=True)

    with pytest.raises(UsageError):
        distributed_train(graph, model, assignment, targets, factory, num_steps=1)


@pytest.mark.slow
def test_four_rank_toy_training(toy_lattice, basis, settings):
    spec, structure, graph = toy_lattice
    targets = model_service.prepare_targets(toy_hamiltonian(structure, graph, basis, spec))
    model = model_service.build_model(settings, basis)
    assignment = split(structure, graph, 2)

    def factory(m):
        return model_service.Trainer(m, 1e-2)

    reports = distributed_train(graph, model, assignment, model_service.split_targets(targets, assignment),
                                factory, num_steps=30)
    losses = [r.loss for r in reports[0].history]
    assert losses[-1] < losses[0]
    assert len({r.parameter_hash for r in reports}) == 1
    assert reports[0].stats["collective_send"] > 0


@pytest.mark.slow
def test_toy_training_converges_identically_on_four_ranks():
    spec = SyntheticSpec()
    structure = lattice_structure(spec)
    assert structure.n_atoms == 50
    graph = build_graph(structure, 3.0)
    basis = BasisSpec.from_mapping(DEFAULT_BASIS)
    targets = model_service.prepare_targets(toy_hamiltonian(structure, graph, basis, spec))
    settings = ModelSettings(l_max=2, embed_dim=8, num_layers=2, num_gaussians=16, r_cut=3.0, seed=0,
                             precision="double")
    serial = model_service.build_model(settings, basis)
    distributed = copy.deepcopy(serial)

    def factory(model):
        # no plateau decay, so both runs follow the same learning rate
        return model_service.Trainer(model, 1e-2, patience=10 ** 6)

    history = factory(serial).fit(graph, GraphView.from_graph(graph, serial), targets, 500)
    losses = [r.loss for r in history]
    assert min(losses) <= losses[0] / 10

    assignment = split(structure, graph, 2)
    reports = distributed_train(graph, distributed, assignment, model_service.split_targets(targets, assignment),
                                factory, num_steps=500, timeout=120.0)
    np.testing.assert_allclose([r.loss for r in reports[0].history], losses, rtol=1e-6)
    drift = max(float((a - b).abs().max()) for a, b in zip(serial.parameters(), distributed.parameters()))
    assert drift <= 1e-5


@pytest.mark.slow
def test_eight_ranks_on_two_hundred_atoms(basis, settings):
    structure = lattice_structure(SyntheticSpec(shape=(5, 5, 8), spacing=1.6, species=("H", "O"), seed=2))
    graph = build_graph(structure, 2.5)
    model = model_service.build_model(settings, basis)
    assignment = split(structure, graph, 3)
    plan = build_comm_plan(graph, assignment)
    reports = distributed_forward(graph, model, assignment)
    expected = serial_blocks(graph, model)
    for key, value in expected.items():
        np.testing.assert_allclose(reports[0].blocks[key], value, atol=1e-5, rtol=1e-5)
    for report in reports:
        assert report.stats["send"] == 2 * settings.num_layers * len(plan[report.rank].send)
