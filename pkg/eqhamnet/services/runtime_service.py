"""Distributed execution: communication plans, halo exchanges and rank programs.

A rank owns the nodes its partition assigns to it and every edge whose destination it owns.
Before each node and each edge update the rank swaps boundary embeddings with its neighbors,
so a layer costs two exchanges. Gradients of received rows travel back along the same links.
"""

import copy
import json
import logging
import os
import subprocess
import sys
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from eqhamnet.core.exceptions import CommunicationError, DivergenceError, EqhamnetError, UsageError
from eqhamnet.core.transport import GRADIENT_TAG, MAX_TAG, InProcessHub, Transport
from eqhamnet.middleware.timing import PhaseTimer
from eqhamnet.models.blocks import BlockMatrix, blocks_from_bytes, blocks_to_bytes
from eqhamnet.models.comm_plan import CommPlan, RankPlan, RecvLayout
from eqhamnet.models.partition import PartitionAssignment
from eqhamnet.models.structure import AtomGraph
from eqhamnet.network.model import GraphView, HamiltonianModel
from eqhamnet.services.model_service import Reducer, StepResult, Trainer, outputs_to_blocks

logger = logging.getLogger(__name__)

_WIRE_DTYPES = {torch.float32: np.dtype("<f4"), torch.float64: np.dtype("<f8")}


# ---------------------------------------------------------------------------
# Plans
# ---------------------------------------------------------------------------

def build_comm_plan(graph: AtomGraph, assignment: PartitionAssignment) -> CommPlan:
    if assignment.n_nodes != graph.n_nodes:
        raise UsageError(f"Assignment covers {assignment.n_nodes} nodes, graph has {graph.n_nodes}")
    parts = assignment.node_to_part
    world = assignment.n_parts
    owner = assignment.edge_owner(graph)
    src_part = parts[graph.src]
    crossing = owner != src_part

    # needs[(p, q)]: global ids owned by p that rank q reads
    needs: Dict[tuple, np.ndarray] = {}
    for q in range(world):
        mask = crossing & (owner == q)
        for p in np.unique(src_part[mask]):
            needs[(int(p), q)] = np.unique(graph.src[mask & (src_part == p)])

    local_index = np.full(graph.n_nodes, -1, dtype=np.int64)
    orders: List[np.ndarray] = []
    interior_counts: List[int] = []
    for p in range(world):
        owned = assignment.nodes_of(p)
        exported = [ids for (sender, _), ids in needs.items() if sender == p]
        boundary = np.unique(np.concatenate(exported)) if exported else np.zeros(0, dtype=np.int64)
        is_boundary = np.isin(owned, boundary)
        order = np.concatenate([owned[~is_boundary], owned[is_boundary]])
        local_index[order] = np.arange(len(order))
        orders.append(order)
        interior_counts.append(int((~is_boundary).sum()))

    ranks = []
    for q in range(world):
        order = orders[q]
        send = {
            peer: np.sort(local_index[ids])
            for (sender, peer), ids in sorted(needs.items()) if sender == q
        }
        recv: Dict[int, RecvLayout] = {}
        slot_of = {}
        offset = len(order)
        for (sender, reader), ids in sorted(needs.items()):
            if reader != q:
                continue
            ids = ids[np.argsort(local_index[ids], kind="stable")]
            slots = np.arange(offset, offset + len(ids))
            recv[sender] = RecvLayout(count=len(ids), slots=slots, global_ids=ids)
            slot_of.update(zip(ids.tolist(), slots.tolist()))
            offset += len(ids)

        edges = np.nonzero(owner == q)[0]
        src = graph.src[edges]
        src_slot = np.where(
            src_part[edges] == q,
            local_index[src],
            np.array([slot_of.get(int(s), -1) for s in src], dtype=np.int64),
        ) if len(edges) else np.zeros(0, dtype=np.int64)
        ranks.append(RankPlan(
            rank=q,
            owned_nodes=order,
            n_interior=interior_counts[q],
            owned_edges=edges,
            edge_src_slot=src_slot.astype(np.int64),
            edge_dst_local=local_index[graph.dst[edges]],
            send=send,
            recv=recv,
        ))
    plan = CommPlan(world_size=world, ranks=ranks)
    logger.info(
        f"Communication plan: {world} ranks, {plan.sends_per_exchange()} messages and "
        f"{plan.total_received()} embeddings per exchange"
    )
    return plan


def rank_view(graph: AtomGraph, model: HamiltonianModel, plan: RankPlan) -> GraphView:
    return GraphView.build(
        graph, model,
        node_ids=plan.owned_nodes,
        edge_ids=plan.owned_edges,
        src_index=plan.edge_src_slot,
        dst_index=plan.edge_dst_local,
        n_remote=plan.n_remote,
    )


# ---------------------------------------------------------------------------
# Halo exchange
# ---------------------------------------------------------------------------

def _encode(rows: torch.Tensor) -> bytes:
    return rows.detach().contiguous().cpu().numpy().astype(_WIRE_DTYPES[rows.dtype], copy=False).tobytes()


def _decode(payload: bytes, count: int, like: torch.Tensor, transport: Transport, peer: int) -> torch.Tensor:
    wire = _WIRE_DTYPES[like.dtype]
    expected = count * like.shape[1] * like.shape[2] * wire.itemsize
    if len(payload) != expected:
        raise CommunicationError(f"received {len(payload)} bytes, expected {expected}", transport.rank, peer)
    array = np.frombuffer(payload, dtype=wire).reshape(count, like.shape[1], like.shape[2])
    return torch.from_numpy(array.copy()).to(like.dtype)


@dataclass
class RankState:
    """Mutable per-rank bookkeeping of the exchanges run so far."""

    rank: int
    plan: RankPlan
    transport: Transport
    timer: PhaseTimer
    exchanges: int = 0
    remote: Optional[torch.Tensor] = None

    def next_tag(self) -> int:
        tag = self.exchanges & MAX_TAG
        self.exchanges += 1
        return tag


class HaloExchange(torch.autograd.Function):
    """``local (n_local, H, E) -> source table (n_local + n_remote, H, E)``.

    Forward ships each neighbor the rows it reads; backward returns the gradients of the
    received rows to their owners, who accumulate them in ascending peer order.
    """

    @staticmethod
    def forward(ctx, local: torch.Tensor, state: RankState, layer: int, tag: int) -> torch.Tensor:
        ctx.state, ctx.layer, ctx.tag = state, layer, tag
        plan, transport, timer = state.plan, state.transport, state.timer
        with timer.phase(layer, "pack"):
            outgoing = {peer: _encode(local.index_select(0, torch.as_tensor(idx))) for peer, idx in plan.send.items()}
        received = {}
        with timer.phase(layer, "sendrecv"):
            for peer in sorted(outgoing):
                transport.post_send(peer, tag, outgoing[peer])
                timer.count_bytes(peer, len(outgoing[peer]))
            for peer in sorted(plan.recv):
                received[peer] = transport.post_recv(peer, tag)
        with timer.phase(layer, "unpack"):
            remote = local.new_zeros((plan.n_remote, local.shape[1], local.shape[2]))
            base = plan.n_local
            for peer in sorted(received):
                layout = plan.recv[peer]
                rows = _decode(received[peer], layout.count, local, transport, peer)
                remote[torch.as_tensor(layout.slots - base)] = rows
        state.remote = remote
        return torch.cat([local, remote], dim=0)

    @staticmethod
    def backward(ctx, grad_table: torch.Tensor):
        state, layer = ctx.state, ctx.layer
        tag = GRADIENT_TAG | ctx.tag
        plan, transport, timer = state.plan, state.transport, state.timer
        grad_table = grad_table.contiguous()
        with timer.phase(layer, "pack"):
            outgoing = {
                peer: _encode(grad_table.index_select(0, torch.as_tensor(layout.slots)))
                for peer, layout in plan.recv.items()
            }
        received = {}
        with timer.phase(layer, "sendrecv"):
            for peer in sorted(outgoing):
                transport.post_send(peer, tag, outgoing[peer])
                timer.count_bytes(peer, len(outgoing[peer]))
            for peer in sorted(plan.send):
                received[peer] = transport.post_recv(peer, tag)
        with timer.phase(layer, "unpack"):
            grad_local = grad_table[:plan.n_local].clone()
            for peer in sorted(received):
                idx = plan.send[peer]
                rows = _decode(received[peer], len(idx), grad_table, transport, peer)
                grad_local.index_add_(0, torch.as_tensor(idx), rows)
        return grad_local, None, None, None


def halo_exchange(local: torch.Tensor, state: RankState, layer: int = 0) -> torch.Tensor:
    """Source table of the rank: its own rows followed by the rows received from neighbors."""
    if local.shape[0] != state.plan.n_local:
        raise UsageError(f"Rank {state.rank} holds {state.plan.n_local} nodes, got {local.shape[0]} rows")
    return HaloExchange.apply(local, state, layer, state.next_tag())


class RankExchange:
    """Exchange callback handed to :meth:`HamiltonianModel.forward` on one rank."""

    def __init__(self, state: RankState):
        self.state = state

    def __call__(self, nodes: torch.Tensor, layer: int, block: str) -> torch.Tensor:
        return halo_exchange(nodes, self.state, layer)


# ---------------------------------------------------------------------------
# Collectives
# ---------------------------------------------------------------------------

class TransportReducer(Reducer):
    """Reductions over all ranks; sums are taken in ascending rank order on every rank."""

    def __init__(self, transport: Transport):
        self.transport = transport
        self.world_size = transport.world_size

    def sum_floats(self, values: Sequence[float]) -> np.ndarray:
        rows = self.transport.allgather_array(np.asarray(values, dtype=np.float64))
        total = np.zeros(rows.shape[1:], dtype=np.float64)
        for row in rows:
            total = total + row
        return total

    def reduce_gradients(self, model: HamiltonianModel):
        flat = model.flat_gradients().astype(np.float64)
        model.set_flat_gradients(self.sum_floats(flat))

    def check_parameters(self, model: HamiltonianModel):
        digest = model.parameter_hash()
        digests = [d.decode() for d in self.transport.allgather(digest.encode())]
        if len(set(digests)) > 1:
            bad = [rank for rank, d in enumerate(digests) if d != digests[0]]
            raise DivergenceError(f"Parameter replicas diverged on ranks {bad}")


def gather_blocks(transport: Transport, local: BlockMatrix) -> BlockMatrix:
    """Union of every rank's blocks, available on all ranks."""
    merged = {}
    for payload in transport.allgather(blocks_to_bytes(local)):
        merged.update(blocks_from_bytes(payload, local))
    return local.with_blocks(dict(sorted(merged.items())))


# ---------------------------------------------------------------------------
# Rank programs
# ---------------------------------------------------------------------------

@dataclass
class RankReport:
    rank: int
    blocks: Optional[BlockMatrix] = None
    history: List[StepResult] = field(default_factory=list)
    state_dict: Optional[Dict[str, torch.Tensor]] = None
    parameter_hash: str = ""
    timer: Optional[PhaseTimer] = None
    exchanges: int = 0
    bytes_sent: int = 0
    stats: Dict[str, int] = field(default_factory=dict)


def _report(state: RankState, model: HamiltonianModel) -> RankReport:
    return RankReport(
        rank=state.rank,
        parameter_hash=model.parameter_hash(),
        timer=state.timer,
        exchanges=state.exchanges,
        bytes_sent=int(sum(state.transport.bytes_to.values())),
        stats=dict(state.transport.stats),
    )


def forward_rank(transport: Transport, graph: AtomGraph, model: HamiltonianModel, plan: CommPlan,
                 gather: bool = True) -> RankReport:
    """Distributed inference on one rank; parameters are compared before any compute."""
    state = RankState(transport.rank, plan[transport.rank], transport, PhaseTimer(rank=transport.rank))
    TransportReducer(transport).check_parameters(model)
    view = rank_view(graph, model, state.plan)
    with torch.no_grad():
        node_out, edge_out = model(view, RankExchange(state), state.timer)
    local = outputs_to_blocks(view, node_out, edge_out, model, graph.species).to_numpy()
    report = _report(state, model)
    report.blocks = gather_blocks(transport, local) if gather else local
    return report


def train_rank(transport: Transport, graph: AtomGraph, model: HamiltonianModel, plan: CommPlan,
               targets: BlockMatrix, trainer_factory: Callable[[HamiltonianModel], Trainer],
               num_steps: int) -> RankReport:
    """Full-batch training on one rank; ``targets`` holds the blocks this rank owns."""
    state = RankState(transport.rank, plan[transport.rank], transport, PhaseTimer(rank=transport.rank))
    trainer = trainer_factory(model)
    trainer.timer = state.timer
    view = rank_view(graph, model, state.plan)
    history = trainer.fit(graph, view, targets, num_steps, RankExchange(state), TransportReducer(transport))
    report = _report(state, model)
    report.history = history
    report.state_dict = {name: t.detach().clone() for name, t in model.state_dict().items()}
    return report


def run_world(world_size: int, program: Callable[[Transport], RankReport], timeout: float = 60.0,
              jitter: float = 0.0, seed: int = 0) -> List[RankReport]:
    """Run ``program`` once per rank on threads connected by an in-process hub."""
    hub = InProcessHub(world_size, timeout=timeout, jitter=jitter, seed=seed)

    def guarded(rank: int) -> RankReport:
        threading.current_thread().name = f"rank-{rank}"
        try:
            return program(hub.transport(rank))
        except Exception as e:
            hub.abort(f"rank {rank} failed: {e}")
            raise

    with ThreadPoolExecutor(max_workers=world_size) as pool:
        futures = [pool.submit(guarded, rank) for rank in range(world_size)]
        errors, reports = [], []
        for future in futures:
            try:
                reports.append(future.result())
            except EqhamnetError as e:
                errors.append(e)
    if errors:
        # the first non-abort error is the root cause
        root = next((e for e in errors if "world aborted" not in e.message), errors[0])
        raise root
    return reports


def distributed_forward(graph: AtomGraph, model: HamiltonianModel, assignment: PartitionAssignment,
                        timeout: float = 60.0, jitter: float = 0.0) -> List[RankReport]:
    """Forward pass over ``assignment.n_parts`` in-process ranks, each with its own replica."""
    plan = build_comm_plan(graph, assignment)
    replicas = [copy.deepcopy(model) for _ in range(plan.world_size)]
    return run_world(
        plan.world_size,
        lambda transport: forward_rank(transport, graph, replicas[transport.rank], plan),
        timeout=timeout, jitter=jitter,
    )


def distributed_train(graph: AtomGraph, model: HamiltonianModel, assignment: PartitionAssignment,
                      targets: Sequence[BlockMatrix], trainer_factory: Callable[[HamiltonianModel], Trainer],
                      num_steps: int, timeout: float = 60.0) -> List[RankReport]:
    """Train replicas of ``model`` on in-process ranks; ``targets[r]`` is rank r's share."""
    plan = build_comm_plan(graph, assignment)
    replicas = [copy.deepcopy(model) for _ in range(plan.world_size)]
    reports = run_world(
        plan.world_size,
        lambda transport: train_rank(transport, graph, replicas[transport.rank], plan,
                                     targets[transport.rank], trainer_factory, num_steps),
        timeout=timeout,
    )
    model.load_state_dict(reports[0].state_dict)
    return reports


def distributed_train_step(graph: AtomGraph, model: HamiltonianModel, assignment: PartitionAssignment,
                           targets: Sequence[BlockMatrix],
                           trainer_factory: Callable[[HamiltonianModel], Trainer]) -> float:
    """One synchronized optimizer step; updates ``model`` in place and returns the global loss."""
    reports = distributed_train(graph, model, assignment, targets, trainer_factory, num_steps=1)
    return reports[0].history[0].loss


def launch_ranks(argv: Sequence[str], world_size: int, master_addr: str, master_port: int,
                 timeout: Optional[float] = None) -> int:
    """Start ``world_size`` worker processes running ``eqhamnet <argv>`` and wait for all of them.

    Returns the first non-zero exit code, or 0.
    """
    processes = []
    for rank in range(world_size):
        env = dict(os.environ, RANK=str(rank), WORLD_SIZE=str(world_size),
                   MASTER_ADDR=master_addr, MASTER_PORT=str(master_port))
        processes.append(subprocess.Popen([sys.executable, "-m", "eqhamnet.main", *argv], env=env))
    logger.info(f"Launched {world_size} rank processes (master {master_addr}:{master_port})")
    codes = []
    for rank, process in enumerate(processes):
        try:
            codes.append(process.wait(timeout=timeout))
        except subprocess.TimeoutExpired:
            for p in processes:
                p.kill()
            raise CommunicationError("rank process did not finish in time", rank, None)
    failed = [(rank, code) for rank, code in enumerate(codes) if code]
    if failed:
        logger.error(f"Rank processes failed: {failed}")
        return failed[0][1]
    return 0


def gather_timers(transport: Transport, timer: PhaseTimer) -> List[PhaseTimer]:
    """Every rank's per-(layer, phase) totals, indexed by rank."""
    document = json.dumps([[layer, name, seconds] for (layer, name), seconds in sorted(timer.totals().items())])
    timers = []
    for rank, payload in enumerate(transport.allgather(document.encode())):
        gathered = PhaseTimer(rank=rank)
        for layer, name, seconds in json.loads(payload):
            gathered.add(layer, name, seconds)
        timers.append(gathered)
    return timers
