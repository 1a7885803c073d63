import csv
import json
import logging
import math
import os
from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np
import torch
from jsonschema import validate

from eqhamnet.core.exceptions import UsageError
from eqhamnet.core.transport import Transport
from eqhamnet.middleware.timing import PhaseTimer, write_timings_csv
from eqhamnet.models.blocks import BlockMatrix, is_on_site, read_blocks, write_blocks
from eqhamnet.models.partition import PartitionAssignment, PartitionMethod
from eqhamnet.models.structure import AtomGraph, AtomicStructure, BasisSpec
from eqhamnet.network.model import GraphView, HamiltonianModel, ModelSettings
from eqhamnet.services import model_service
from eqhamnet.services.partition_service import run_partition
from eqhamnet.services.runtime_service import (
    RankReport,
    build_comm_plan,
    distributed_forward,
    distributed_train,
    forward_rank,
    gather_timers,
    train_rank,
)
from eqhamnet.services.schemas import BLOCK_DISTANCE_HEADER, RUN_REPORT_SCHEMA
from eqhamnet.services.structure_service import build_graph, load_structure

logger = logging.getLogger(__name__)


@dataclass
class RunInputs:
    structure: AtomicStructure
    graph: AtomGraph
    basis: BasisSpec
    targets: Optional[BlockMatrix] = None


def write_block_distance_csv(path: str, graph: AtomGraph, uncoupled: BlockMatrix):
    """One row per off-site block: bond length and largest element magnitude."""
    keys = graph.edge_keys()
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(BLOCK_DISTANCE_HEADER)
        for k, key in enumerate(keys):
            if key in uncoupled and not is_on_site(key):
                max_abs = float(np.abs(np.asarray(uncoupled[key])).max())
                writer.writerow([key[0], key[1], f"{graph.distance[k]:.6f}", f"{max_abs:.10e}"])


def write_report(path: str, document: Dict[str, object]):
    validate(instance=document, schema=RUN_REPORT_SCHEMA)
    with open(path, "w") as handle:
        json.dump(document, handle, indent=2, sort_keys=True)


class RunService:
    """Forward and training runs driven by a :class:`Config`, serial or across ranks."""

    def __init__(self, config):
        self.config = config
        self.settings = ModelSettings.from_config(config)

    @property
    def output_dir(self) -> str:
        os.makedirs(self.config.OUTPUT_DIR, exist_ok=True)
        return self.config.OUTPUT_DIR

    def load_inputs(self, with_targets: bool = False) -> RunInputs:
        structure_path, basis_path = self.config.require("STRUCTURE_PATH", "BASIS_PATH")
        structure = load_structure(structure_path)
        basis = BasisSpec.from_file(basis_path)
        basis.check_species(structure.species)
        graph = build_graph(structure, self.config.R_CUT)
        targets = None
        if with_targets or self.config.TARGET_PATH:
            (target_path,) = self.config.require("TARGET_PATH")
            targets = model_service.prepare_targets(read_blocks(target_path, basis, structure.species))
        return RunInputs(structure, graph, basis, targets)

    def build_model(self, basis: BasisSpec) -> HamiltonianModel:
        model = model_service.build_model(self.settings, basis)
        if self.config.CHECKPOINT_PATH and os.path.exists(self.config.CHECKPOINT_PATH):
            model_service.load_checkpoint(self.config.CHECKPOINT_PATH, model)
        return model

    def assignment(self, inputs: RunInputs) -> PartitionAssignment:
        world = self.config.WORLD_SIZE
        if self.config.N_PARTS not in (1, world):
            raise UsageError(f"N_PARTS={self.config.N_PARTS} does not match WORLD_SIZE={world}")
        if world == 1:
            return PartitionAssignment(1, np.zeros(inputs.graph.n_nodes, dtype=np.int64), PartitionMethod.LOWNN)
        method = self.config.PARTITION_METHOD
        if method == "both":
            method = PartitionMethod.LOWNN.value
        depth = int(round(math.log2(world))) if method == PartitionMethod.LOWNN.value else 0
        assignment, _ = run_partition(method, inputs.structure, inputs.graph, depth=depth,
                                      n_parts=world, seed=self.config.SEED)
        return assignment

    def trainer(self, model: HamiltonianModel) -> model_service.Trainer:
        return model_service.Trainer.from_config(model, self.config)

    # -- forward ---------------------------------------------------------

    def forward(self) -> Dict[str, object]:
        inputs = self.load_inputs()
        model = self.build_model(inputs.basis)
        if self.config.WORLD_SIZE == 1:
            timer = PhaseTimer()
            view = GraphView.from_graph(inputs.graph, model)
            with torch.no_grad():
                node_out, edge_out = model(view, None, timer)
            blocks = model_service.outputs_to_blocks(view, node_out, edge_out, model, inputs.graph.species)
            return self.write_forward(inputs, model, blocks.to_numpy(), [timer], 0, [0])
        reports = distributed_forward(inputs.graph, model, self.assignment(inputs))
        return self.write_forward(
            inputs, model, reports[0].blocks, [r.timer for r in reports], reports[0].exchanges,
            [r.bytes_sent for r in reports],
        )

    def write_forward(self, inputs: RunInputs, model: HamiltonianModel, blocks: BlockMatrix,
                      timers: Sequence[PhaseTimer], exchanges: int, bytes_sent: Sequence[int]) -> Dict[str, object]:
        out = self.output_dir
        uncoupled = model_service.reconstruct_uncoupled(blocks)
        write_blocks(blocks, os.path.join(out, "predictions_coupled.txt"))
        write_blocks(uncoupled, os.path.join(out, "predictions_uncoupled.txt"))
        model_service.save_matrix(model_service.assemble_matrix(uncoupled), os.path.join(out, "hamiltonian.npz"))
        write_block_distance_csv(os.path.join(out, "blocks_vs_distance.csv"), inputs.graph, uncoupled)
        write_timings_csv(os.path.join(out, "timings.csv"), list(timers))

        loss_value = node_mae = edge_mae = None
        if inputs.targets is not None:
            pred = blocks.with_blocks({k: torch.as_tensor(np.asarray(v)) for k, v in blocks.items()})
            result = model_service.loss(pred, inputs.targets)
            loss_value, node_mae, edge_mae = float(result.value), result.node_mae, result.edge_mae
            logger.info(f"Validation loss {loss_value:.6e}, node MAE {node_mae:.3e}, edge MAE {edge_mae:.3e}")

        report = self._report("forward", inputs, model, len(blocks), exchanges, bytes_sent)
        report.update(loss=loss_value, node_mae=node_mae, edge_mae=edge_mae, steps=0)
        write_report(os.path.join(out, "report.json"), report)
        logger.info(f"Wrote {len(blocks)} predicted blocks to {out}")
        return report

    # -- training --------------------------------------------------------

    def train(self) -> Dict[str, object]:
        inputs = self.load_inputs(with_targets=True)
        model = self.build_model(inputs.basis)
        if self.config.WORLD_SIZE == 1:
            trainer = self.trainer(model)
            trainer.timer = PhaseTimer()
            view = GraphView.from_graph(inputs.graph, model)
            history = trainer.fit(inputs.graph, view, inputs.targets, self.config.NUM_STEPS)
            return self.write_train(inputs, model, history, [trainer.timer], 0, [0])
        assignment = self.assignment(inputs)
        shares = model_service.split_targets(inputs.targets, assignment)
        reports = distributed_train(inputs.graph, model, assignment, shares, self.trainer, self.config.NUM_STEPS)
        return self.write_train(
            inputs, model, reports[0].history, [r.timer for r in reports], reports[0].exchanges,
            [r.bytes_sent for r in reports],
        )

    def write_train(self, inputs: RunInputs, model: HamiltonianModel, history, timers: Sequence[PhaseTimer],
                    exchanges: int, bytes_sent: Sequence[int]) -> Dict[str, object]:
        out = self.output_dir
        model_service.write_loss_curve(os.path.join(out, "loss_curve.csv"), history)
        write_timings_csv(os.path.join(out, "timings.csv"), list(timers))
        model_service.save_checkpoint(os.path.join(out, "checkpoint.pt"), model, self.config.snapshot(), len(history))
        last = history[-1] if history else None
        report = self._report("train", inputs, model, len(inputs.targets), exchanges, bytes_sent)
        report.update(
            loss=last.loss if last else None,
            node_mae=last.node_mae if last else None,
            edge_mae=last.edge_mae if last else None,
            steps=len(history),
        )
        write_report(os.path.join(out, "report.json"), report)
        if last:
            logger.info(f"Trained {len(history)} steps, final loss {last.loss:.6e}")
        return report

    def _report(self, command: str, inputs: RunInputs, model: HamiltonianModel, n_blocks: int,
                exchanges: int, bytes_sent: Sequence[int]) -> Dict[str, object]:
        return {
            "command": command,
            "world_size": self.config.WORLD_SIZE,
            "n_nodes": inputs.graph.n_nodes,
            "n_edges": inputs.graph.n_edges,
            "n_blocks": n_blocks,
            "exchanges": int(exchanges),
            "bytes_sent": [int(b) for b in bytes_sent],
            "parameter_hash": model.parameter_hash(),
            "settings": self.settings.to_dict(),
        }

    # -- one rank of a multi-process run ---------------------------------

    def run_rank(self, transport: Transport, command: str) -> Optional[Dict[str, object]]:
        """Execute ``command`` as one rank; rank 0 writes the outputs and returns the report."""
        if command not in ("forward", "train"):
            raise UsageError(f"Unknown rank command: {command}")
        inputs = self.load_inputs(with_targets=command == "train")
        model = self.build_model(inputs.basis)
        assignment = self.assignment(inputs)
        if assignment.n_parts != transport.world_size:
            raise UsageError(f"{assignment.n_parts} parts for {transport.world_size} ranks")
        plan = build_comm_plan(inputs.graph, assignment)
        if command == "forward":
            report: RankReport = forward_rank(transport, inputs.graph, model, plan)
        else:
            shares = model_service.split_targets(inputs.targets, assignment)
            report = train_rank(transport, inputs.graph, model, plan, shares[transport.rank],
                                self.trainer, self.config.NUM_STEPS)
        timers = gather_timers(transport, report.timer)
        bytes_sent = transport.allgather_array(np.array([report.bytes_sent], dtype=np.float64))[:, 0]
        transport.barrier()
        if transport.rank != 0:
            return None
        if command == "forward":
            return self.write_forward(inputs, model, report.blocks, timers, report.exchanges, bytes_sent)
        return self.write_train(inputs, model, report.history, timers, report.exchanges, bytes_sent)
