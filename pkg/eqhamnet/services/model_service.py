import csv
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
import torch

from eqhamnet.core.exceptions import ConfigError, DivergenceError, ShapeError, TapeError, UsageError
from eqhamnet.middleware.timing import PhaseTimer
from eqhamnet.models.blocks import (
    BasisMode,
    BlockKey,
    BlockMatrix,
    coupled_to_uncoupled_array,
    is_on_site,
    padded_layout,
    uncoupled_to_coupled_array,
)
from eqhamnet.models.partition import PartitionAssignment
from eqhamnet.models.structure import AtomGraph, BasisSpec
from eqhamnet.network.model import Exchange, GraphView, HamiltonianModel, ModelSettings
from eqhamnet.services.schemas import LOSS_CURVE_HEADER

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "eqhamnet-checkpoint"
CHECKPOINT_VERSION = 1


def build_model(settings: ModelSettings, basis: BasisSpec) -> HamiltonianModel:
    model = HamiltonianModel(settings, basis)
    n_params = sum(p.numel() for p in model.parameters())
    logger.info(
        f"Built model: l_max={settings.l_max}, E={settings.embed_dim}, layers={settings.num_layers}, "
        f"{n_params} parameters, precision={settings.precision}"
    )
    return model


def init_embeddings(graph: AtomGraph, model: HamiltonianModel) -> Tuple[torch.Tensor, torch.Tensor]:
    return model.init_embeddings(GraphView.from_graph(graph, model))


def outputs_to_blocks(view: GraphView, node_out: torch.Tensor, edge_out: torch.Tensor,
                      model: HamiltonianModel, species: np.ndarray) -> BlockMatrix:
    """Truncate padded head outputs to coupled blocks keyed by global ``(i, j, image)``."""
    layout = model.layout
    blocks: Dict[BlockKey, torch.Tensor] = {}
    for z in np.unique(view.species):
        rows = np.nonzero(view.species == z)[0]
        index = torch.as_tensor(layout.pair(int(z), int(z)).head_index)
        values = node_out.index_select(0, torch.as_tensor(rows)).index_select(1, index)
        for row, value in zip(rows, values.unbind(0)):
            g = int(view.node_ids[row])
            blocks[(g, g, (0, 0, 0))] = value
    if view.n_edges:
        pairs = np.unique(view.edge_species, axis=0)
        for z_a, z_b in pairs:
            rows = np.nonzero((view.edge_species[:, 0] == z_a) & (view.edge_species[:, 1] == z_b))[0]
            index = torch.as_tensor(layout.pair(int(z_a), int(z_b)).head_index)
            values = edge_out.index_select(0, torch.as_tensor(rows)).index_select(1, index)
            for row, value in zip(rows, values.unbind(0)):
                blocks[view.edge_keys[row]] = value
    return BlockMatrix(model.basis, BasisMode.COUPLED, species, blocks)


def forward(graph: AtomGraph, model: HamiltonianModel, view: Optional[GraphView] = None,
            exchange: Optional[Exchange] = None, timer: Optional[PhaseTimer] = None) -> BlockMatrix:
    """Coupled blocks for every node and edge of the scope (the whole graph by default)."""
    view = view or GraphView.from_graph(graph, model)
    node_out, edge_out = model(view, exchange, timer)
    return outputs_to_blocks(view, node_out, edge_out, model, graph.species)


def _as_tensor(value, like: torch.Tensor) -> torch.Tensor:
    if isinstance(value, torch.Tensor):
        return value.to(like.dtype)
    return torch.as_tensor(np.asarray(value), dtype=like.dtype)


@dataclass
class LossResult:
    """Combined L1 + L2 loss over matched coupled elements.

    ``value = (abs_sum + sq_sum) / normalizer``; in distributed runs ``normalizer`` is the
    global element count so that per-rank values sum to the serial loss.
    """

    value: torch.Tensor
    abs_sum: torch.Tensor
    sq_sum: torch.Tensor
    n_elements: int
    normalizer: int
    node_abs: float = 0.0
    node_count: int = 0
    edge_abs: float = 0.0
    edge_count: int = 0
    diffs: Dict[BlockKey, torch.Tensor] = field(default_factory=dict, repr=False)

    def seed(self) -> Dict[BlockKey, np.ndarray]:
        """Gradient of the loss with respect to every matched predicted element."""
        return {
            key: ((np.sign(d) + 2.0 * d) / self.normalizer)
            for key, d in ((k, v.detach().cpu().numpy()) for k, v in self.diffs.items())
        }

    @property
    def node_mae(self) -> float:
        return self.node_abs / self.node_count if self.node_count else 0.0

    @property
    def edge_mae(self) -> float:
        return self.edge_abs / self.edge_count if self.edge_count else 0.0


def loss(pred: BlockMatrix, target: BlockMatrix, normalizer: Optional[int] = None,
         allow_empty: bool = False) -> LossResult:
    if pred.mode is not target.mode:
        raise ShapeError(f"Cannot compare {pred.mode.value} predictions with {target.mode.value} targets")
    missing = [key for key in target.keys() if key not in pred]
    if missing:
        raise ShapeError(f"{len(missing)} target blocks have no prediction, e.g. {missing[0]}")
    keys = target.keys()
    reference = next(iter(pred.blocks.values()), None)
    if not keys or reference is None:
        if not allow_empty:
            raise ShapeError("Predictions and targets share no blocks")
        zero = torch.zeros((), dtype=torch.float64 if reference is None else reference.dtype)
        return LossResult(zero, zero, zero, 0, normalizer or 1)

    diffs = {key: pred[key] - _as_tensor(target[key], pred[key]) for key in keys}
    flat = torch.cat([d.reshape(-1) for d in diffs.values()])
    abs_sum = flat.abs().sum()
    sq_sum = (flat * flat).sum()
    n = flat.numel()
    normalizer = normalizer or n

    node_abs = node_count = edge_abs = edge_count = 0
    for key, d in diffs.items():
        a = float(d.detach().abs().sum())
        if is_on_site(key):
            node_abs += a
            node_count += d.numel()
        else:
            edge_abs += a
            edge_count += d.numel()
    return LossResult(
        value=(abs_sum + sq_sum) / normalizer,
        abs_sum=abs_sum,
        sq_sum=sq_sum,
        n_elements=n,
        normalizer=normalizer,
        node_abs=node_abs,
        node_count=node_count,
        edge_abs=edge_abs,
        edge_count=edge_count,
        diffs=diffs,
    )


def backward(result: LossResult, model: HamiltonianModel, upstream: float = 1.0) -> Dict[str, torch.Tensor]:
    """Reverse-mode gradients of the loss for every named parameter."""
    if not result.value.requires_grad:
        raise TapeError("Loss was computed without a recorded forward pass")
    model.zero_grad(set_to_none=True)
    result.value.backward(torch.tensor(upstream, dtype=result.value.dtype))
    return {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in model.named_parameters()
    }


def reconstruct_uncoupled(pred: BlockMatrix) -> BlockMatrix:
    if pred.mode is not BasisMode.COUPLED:
        raise ShapeError("reconstruct_uncoupled expects coupled blocks")
    pred.validate()
    layout = padded_layout(pred.basis)
    blocks = {}
    for (i, j, image), value in pred.items():
        pair = layout.pair(int(pred.species[i]), int(pred.species[j]))
        if isinstance(value, torch.Tensor):
            t = torch.as_tensor(pair.transform, dtype=value.dtype)
            blocks[(i, j, image)] = (t.T @ value).reshape(pair.n_a, pair.n_b)
        else:
            blocks[(i, j, image)] = coupled_to_uncoupled_array(np.asarray(value), pair)
    return pred.with_blocks(blocks, BasisMode.UNCOUPLED)


def prepare_targets(uncoupled: BlockMatrix) -> BlockMatrix:
    """Coupled learning targets from uncoupled Hamiltonian blocks."""
    if uncoupled.mode is not BasisMode.UNCOUPLED:
        raise ShapeError("prepare_targets expects uncoupled blocks")
    uncoupled = uncoupled.to_numpy()
    uncoupled.validate()
    layout = padded_layout(uncoupled.basis)
    blocks = {}
    for (i, j, image), value in uncoupled.items():
        pair = layout.pair(int(uncoupled.species[i]), int(uncoupled.species[j]))
        blocks[(i, j, image)] = uncoupled_to_coupled_array(value, pair)
    return uncoupled.with_blocks(blocks, BasisMode.COUPLED)


def split_targets(targets: BlockMatrix, assignment: PartitionAssignment) -> List[BlockMatrix]:
    """Targets per part; block ``(i, j, image)`` belongs to the part owning node ``j``."""
    buckets: List[Dict[BlockKey, object]] = [{} for _ in range(assignment.n_parts)]
    for key, value in targets.items():
        buckets[int(assignment.node_to_part[key[1]])][key] = value
    return [targets.with_blocks(b) for b in buckets]


def symmetrize(pred: BlockMatrix) -> BlockMatrix:
    """Average every block with the transpose of its reverse ``(j, i, -image)`` partner."""
    uncoupled = reconstruct_uncoupled(pred) if pred.mode is BasisMode.COUPLED else pred
    blocks = {}
    for (i, j, image), value in uncoupled.items():
        partner = uncoupled.blocks.get((j, i, tuple(-v for v in image)))
        blocks[(i, j, image)] = value if partner is None else 0.5 * (value + partner.T)
    out = uncoupled.with_blocks(blocks)
    if pred.mode is BasisMode.COUPLED:
        layout = padded_layout(pred.basis)
        coupled = {}
        for (i, j, image), value in out.items():
            pair = layout.pair(int(pred.species[i]), int(pred.species[j]))
            if isinstance(value, torch.Tensor):
                coupled[(i, j, image)] = torch.as_tensor(pair.transform, dtype=value.dtype) @ value.reshape(-1)
            else:
                coupled[(i, j, image)] = uncoupled_to_coupled_array(value, pair)
        return pred.with_blocks(coupled)
    return out


def assemble_matrix(blocks: BlockMatrix) -> sp.csr_matrix:
    """Sum uncoupled blocks over periodic images into the ``N_orb x N_orb`` matrix."""
    if blocks.mode is BasisMode.COUPLED:
        blocks = reconstruct_uncoupled(blocks)
    blocks = blocks.to_numpy()
    sizes = np.array([blocks.basis.n_orb(int(z)) for z in blocks.species], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    n_orb = int(offsets[-1])
    rows, cols, data = [], [], []
    for (i, j, _), value in blocks.items():
        r, c = np.meshgrid(np.arange(sizes[i]) + offsets[i], np.arange(sizes[j]) + offsets[j], indexing="ij")
        rows.append(r.reshape(-1))
        cols.append(c.reshape(-1))
        data.append(np.asarray(value).reshape(-1))
    if not data:
        return sp.csr_matrix((n_orb, n_orb))
    matrix = sp.coo_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))), shape=(n_orb, n_orb)
    ).tocsr()
    logger.info(f"Assembled {n_orb} x {n_orb} matrix with {matrix.nnz} stored elements")
    return matrix


def save_matrix(matrix: sp.csr_matrix, path: str):
    sp.save_npz(path, matrix)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: str, model: HamiltonianModel, config: Optional[Dict[str, object]] = None,
                    step: int = 0):
    params = {name: t.detach().cpu().clone() for name, t in model.state_dict().items()}
    container = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "settings": model.settings.to_dict(),
        "basis": model.basis.to_lines(),
        "config": {k: v for k, v in (config or {}).items()},
        "step": step,
        "params": params,
        "shapes": {name: list(t.shape) for name, t in params.items()},
    }
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    torch.save(container, path)
    logger.info(f"Saved checkpoint to {path} (step {step})")


def load_checkpoint(path: str, model: HamiltonianModel) -> Dict[str, object]:
    container = torch.load(path, map_location="cpu", weights_only=True)
    if container.get("format") != CHECKPOINT_FORMAT or container.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"Unsupported checkpoint {path}: {container.get('format')} v{container.get('version')}")
    expected = {name: list(t.shape) for name, t in model.state_dict().items()}
    if container["shapes"] != expected:
        mismatched = sorted(
            name for name in set(expected) | set(container["shapes"])
            if expected.get(name) != container["shapes"].get(name)
        )
        raise ShapeError(f"Checkpoint parameters do not match the model: {mismatched[:5]}")
    model.load_state_dict(container["params"])
    logger.info(f"Loaded checkpoint {path} (step {container['step']})")
    return container


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

class Reducer:
    """Cross-scope reductions used by a training step; the serial scope is its own world."""

    world_size = 1

    def sum_floats(self, values: Sequence[float]) -> np.ndarray:
        return np.asarray(values, dtype=np.float64)

    def reduce_gradients(self, model: HamiltonianModel):
        pass

    def check_parameters(self, model: HamiltonianModel):
        pass


@dataclass
class StepResult:
    step: int
    loss: float
    learning_rate: float
    node_mae: float
    edge_mae: float


class Trainer:
    """Full-batch optimization with plateau learning-rate decay."""

    def __init__(self, model: HamiltonianModel, learning_rate: float, optimizer: str = "adam",
                 patience: int = 20, factor: float = 0.5, symmetrize_blocks: bool = False):
        self.model = model
        if optimizer == "adam":
            self.optimizer = torch.optim.Adam(model.parameters(), lr=learning_rate)
        elif optimizer == "sgd":
            self.optimizer = torch.optim.SGD(model.parameters(), lr=learning_rate)
        else:
            raise ConfigError(f"Unknown optimizer: {optimizer}")
        self.scheduler = torch.optim.lr_scheduler.ReduceLROnPlateau(
            self.optimizer, mode="min", factor=factor, patience=patience
        )
        self.symmetrize_blocks = symmetrize_blocks
        self.steps_done = 0
        self.timer: Optional[PhaseTimer] = None

    @classmethod
    def from_config(cls, model: HamiltonianModel, config) -> "Trainer":
        return cls(
            model,
            learning_rate=config.LEARNING_RATE,
            optimizer=config.OPTIMIZER,
            patience=config.PLATEAU_PATIENCE,
            factor=config.PLATEAU_FACTOR,
            symmetrize_blocks=config.SYMMETRIZE,
        )

    @property
    def learning_rate(self) -> float:
        return float(self.optimizer.param_groups[0]["lr"])

    def evaluate(self, graph: AtomGraph, view: GraphView, targets: BlockMatrix,
                 exchange: Optional[Exchange] = None, reducer: Optional[Reducer] = None) -> LossResult:
        reducer = reducer or Reducer()
        if self.symmetrize_blocks and reducer.world_size > 1:
            raise UsageError("Block symmetrization needs both edge directions and runs serially only")
        node_out, edge_out = self.model(view, exchange, self.timer)
        pred = outputs_to_blocks(view, node_out, edge_out, self.model, graph.species)
        if self.symmetrize_blocks:
            pred = symmetrize(pred)
        local = loss(pred, targets, allow_empty=reducer.world_size > 1)
        n_global = int(reducer.sum_floats([local.n_elements])[0])
        if n_global == 0:
            raise ShapeError("Predictions and targets share no blocks")
        local.value = (local.abs_sum + local.sq_sum) / n_global
        if reducer.world_size > 1:
            # ranks without targets still take part in the backward exchanges
            local.value = local.value + 0.0 * (node_out.sum() + edge_out.sum()).to(local.value.dtype)
        local.normalizer = n_global
        return local

    def step(self, graph: AtomGraph, view: GraphView, targets: BlockMatrix,
             exchange: Optional[Exchange] = None, reducer: Optional[Reducer] = None) -> StepResult:
        reducer = reducer or Reducer()
        reducer.check_parameters(self.model)
        self.optimizer.zero_grad(set_to_none=True)
        local = self.evaluate(graph, view, targets, exchange, reducer)
        if local.value.requires_grad:
            local.value.backward()
        totals = reducer.sum_floats([
            float(local.value.detach()), local.node_abs, local.node_count, local.edge_abs, local.edge_count,
        ])
        global_loss = float(totals[0])
        if not math.isfinite(global_loss):
            raise DivergenceError(f"Loss became non-finite at step {self.steps_done}")
        reducer.reduce_gradients(self.model)

        previous_lr = self.learning_rate
        self.optimizer.step()
        self.scheduler.step(global_loss)
        if self.learning_rate < previous_lr:
            logger.warning(f"Loss plateaued; learning rate {previous_lr:.3e} -> {self.learning_rate:.3e}")
        reducer.check_parameters(self.model)

        result = StepResult(
            step=self.steps_done,
            loss=global_loss,
            learning_rate=previous_lr,
            node_mae=totals[1] / totals[2] if totals[2] else 0.0,
            edge_mae=totals[3] / totals[4] if totals[4] else 0.0,
        )
        self.steps_done += 1
        logger.debug(f"step {result.step}: loss={result.loss:.6e} lr={result.learning_rate:.3e}")
        return result

    def fit(self, graph: AtomGraph, view: GraphView, targets: BlockMatrix, num_steps: int,
            exchange: Optional[Exchange] = None, reducer: Optional[Reducer] = None) -> List[StepResult]:
        history = []
        for _ in range(num_steps):
            history.append(self.step(graph, view, targets, exchange, reducer))
            if history[-1].step % 10 == 0:
                logger.info(f"step {history[-1].step}: loss={history[-1].loss:.6e}")
        return history


def write_loss_curve(path: str, history: Sequence[StepResult]):
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(LOSS_CURVE_HEADER)
        for r in history:
            writer.writerow([r.step, f"{r.loss:.10e}", f"{r.learning_rate:.6e}",
                             f"{r.node_mae:.10e}", f"{r.edge_mae:.10e}"])
