import hashlib
import logging
from contextlib import nullcontext
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from eqhamnet.core.exceptions import BasisError, ConfigError
from eqhamnet.middleware.timing import PhaseTimer
from eqhamnet.models.blocks import BlockKey, PaddedLayout, padded_layout
from eqhamnet.models.structure import AtomGraph, BasisSpec
from eqhamnet.network.embedding import EdgeEmbedding, NodeEmbedding
from eqhamnet.network.heads import OutputHead
from eqhamnet.network.layers import MessagePassingLayer
from eqhamnet.network.rotation import EdgeRotations

logger = logging.getLogger(__name__)

DTYPES = {"single": torch.float32, "double": torch.float64}

# (nodes, layer, block) -> table of every node a message may come from
Exchange = Callable[[torch.Tensor, int, str], torch.Tensor]


@dataclass(frozen=True)
class ModelSettings:
    l_max: int = 2
    embed_dim: int = 8
    num_layers: int = 2
    num_gaussians: int = 32
    r_cut: float = 5.0
    seed: int = 0
    precision: str = "single"
    use_gate: bool = True

    @classmethod
    def from_config(cls, config) -> "ModelSettings":
        return cls(
            l_max=config.L_MAX,
            embed_dim=config.EMBED_DIM,
            num_layers=config.NUM_LAYERS,
            num_gaussians=config.NUM_GAUSSIANS,
            r_cut=config.R_CUT,
            seed=config.SEED,
            precision=config.PRECISION,
            use_gate=config.USE_GATE,
        )

    @property
    def dtype(self) -> torch.dtype:
        return DTYPES[self.precision]

    @property
    def n_harmonics(self) -> int:
        return (self.l_max + 1) ** 2

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)


@dataclass
class GraphView:
    """The slice of an :class:`AtomGraph` one execution scope computes on.

    Serial runs see the whole graph. A rank sees its owned nodes (``node_ids`` in local order)
    and the edges they own; ``src_index`` points into the source table, whose first
    ``n_local`` rows are the local nodes followed by ``n_remote`` received nodes.
    """

    node_ids: np.ndarray
    species: np.ndarray
    species_index: torch.Tensor
    edge_ids: np.ndarray
    src_index: torch.Tensor
    dst_index: torch.Tensor
    distance: torch.Tensor
    rotations: EdgeRotations
    edge_keys: List[BlockKey]
    edge_species: np.ndarray
    n_remote: int = 0

    @property
    def n_local(self) -> int:
        return len(self.node_ids)

    @property
    def n_edges(self) -> int:
        return len(self.edge_ids)

    @classmethod
    def build(cls, graph: AtomGraph, model: "HamiltonianModel", node_ids: np.ndarray,
              edge_ids: np.ndarray, src_index: np.ndarray, dst_index: np.ndarray,
              n_remote: int = 0) -> "GraphView":
        dtype = model.settings.dtype
        node_ids = np.asarray(node_ids, dtype=np.int64)
        edge_ids = np.asarray(edge_ids, dtype=np.int64)
        species = graph.species[node_ids]
        keys = graph.edge_keys()
        return cls(
            node_ids=node_ids,
            species=species,
            species_index=torch.as_tensor(model.species_index(species), dtype=torch.long),
            edge_ids=edge_ids,
            src_index=torch.as_tensor(np.asarray(src_index, dtype=np.int64)),
            dst_index=torch.as_tensor(np.asarray(dst_index, dtype=np.int64)),
            distance=torch.as_tensor(graph.distance[edge_ids], dtype=dtype),
            rotations=EdgeRotations.from_displacements(graph.displacement[edge_ids], model.settings.l_max, dtype),
            edge_keys=[keys[k] for k in edge_ids],
            edge_species=np.stack([graph.species[graph.src[edge_ids]], graph.species[graph.dst[edge_ids]]], axis=1)
            if len(edge_ids) else np.zeros((0, 2), dtype=np.int64),
            n_remote=n_remote,
        )

    @classmethod
    def from_graph(cls, graph: AtomGraph, model: "HamiltonianModel") -> "GraphView":
        return cls.build(
            graph, model,
            node_ids=np.arange(graph.n_nodes),
            edge_ids=np.arange(graph.n_edges),
            src_index=graph.src,
            dst_index=graph.dst,
        )


class HamiltonianModel(nn.Module):
    """Embeddings, ``num_layers`` node/edge update layers and the two output heads."""

    def __init__(self, settings: ModelSettings, basis: BasisSpec):
        super().__init__()
        layout = padded_layout(basis)
        if settings.l_max < layout.l_max_required:
            raise ConfigError(
                f"l_max={settings.l_max} cannot represent blocks up to L={layout.l_max_required}; "
                f"use l_max >= 2 * max shell degree"
            )
        self.settings = settings
        self.basis = basis
        self.layout: PaddedLayout = layout
        self.species_table = list(basis.species)
        h, e = settings.n_harmonics, settings.embed_dim
        self.node_embedding = NodeEmbedding(self.species_table, h, e)
        self.edge_embedding = EdgeEmbedding(settings.r_cut, settings.num_gaussians, h, e)
        self.layers = nn.ModuleList(
            [MessagePassingLayer(settings.l_max, e, settings.use_gate) for _ in range(settings.num_layers)]
        )
        self.node_head = OutputHead(layout, e)
        self.edge_head = OutputHead(layout, e)
        self.reset_parameters(settings.seed)
        self.to(settings.dtype)

    def species_index(self, species: Sequence[int]) -> np.ndarray:
        species = np.asarray(species, dtype=np.int64)
        missing = sorted(set(species.tolist()) - set(self.species_table))
        if missing:
            raise BasisError(f"Species {missing} missing from the embedding table")
        return np.searchsorted(np.asarray(self.species_table), species)

    @torch.no_grad()
    def reset_parameters(self, seed: int):
        """Uniform Kaiming-style init, bound ``sqrt(3 / fan_in)``; values drawn in double precision."""
        generator = torch.Generator().manual_seed(seed)
        for name, param in self.named_parameters():
            fan_in = param.shape[-1] if param.dim() > 1 and "embedding.table" not in name else 1
            bound = (3.0 / fan_in) ** 0.5
            values = torch.empty(param.shape, dtype=torch.float64).uniform_(-bound, bound, generator=generator)
            param.copy_(values.to(param.dtype))

    def init_embeddings(self, view: GraphView) -> Tuple[torch.Tensor, torch.Tensor]:
        return self.node_embedding(view.species_index), self.edge_embedding(view.distance)

    def forward(self, view: GraphView, exchange: Optional[Exchange] = None,
                timer: Optional[PhaseTimer] = None) -> Tuple[torch.Tensor, torch.Tensor]:
        """Padded head outputs for the scope's nodes ``(n_local, P)`` and edges ``(K, P)``."""
        nodes, edges = self.init_embeddings(view)
        for index, layer in enumerate(self.layers):
            table = exchange(nodes, index, "node") if exchange else nodes
            with timer.phase(index, "compute") if timer else nullcontext():
                nodes = layer.node_update(nodes, table, edges, view.src_index, view.dst_index, view.rotations)
            table = exchange(nodes, index, "edge") if exchange else nodes
            with timer.phase(index, "compute") if timer else nullcontext():
                edges = layer.edge_update(nodes, table, edges, view.src_index, view.dst_index, view.rotations)
        return self.node_head(nodes), self.edge_head(edges)

    def parameter_hash(self) -> str:
        digest = hashlib.sha256()
        for name, param in sorted(self.state_dict().items()):
            digest.update(name.encode())
            digest.update(param.detach().cpu().contiguous().numpy().tobytes())
        return digest.hexdigest()

    def flat_gradients(self) -> np.ndarray:
        grads = []
        for param in self.parameters():
            grad = param.grad if param.grad is not None else torch.zeros_like(param)
            grads.append(grad.detach().reshape(-1).cpu().numpy())
        return np.concatenate(grads) if grads else np.zeros(0)

    def set_flat_gradients(self, flat: np.ndarray):
        offset = 0
        for param in self.parameters():
            n = param.numel()
            param.grad = torch.as_tensor(flat[offset:offset + n], dtype=param.dtype).reshape(param.shape).clone()
            offset += n
