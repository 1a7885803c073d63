from dataclasses import dataclass, field
from enum import Enum as PyEnum
from typing import Dict, List

import numpy as np

from eqhamnet.core.exceptions import PartitionError
from eqhamnet.models.structure import AtomGraph


class PartitionMethod(PyEnum):
    LOWNN = "lownn"
    MINCUT = "mincut"


@dataclass(frozen=True, eq=False)
class PartitionAssignment:
    """Node-to-part map; edge ``i -> j`` always belongs to the part of ``j``."""

    n_parts: int
    node_to_part: np.ndarray
    method: PartitionMethod

    def __post_init__(self):
        parts = np.asarray(self.node_to_part, dtype=np.int64).reshape(-1)
        if len(parts) and (parts.min() < 0 or parts.max() >= self.n_parts):
            raise PartitionError("Part id out of range")
        parts.setflags(write=False)
        object.__setattr__(self, "node_to_part", parts)

    @property
    def n_nodes(self) -> int:
        return len(self.node_to_part)

    def edge_owner(self, graph: AtomGraph) -> np.ndarray:
        return self.node_to_part[graph.dst]

    def nodes_of(self, part: int) -> np.ndarray:
        return np.nonzero(self.node_to_part == part)[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, PartitionAssignment):
            return NotImplemented
        return self.n_parts == other.n_parts and np.array_equal(self.node_to_part, other.node_to_part)


@dataclass
class PartitionMetrics:
    method: str
    n_parts: int
    node_counts: List[int]
    edge_counts: List[int]
    neighbor_counts: List[int]
    recv_volume: List[int]
    neighbors: List[List[int]]
    # traffic[(p, q)] = embeddings part q receives from part p
    traffic: Dict[tuple, int] = field(default_factory=dict)
    node_imbalance: float = 1.0
    edge_imbalance: float = 1.0
    total_communicated: int = 0
    wall_time: float = 0.0

    @property
    def mean_neighbors(self) -> float:
        return float(np.mean(self.neighbor_counts)) if self.neighbor_counts else 0.0

    def to_dict(self) -> Dict[str, object]:
        return {
            "method": self.method,
            "n_parts": self.n_parts,
            "node_imbalance": self.node_imbalance,
            "edge_imbalance": self.edge_imbalance,
            "total_communicated": self.total_communicated,
            "mean_neighbors": self.mean_neighbors,
            "wall_time": self.wall_time,
            "parts": [
                {
                    "part": q,
                    "nodes": self.node_counts[q],
                    "edges": self.edge_counts[q],
                    "neighbor_count": self.neighbor_counts[q],
                    "recv_volume": self.recv_volume[q],
                    "neighbors": self.neighbors[q],
                }
                for q in range(self.n_parts)
            ],
            "traffic": [
                {"src": int(p), "dst": int(q), "embeddings": int(n)}
                for (p, q), n in sorted(self.traffic.items())
            ],
        }
