from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np


@dataclass(frozen=True)
class RecvLayout:
    count: int
    slots: np.ndarray  # rows of the rank's source table, all >= n_local
    global_ids: np.ndarray


@dataclass(frozen=True)
class RankPlan:
    """Exchange schedule and local numbering of one rank.

    ``owned_nodes`` lists global node ids in local order: nodes no other rank needs first,
    boundary nodes (sent to at least one neighbor) at the tail. ``send[p]`` holds local
    indices whose embeddings rank ``p`` needs, ascending. ``recv[p]`` places the embeddings
    received from ``p`` in the source table; peers are laid out in ascending rank order.
    """

    rank: int
    owned_nodes: np.ndarray
    n_interior: int
    owned_edges: np.ndarray
    edge_src_slot: np.ndarray
    edge_dst_local: np.ndarray
    send: Dict[int, np.ndarray] = field(default_factory=dict)
    recv: Dict[int, RecvLayout] = field(default_factory=dict)

    @property
    def n_local(self) -> int:
        return len(self.owned_nodes)

    @property
    def n_remote(self) -> int:
        return sum(layout.count for layout in self.recv.values())

    @property
    def neighbors(self) -> List[int]:
        return sorted(set(self.send) | set(self.recv))

    @property
    def boundary_nodes(self) -> np.ndarray:
        return self.owned_nodes[self.n_interior:]

    def source_global_ids(self) -> np.ndarray:
        """Global node id of every row in the source table."""
        remote = [self.recv[p].global_ids for p in sorted(self.recv)]
        return np.concatenate([self.owned_nodes] + remote) if remote else self.owned_nodes.copy()


@dataclass(frozen=True)
class CommPlan:
    world_size: int
    ranks: List[RankPlan]

    def __getitem__(self, rank: int) -> RankPlan:
        return self.ranks[rank]

    def total_received(self) -> int:
        return sum(plan.n_remote for plan in self.ranks)

    def sends_per_exchange(self) -> int:
        return sum(len(plan.send) for plan in self.ranks)
