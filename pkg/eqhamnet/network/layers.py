import torch
from torch import nn

from eqhamnet.core.exceptions import ShapeError
from eqhamnet.network.rotation import EdgeRotations
from eqhamnet.network.so2 import MessageBatch, SO2Block


def create_messages(source_table: torch.Tensor, targets: torch.Tensor, edges: torch.Tensor,
                    src_index: torch.Tensor, dst_index: torch.Tensor) -> MessageBatch:
    """Gather ``(source, target, edge)`` embeddings for every edge.

    ``source_table`` holds every node a message may come from (local nodes first, then the
    received remote nodes); ``targets`` holds the local destination nodes.
    """
    k = edges.shape[0]
    if src_index.shape[0] != k or dst_index.shape[0] != k:
        raise ShapeError("Edge index arrays must match the number of edge tensors")
    if k and (int(src_index.max()) >= source_table.shape[0] or int(dst_index.max()) >= targets.shape[0]
              or int(src_index.min()) < 0 or int(dst_index.min()) < 0):
        raise ShapeError("Message index out of range")
    data = torch.stack(
        [source_table.index_select(0, src_index), targets.index_select(0, dst_index), edges], dim=1
    )
    return MessageBatch(data=data, edge_index=torch.arange(k))


def segment_softmax(logits: torch.Tensor, index: torch.Tensor, n_segments: int) -> torch.Tensor:
    """Softmax of ``logits`` within groups sharing the same ``index``."""
    if logits.numel() == 0:
        return logits
    peak = torch.full((n_segments,), float("-inf"), dtype=logits.dtype)
    peak = peak.scatter_reduce(0, index, logits.detach(), reduce="amax", include_self=True)
    weights = torch.exp(logits - peak.index_select(0, index))
    total = weights.new_zeros(n_segments).index_add(0, index, weights)
    return weights / total.index_select(0, index)


class NodeUpdate(nn.Module):
    """Attention-weighted sum of transformed incoming messages, added to the destination node."""

    def __init__(self, l_max: int, embed_dim: int, use_gate: bool = True):
        super().__init__()
        self.so2 = SO2Block(l_max, embed_dim, use_gate)
        self.attention = nn.Linear(embed_dim, 1, bias=False)

    def forward(self, nodes: torch.Tensor, source_table: torch.Tensor, edges: torch.Tensor,
                src_index: torch.Tensor, dst_index: torch.Tensor, rotations: EdgeRotations) -> torch.Tensor:
        messages = create_messages(source_table, nodes, edges, src_index, dst_index)
        transformed = self.so2(messages, rotations)
        logits = self.attention(transformed[:, 0, :]).squeeze(-1)
        alpha = segment_softmax(logits, dst_index, nodes.shape[0])
        aggregated = torch.zeros_like(nodes).index_add(0, dst_index, alpha[:, None, None] * transformed)
        return nodes + aggregated


class EdgeUpdate(nn.Module):
    """Transformed message added to its own edge embedding; no aggregation."""

    def __init__(self, l_max: int, embed_dim: int, use_gate: bool = True):
        super().__init__()
        self.so2 = SO2Block(l_max, embed_dim, use_gate)

    def forward(self, nodes: torch.Tensor, source_table: torch.Tensor, edges: torch.Tensor,
                src_index: torch.Tensor, dst_index: torch.Tensor, rotations: EdgeRotations) -> torch.Tensor:
        messages = create_messages(source_table, nodes, edges, src_index, dst_index)
        return edges + self.so2(messages, rotations)


class MessagePassingLayer(nn.Module):
    def __init__(self, l_max: int, embed_dim: int, use_gate: bool = True):
        super().__init__()
        self.node_update = NodeUpdate(l_max, embed_dim, use_gate)
        self.edge_update = EdgeUpdate(l_max, embed_dim, use_gate)
