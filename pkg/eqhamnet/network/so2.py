"""Edge-frame SO(2) convolution: rotate, per-order linear maps with a gate, rotate back."""

from dataclasses import dataclass
from typing import List

import torch
import torch.nn.functional as F
from torch import nn

from eqhamnet.core.exceptions import ShapeError
from eqhamnet.network.rotation import EdgeRotations


def _order_indices(l_max: int):
    """Flattened ``h`` indices of the +m and -m components for every order ``m``."""
    positive, negative = [], []
    for m in range(l_max + 1):
        positive.append([l * l + l + m for l in range(m, l_max + 1)])
        negative.append([l * l + l - m for l in range(m, l_max + 1)])
    return positive, negative


class SO2Linear(nn.Module):
    """Linear map applied independently per order ``m``, mixing degrees and channels.

    For ``m > 0`` the (+m, -m) pair is treated as one complex component, so the map commutes
    with rotations about the alignment axis.
    """

    def __init__(self, l_max: int, in_channels: int, out_channels: int):
        super().__init__()
        self.l_max = l_max
        self.in_channels = in_channels
        self.out_channels = out_channels
        positive, negative = _order_indices(l_max)
        self.weights = nn.ParameterDict()
        for m in range(l_max + 1):
            n = l_max - m + 1
            shape = (n * out_channels, n * in_channels)
            if m == 0:
                self.weights["m0"] = nn.Parameter(torch.zeros(shape))
            else:
                self.weights[f"m{m}_re"] = nn.Parameter(torch.zeros(shape))
                self.weights[f"m{m}_im"] = nn.Parameter(torch.zeros(shape))
            self.register_buffer(f"pos{m}", torch.tensor(positive[m], dtype=torch.long), persistent=False)
            self.register_buffer(f"neg{m}", torch.tensor(negative[m], dtype=torch.long), persistent=False)
        order = [h for m in range(l_max + 1) for h in (positive[m] + (negative[m] if m else []))]
        self.register_buffer("inverse_order", torch.argsort(torch.tensor(order)), persistent=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        k = x.shape[0]
        if x.shape[1:] != ((self.l_max + 1) ** 2, self.in_channels):
            raise ShapeError(
                f"SO2Linear expects (K, {(self.l_max + 1) ** 2}, {self.in_channels}), got {tuple(x.shape)}"
            )
        outputs: List[torch.Tensor] = []
        for m in range(self.l_max + 1):
            n = self.l_max - m + 1
            pos = x.index_select(1, getattr(self, f"pos{m}")).reshape(k, -1)
            if m == 0:
                outputs.append(F.linear(pos, self.weights["m0"]).reshape(k, n, self.out_channels))
                continue
            neg = x.index_select(1, getattr(self, f"neg{m}")).reshape(k, -1)
            w_re, w_im = self.weights[f"m{m}_re"], self.weights[f"m{m}_im"]
            out_pos = F.linear(pos, w_re) - F.linear(neg, w_im)
            out_neg = F.linear(pos, w_im) + F.linear(neg, w_re)
            outputs.append(out_pos.reshape(k, n, self.out_channels))
            outputs.append(out_neg.reshape(k, n, self.out_channels))
        # m-major back to l-major
        return torch.cat(outputs, dim=1).index_select(1, self.inverse_order)


class GatedActivation(nn.Module):
    """SiLU on ``l = 0``; each ``l > 0`` channel scaled by a sigmoid gate computed from ``l = 0``."""

    def __init__(self, l_max: int, channels: int, enabled: bool = True):
        super().__init__()
        self.l_max = l_max
        self.enabled = enabled
        if enabled and l_max > 0:
            self.gate = nn.Linear(channels, l_max * channels, bias=False)
            degree = [l for l in range(1, l_max + 1) for _ in range(2 * l + 1)]
            self.register_buffer("degree_of", torch.tensor(degree, dtype=torch.long) - 1, persistent=False)
        else:
            self.gate = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not self.enabled:
            return x
        scalars = F.silu(x[:, :1, :])
        if self.gate is None:
            return scalars
        k, _, c = x.shape
        gates = torch.sigmoid(self.gate(x[:, 0, :])).reshape(k, self.l_max, c)
        return torch.cat([scalars, x[:, 1:, :] * gates.index_select(1, self.degree_of)], dim=1)


@dataclass
class MessageBatch:
    """``data[k, g]`` holds the source (g=0), target (g=1) and edge (g=2) embeddings of edge ``k``."""

    data: torch.Tensor
    edge_index: torch.Tensor

    @property
    def n_messages(self) -> int:
        return self.data.shape[0]


class SO2Block(nn.Module):
    """``3E -> 2E -> E`` edge-frame transformation of a message batch."""

    def __init__(self, l_max: int, embed_dim: int, use_gate: bool = True):
        super().__init__()
        self.l_max = l_max
        self.embed_dim = embed_dim
        self.linear_in = SO2Linear(l_max, 3 * embed_dim, 2 * embed_dim)
        self.activation = GatedActivation(l_max, 2 * embed_dim, enabled=use_gate)
        self.linear_out = SO2Linear(l_max, 2 * embed_dim, embed_dim)

    def forward(self, messages: MessageBatch, rotations: EdgeRotations) -> torch.Tensor:
        data = messages.data
        k, g, h, e = data.shape
        if g != 3 or h != (self.l_max + 1) ** 2 or e != self.embed_dim:
            raise ShapeError(f"Message batch of shape {tuple(data.shape)} does not match the block")
        if rotations.n_edges != k:
            raise ShapeError(f"{rotations.n_edges} rotations for {k} messages")
        # merge the (source, target, edge) axis into the channel axis: (K, H, 3E)
        x = data.permute(0, 2, 1, 3).reshape(k, h, 3 * e)
        x = rotations.rotate(x)
        x = self.linear_in(x)
        x = self.activation(x)
        x = self.linear_out(x)
        return rotations.rotate(x, inverse=True)
