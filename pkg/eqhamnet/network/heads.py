import torch
import torch.nn.functional as F
from torch import nn

from eqhamnet.models.blocks import PaddedLayout


class OutputHead(nn.Module):
    """Collapses ``E`` channels to one value per padded (slot pair, L, M) component."""

    def __init__(self, layout: PaddedLayout, embed_dim: int):
        super().__init__()
        self.degrees = [L for L in range(layout.l_max_required + 1) if layout.n_pairs(L)]
        self.weights = nn.ParameterDict({
            f"L{L}": nn.Parameter(torch.zeros(layout.n_pairs(L), embed_dim)) for L in self.degrees
        })
        self.size = layout.size

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        k = x.shape[0]
        parts = [
            F.linear(x[:, L * L:(L + 1) * (L + 1), :], self.weights[f"L{L}"]).reshape(k, -1)
            for L in self.degrees
        ]
        return torch.cat(parts, dim=1) if parts else x.new_zeros(k, 0)
