from typing import Sequence

import torch
from torch import nn


class GaussianBasis(nn.Module):
    """``num_gaussians`` Gaussians with centers uniform on ``[0, r_cut]`` and width equal to the spacing."""

    def __init__(self, r_cut: float, num_gaussians: int):
        super().__init__()
        centers = torch.linspace(0.0, r_cut, num_gaussians, dtype=torch.float64)
        width = r_cut / (num_gaussians - 1) if num_gaussians > 1 else r_cut
        self.register_buffer("centers", centers)
        self.register_buffer("width", torch.tensor(width, dtype=torch.float64))

    def forward(self, distance: torch.Tensor) -> torch.Tensor:
        diff = (distance[:, None] - self.centers[None, :]) / self.width
        return torch.exp(-0.5 * diff * diff)


class NodeEmbedding(nn.Module):
    """Learned per-species vector on the ``l = 0`` plane; higher degrees start at zero."""

    def __init__(self, species: Sequence[int], n_harmonics: int, embed_dim: int):
        super().__init__()
        self.species = [int(z) for z in species]
        self.n_harmonics = n_harmonics
        self.table = nn.Embedding(len(self.species), embed_dim)

    def forward(self, species_index: torch.Tensor) -> torch.Tensor:
        scalars = self.table(species_index)
        rest = scalars.new_zeros(scalars.shape[0], self.n_harmonics - 1, scalars.shape[1])
        return torch.cat([scalars[:, None, :], rest], dim=1)


class EdgeEmbedding(nn.Module):
    def __init__(self, r_cut: float, num_gaussians: int, n_harmonics: int, embed_dim: int):
        super().__init__()
        self.n_harmonics = n_harmonics
        self.basis = GaussianBasis(r_cut, num_gaussians)
        self.lift = nn.Linear(num_gaussians, embed_dim, bias=False)

    def forward(self, distance: torch.Tensor) -> torch.Tensor:
        scalars = self.lift(self.basis(distance).to(self.lift.weight.dtype))
        rest = scalars.new_zeros(scalars.shape[0], self.n_harmonics - 1, scalars.shape[1])
        return torch.cat([scalars[:, None, :], rest], dim=1)
