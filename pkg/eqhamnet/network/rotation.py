from dataclasses import dataclass
from typing import List

import numpy as np
import torch

from eqhamnet.core.harmonics import align_rotations


@dataclass
class EdgeRotations:
    """Per-edge Wigner blocks of the alignment rotation as constant tensors."""

    blocks: List[torch.Tensor]

    @classmethod
    def from_displacements(cls, displacement: np.ndarray, l_max: int, dtype=torch.float32) -> "EdgeRotations":
        rotation = align_rotations(np.asarray(displacement).reshape(-1, 3), l_max)
        return cls([torch.as_tensor(b, dtype=dtype) for b in rotation.blocks])

    @property
    def n_edges(self) -> int:
        return self.blocks[0].shape[0]

    def index(self, index: torch.Tensor) -> "EdgeRotations":
        return EdgeRotations([b[index] for b in self.blocks])

    def rotate(self, x: torch.Tensor, inverse: bool = False) -> torch.Tensor:
        """Apply ``W_D`` (or its inverse) degree by degree to ``(K, H, C)`` features."""
        parts = []
        for l, d in enumerate(self.blocks):
            if inverse:
                d = d.transpose(1, 2)
            parts.append(torch.bmm(d, x[:, l * l:(l + 1) * (l + 1), :]))
        return torch.cat(parts, dim=1)
