from eqhamnet.network.model import HamiltonianModel, ModelSettings

__all__ = ["HamiltonianModel", "ModelSettings"]
