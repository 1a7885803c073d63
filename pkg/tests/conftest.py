import numpy as np
import pytest

from eqhamnet.config.settings import DEFAULTS, Config
from eqhamnet.models.structure import AtomGraph, AtomicStructure, BasisSpec
from eqhamnet.network.model import ModelSettings
from eqhamnet.services.structure_service import build_graph
from eqhamnet.services.synthetic_service import SyntheticSpec, lattice_structure


class TestConfig(Config):
    """Plain attribute bag: defaults plus keyword overrides, no files and no validation."""

    __test__ = False

    def __init__(self, **overrides):
        for key, value in DEFAULTS.items():
            setattr(self, key, value)
        self.R_CUT = 5.0
        self.L_MAX = 2
        self.EMBED_DIM = 4
        self.NUM_LAYERS = 2
        self.NUM_GAUSSIANS = 8
        self.SEED = 0
        self.DEPTH = 0
        self.N_PARTS = 1
        self.WORLD_SIZE = 1
        self.MASTER_PORT = 29500
        self.LEARNING_RATE = 5e-3
        self.NUM_STEPS = 5
        self.PLATEAU_PATIENCE = 20
        self.PLATEAU_FACTOR = 0.5
        self.SYMMETRIZE = False
        self.USE_GATE = True
        self.BENCH_REPEATS = 3
        self.BENCH_WARMUP = 1
        self.BENCH_BATCHES = [1, 4]
        self.LOG_FILE = ""
        for key, value in overrides.items():
            setattr(self, key, value)

    def _validate(self):
        pass


@pytest.fixture
def config():
    return TestConfig()


@pytest.fixture
def basis():
    return BasisSpec.from_mapping({"H": "0,1", "O": "0,1"})


@pytest.fixture
def settings():
    return ModelSettings(l_max=2, embed_dim=4, num_layers=2, num_gaussians=8, r_cut=3.0, seed=0)


def cubic_lattice(n: int = 3, spacing: float = 1.0, z: int = 1) -> AtomicStructure:
    grid = np.stack(np.meshgrid(np.arange(n), np.arange(n), np.arange(n), indexing="ij"), axis=-1)
    positions = grid.reshape(-1, 3) * spacing
    return AtomicStructure.create(positions, [z] * len(positions), np.eye(3) * n * spacing, (True, True, True))


@pytest.fixture
def lattice():
    return cubic_lattice()


def triangle_structure() -> AtomicStructure:
    positions = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.5, np.sqrt(3) / 2, 0.0]]
    return AtomicStructure.create(positions, [1, 8, 1])


@pytest.fixture
def triangle() -> AtomGraph:
    """Three mutually bonded atoms: six directed edges."""
    return build_graph(triangle_structure(), 1.5)


def random_structure(n_atoms: int = 20, seed: int = 0, box: float = 6.0) -> AtomicStructure:
    rng = np.random.default_rng(seed)
    positions = rng.uniform(0.0, box, size=(n_atoms, 3))
    species = np.where(np.arange(n_atoms) % 3 == 0, 8, 1)
    return AtomicStructure.create(positions, species, np.eye(3) * box, (True, True, True))


@pytest.fixture
def toy_lattice():
    """32 jittered atoms, two species."""
    spec = SyntheticSpec(shape=(4, 4, 2), spacing=1.6, species=("H", "O"), seed=1)
    structure = lattice_structure(spec)
    return spec, structure, build_graph(structure, 2.5)
