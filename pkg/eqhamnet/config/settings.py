import os
from typing import Dict, Iterable, List, Optional

from dotenv import dotenv_values, load_dotenv

from eqhamnet.core.exceptions import ConfigError

ENV_PREFIX = "EQH_"

DEFAULTS: Dict[str, str] = {
    "STRUCTURE_PATH": "",
    "BASIS_PATH": "",
    "TARGET_PATH": "",
    "CHECKPOINT_PATH": "",
    "R_CUT": "5.0",
    "L_MAX": "2",
    "EMBED_DIM": "8",
    "NUM_LAYERS": "2",
    "NUM_GAUSSIANS": "32",
    "SEED": "0",
    "DEPTH": "0",
    "N_PARTS": "1",
    "PARTITION_METHOD": "lownn",
    "PRECISION": "single",
    "TRANSPORT": "inproc",
    "WORLD_SIZE": "1",
    "OUTPUT_DIR": "out",
    "OPTIMIZER": "adam",
    "LEARNING_RATE": "5e-3",
    "NUM_STEPS": "50",
    "PLATEAU_PATIENCE": "20",
    "PLATEAU_FACTOR": "0.5",
    "SYMMETRIZE": "false",
    "USE_GATE": "true",
    "MASTER_ADDR": "127.0.0.1",
    "MASTER_PORT": "29500",
    "LOG_LEVEL": "INFO",
    "LOG_FILE": "eqhamnet.log",
    "BENCH_REPEATS": "120",
    "BENCH_WARMUP": "20",
    "BENCH_BATCHES": "1,4,16,64,256,1024,4096,16384",
}

PARTITION_METHODS = ("lownn", "mincut", "both")
PRECISIONS = ("single", "double")
TRANSPORTS = ("inproc", "tcp")
OPTIMIZERS = ("adam", "sgd")


def parse_overrides(pairs: Iterable[str]) -> Dict[str, str]:
    overrides = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"Override must look like KEY=VALUE: {pair!r}")
        key, value = pair.split("=", 1)
        overrides[key.strip().upper()] = value.strip()
    return overrides


class Config:
    """Run configuration.

    Precedence: explicit overrides > key=value config file > ``EQH_*`` environment > defaults.
    """

    def __init__(self, config_file: Optional[str] = None, overrides: Optional[Dict[str, str]] = None):
        load_dotenv()

        values = dict(DEFAULTS)
        for key in DEFAULTS:
            env_value = os.getenv(f"{ENV_PREFIX}{key}")
            if env_value is not None:
                values[key] = env_value
        if config_file:
            if not os.path.exists(config_file):
                raise ConfigError(f"Config file not found: {config_file}")
            for key, value in dotenv_values(config_file).items():
                values[key.upper()] = value if value is not None else ""
        for key, value in (overrides or {}).items():
            values[key.upper()] = value

        unknown = sorted(set(values) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"Unknown configuration keys: {', '.join(unknown)}")

        try:
            # Inputs
            self.STRUCTURE_PATH = values["STRUCTURE_PATH"]
            self.BASIS_PATH = values["BASIS_PATH"]
            self.TARGET_PATH = values["TARGET_PATH"]
            self.CHECKPOINT_PATH = values["CHECKPOINT_PATH"]

            # Graph and model
            self.R_CUT = float(values["R_CUT"])
            self.L_MAX = int(values["L_MAX"])
            self.EMBED_DIM = int(values["EMBED_DIM"])
            self.NUM_LAYERS = int(values["NUM_LAYERS"])
            self.NUM_GAUSSIANS = int(values["NUM_GAUSSIANS"])
            self.SEED = int(values["SEED"])
            self.PRECISION = values["PRECISION"].lower()
            self.SYMMETRIZE = values["SYMMETRIZE"].lower() == "true"
            self.USE_GATE = values["USE_GATE"].lower() == "true"

            # Partitioning
            self.DEPTH = int(values["DEPTH"])
            self.N_PARTS = int(values["N_PARTS"])
            self.PARTITION_METHOD = values["PARTITION_METHOD"].lower()

            # Runtime
            self.TRANSPORT = values["TRANSPORT"].lower()
            self.WORLD_SIZE = int(values["WORLD_SIZE"])
            self.MASTER_ADDR = values["MASTER_ADDR"]
            self.MASTER_PORT = int(values["MASTER_PORT"])
            self.OUTPUT_DIR = values["OUTPUT_DIR"]

            # Training
            self.OPTIMIZER = values["OPTIMIZER"].lower()
            self.LEARNING_RATE = float(values["LEARNING_RATE"])
            self.NUM_STEPS = int(values["NUM_STEPS"])
            self.PLATEAU_PATIENCE = int(values["PLATEAU_PATIENCE"])
            self.PLATEAU_FACTOR = float(values["PLATEAU_FACTOR"])

            # Benchmark
            self.BENCH_REPEATS = int(values["BENCH_REPEATS"])
            self.BENCH_WARMUP = int(values["BENCH_WARMUP"])
            self.BENCH_BATCHES = [int(b) for b in values["BENCH_BATCHES"].split(",") if b.strip()]

            # Logging
            self.LOG_LEVEL = values["LOG_LEVEL"]
            self.LOG_FILE = values["LOG_FILE"]
        except ValueError as e:
            raise ConfigError(f"Invalid configuration value: {e}") from e

        # Validate configuration
        self._validate()

    def _validate(self):
        if not 0 <= self.L_MAX <= 6:
            raise ConfigError(f"L_MAX must be in 0..6, got {self.L_MAX}")
        for name in ("EMBED_DIM", "NUM_GAUSSIANS", "WORLD_SIZE", "N_PARTS"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.NUM_LAYERS < 0 or self.DEPTH < 0:
            raise ConfigError("NUM_LAYERS and DEPTH must be >= 0")
        if self.R_CUT <= 0:
            raise ConfigError("R_CUT must be positive")
        if self.LEARNING_RATE < 0:
            raise ConfigError("LEARNING_RATE must be >= 0")
        choices = {
            "PARTITION_METHOD": PARTITION_METHODS,
            "PRECISION": PRECISIONS,
            "TRANSPORT": TRANSPORTS,
            "OPTIMIZER": OPTIMIZERS,
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        for name in ("STRUCTURE_PATH", "BASIS_PATH", "TARGET_PATH", "CHECKPOINT_PATH"):
            path = getattr(self, name)
            if path and not os.path.exists(path):
                raise ConfigError(f"{name} does not exist: {path}")

    def snapshot(self) -> Dict[str, object]:
        return {key: getattr(self, key) for key in DEFAULTS}

    def require(self, *names: str) -> List[str]:
        missing = [name for name in names if not getattr(self, name)]
        if missing:
            raise ConfigError(f"Missing required configuration: {', '.join(missing)}")
        return [getattr(self, name) for name in names]
