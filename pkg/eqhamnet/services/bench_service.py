import csv
import logging
import statistics
import time
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch

from eqhamnet.network.model import DTYPES
from eqhamnet.network.rotation import EdgeRotations
from eqhamnet.network.so2 import MessageBatch, SO2Block
from eqhamnet.services.schemas import THROUGHPUT_HEADER

logger = logging.getLogger(__name__)


def message_nbytes(l_max: int, embed_dim: int, precision: str = "single") -> int:
    """Wire size of one message: source, target and edge embeddings."""
    itemsize = torch.tensor([], dtype=DTYPES[precision]).element_size()
    return 3 * (l_max + 1) ** 2 * embed_dim * itemsize


@dataclass
class ThroughputRow:
    batch: int
    median_seconds: float
    messages_per_second: float


def _message_batch(batch: int, l_max: int, embed_dim: int, dtype: torch.dtype, seed: int):
    rng = np.random.default_rng(seed)
    directions = rng.normal(size=(batch, 3))
    rotations = EdgeRotations.from_displacements(directions, l_max, dtype)
    generator = torch.Generator().manual_seed(seed)
    data = torch.randn((batch, 3, (l_max + 1) ** 2, embed_dim), generator=generator, dtype=torch.float64)
    return MessageBatch(data.to(dtype), torch.arange(batch)), rotations


def measure_throughput(l_max: int, embed_dim: int, batches: Sequence[int], repeats: int = 120,
                       warmup: int = 20, precision: str = "single", seed: int = 0,
                       clock: Callable[[], float] = time.perf_counter) -> List[ThroughputRow]:
    """Median wall time of one SO(2) block over ``repeats`` runs per batch size, after ``warmup`` runs."""
    dtype = DTYPES[precision]
    block = SO2Block(l_max, embed_dim).to(dtype)
    block.eval()
    rows = []
    for batch in batches:
        messages, rotations = _message_batch(batch, l_max, embed_dim, dtype, seed)
        samples = []
        with torch.no_grad():
            for run in range(warmup + repeats):
                start = clock()
                block(messages, rotations)
                elapsed = clock() - start
                if run >= warmup:
                    samples.append(elapsed)
        median = statistics.median(samples)
        rate = batch / median if median > 0 else float("inf")
        rows.append(ThroughputRow(batch, median, rate))
        logger.info(f"batch {batch}: median {median * 1e3:.3f} ms, {rate:.3e} messages/s")
    return rows


def saturation_batch(rows: Sequence[ThroughputRow], fraction: float = 0.9) -> Optional[int]:
    """Smallest batch whose throughput reaches ``fraction`` of the peak."""
    if not rows:
        return None
    peak = max(r.messages_per_second for r in rows)
    return min(r.batch for r in rows if r.messages_per_second >= fraction * peak)


def write_throughput_csv(path: str, rows: Sequence[ThroughputRow]):
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(THROUGHPUT_HEADER)
        for r in rows:
            writer.writerow([r.batch, f"{r.median_seconds:.9e}", f"{r.messages_per_second:.6e}"])
