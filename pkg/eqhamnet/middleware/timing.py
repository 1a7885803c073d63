import csv
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Tuple

from eqhamnet.core.exceptions import UsageError

PHASES = ("pack", "sendrecv", "unpack", "compute")


@dataclass
class PhaseRecord:
    rank: int
    layer: int
    phase: str
    seconds: float


@dataclass
class PhaseTimer:
    """Accumulates per-(layer, phase) wall time for one rank."""

    rank: int = 0
    clock: Callable[[], float] = time.perf_counter
    records: List[PhaseRecord] = field(default_factory=list)
    bytes_sent: Dict[int, int] = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @contextmanager
    def phase(self, layer: int, name: str) -> Iterator[None]:
        if name not in PHASES:
            raise UsageError(f"Unknown phase: {name}")
        start = self.clock()
        try:
            yield
        finally:
            self.add(layer, name, self.clock() - start)

    def add(self, layer: int, name: str, seconds: float):
        with self._lock:
            self.records.append(PhaseRecord(self.rank, layer, name, seconds))

    def count_bytes(self, peer: int, nbytes: int):
        with self._lock:
            self.bytes_sent[peer] = self.bytes_sent.get(peer, 0) + nbytes

    def totals(self) -> Dict[Tuple[int, str], float]:
        out: Dict[Tuple[int, str], float] = {}
        for rec in self.records:
            key = (rec.layer, rec.phase)
            out[key] = out.get(key, 0.0) + rec.seconds
        return out

    def reset(self):
        with self._lock:
            self.records.clear()
            self.bytes_sent.clear()


def write_timings_csv(path: str, timers: List[PhaseTimer], aggregate: bool = True):
    """Write (rank, layer, phase, seconds) rows; with `aggregate` the records are summed per key."""
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["rank", "layer", "phase", "seconds"])
        for timer in sorted(timers, key=lambda t: t.rank):
            if aggregate:
                for (layer, name), seconds in sorted(timer.totals().items()):
                    writer.writerow([timer.rank, layer, name, f"{seconds:.9f}"])
            else:
                for rec in timer.records:
                    writer.writerow([rec.rank, rec.layer, rec.phase, f"{rec.seconds:.9f}"])
