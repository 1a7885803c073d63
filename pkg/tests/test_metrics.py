import csv
import itertools
import logging

import pytest

from eqhamnet.core.exceptions import ShapeError, UsageError
from eqhamnet.middleware.logger import setup_logger
from eqhamnet.middleware.timing import PhaseTimer, write_timings_csv
from eqhamnet.services.bench_service import (
    ThroughputRow,
    measure_throughput,
    message_nbytes,
    saturation_batch,
    write_throughput_csv,
)
from eqhamnet.services.schemas import THROUGHPUT_HEADER, TIMING_HEADER, check_csv_header


def ticking_clock(step: float):
    counter = itertools.count()
    return lambda: next(counter) * step


# Phase timers

def test_phase_timer_accumulates():
    timer = PhaseTimer(rank=2, clock=ticking_clock(0.25))
    with timer.phase(0, "compute"):
        pass
    with timer.phase(0, "compute"):
        pass
    with timer.phase(1, "sendrecv"):
        pass
    assert timer.totals() == {(0, "compute"): 0.5, (1, "sendrecv"): 0.25}
    assert all(r.rank == 2 for r in timer.records)


def test_phase_timer_records_on_error():
    timer = PhaseTimer(clock=ticking_clock(1.0))
    with pytest.raises(RuntimeError):
        with timer.phase(0, "pack"):
            raise RuntimeError("boom")
    assert timer.totals() == {(0, "pack"): 1.0}


def test_unknown_phase_rejected():
    with pytest.raises(UsageError, match="idle"):
        with PhaseTimer().phase(0, "idle"):
            pass


def test_byte_counts_and_reset():
    timer = PhaseTimer()
    timer.count_bytes(1, 100)
    timer.count_bytes(1, 50)
    timer.count_bytes(3, 10)
    assert timer.bytes_sent == {1: 150, 3: 10}
    timer.reset()
    assert timer.bytes_sent == {} and timer.records == []


def test_timings_csv(tmp_path):
    first, second = PhaseTimer(rank=1, clock=ticking_clock(0.5)), PhaseTimer(rank=0, clock=ticking_clock(0.5))
    for timer in (first, second):
        with timer.phase(0, "compute"):
            pass
        with timer.phase(0, "compute"):
            pass
    path = tmp_path / "timings.csv"
    write_timings_csv(str(path), [first, second])
    check_csv_header(str(path), TIMING_HEADER)
    with open(path, newline="") as handle:
        rows = list(csv.DictReader(handle))
    assert [r["rank"] for r in rows] == ["0", "1"]
    assert float(rows[0]["seconds"]) == pytest.approx(1.0)

    write_timings_csv(str(path), [first], aggregate=False)
    assert len(path.read_text().splitlines()) == 3


def test_csv_header_mismatch(tmp_path):
    path = tmp_path / "other.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(ShapeError):
        check_csv_header(str(path), TIMING_HEADER)


# Throughput

def test_message_size():
    assert message_nbytes(4, 16) == 4800
    assert message_nbytes(4, 16, "double") == 9600


def test_throughput_with_stubbed_clock(mocker):
    clock = mocker.Mock(side_effect=[i * 0.5 for i in range(2 * (2 + 3) * 2)])
    rows = measure_throughput(l_max=2, embed_dim=2, batches=[1, 8], repeats=3, warmup=2, clock=clock)
    assert clock.call_count == 20
    assert [r.batch for r in rows] == [1, 8]
    assert rows[0].median_seconds == pytest.approx(0.5)
    assert rows[1].messages_per_second == pytest.approx(16.0)


def test_saturation_batch():
    rows = [ThroughputRow(1, 1.0, 10.0), ThroughputRow(4, 1.0, 92.0), ThroughputRow(16, 1.0, 100.0)]
    assert saturation_batch(rows) == 4
    assert saturation_batch(rows, fraction=0.95) == 16
    assert saturation_batch([]) is None


def test_throughput_csv(tmp_path):
    path = tmp_path / "throughput.csv"
    write_throughput_csv(str(path), [ThroughputRow(1, 0.002, 500.0), ThroughputRow(2, 0.002, 1000.0)])
    check_csv_header(str(path), THROUGHPUT_HEADER)
    assert len(path.read_text().splitlines()) == 3


# Logging

def test_worker_ranks_get_their_own_log_file(tmp_path):
    log_file = tmp_path / "logs" / "run.log"
    logger = setup_logger("DEBUG", str(log_file), rank=2)
    logging.getLogger("eqhamnet.test").info("hello from rank 2")
    for handler in logger.handlers:
        handler.flush()
    assert (tmp_path / "logs" / "run.log.rank2").exists()
    assert not log_file.exists()
    assert logger.level == logging.DEBUG
    setup_logger("INFO")
    assert sum(getattr(h, "_eqhamnet", False) for h in logging.getLogger().handlers) == 1
