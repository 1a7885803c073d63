import logging
import os

import click

from eqhamnet.core.exceptions import EqhamnetError
from eqhamnet.services.bench_service import (
    measure_throughput,
    message_nbytes,
    saturation_batch,
    write_throughput_csv,
)

logger = logging.getLogger(__name__)


def init_bench_commands():
    @click.command("bench-throughput")
    @click.option("--batches", default=None, help="Comma-separated batch sizes; overrides BENCH_BATCHES")
    @click.pass_context
    def bench_throughput_command(ctx, batches):
        """Time one SO(2) block over message batches of increasing size."""
        config = ctx.obj["config"]
        try:
            sizes = [int(b) for b in batches.split(",")] if batches else config.BENCH_BATCHES
        except ValueError:
            raise click.BadParameter(f"not a list of integers: {batches}", param_hint="--batches")
        try:
            nbytes = message_nbytes(config.L_MAX, config.EMBED_DIM, config.PRECISION)
            click.echo(f"message size: {nbytes} bytes (l_max={config.L_MAX}, E={config.EMBED_DIM})")
            rows = measure_throughput(
                config.L_MAX, config.EMBED_DIM, sizes, repeats=config.BENCH_REPEATS,
                warmup=config.BENCH_WARMUP, precision=config.PRECISION, seed=config.SEED,
            )
            os.makedirs(config.OUTPUT_DIR, exist_ok=True)
            path = os.path.join(config.OUTPUT_DIR, "throughput.csv")
            write_throughput_csv(path, rows)
            click.echo(f"saturation batch: {saturation_batch(rows)} -> {path}")
        except EqhamnetError as e:
            logger.error(f"bench-throughput failed: {e.message}", exc_info=True)
            ctx.exit(e.exit_code)

    return [bench_throughput_command]
