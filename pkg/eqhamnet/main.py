import logging
import os
import sys

import click

from eqhamnet.commands.bench_commands import init_bench_commands
from eqhamnet.commands.graph_commands import init_graph_commands
from eqhamnet.commands.model_commands import init_model_commands
from eqhamnet.commands.partition_commands import init_partition_commands
from eqhamnet.commands.synthetic_commands import init_synthetic_commands
from eqhamnet.config.settings import Config, parse_overrides
from eqhamnet.core.exceptions import EqhamnetError
from eqhamnet.middleware.logger import setup_logger

logger = logging.getLogger(__name__)


@click.group()
@click.option("--config", "config_file", type=click.Path(exists=True, dir_okay=False),
              help="key=value configuration file")
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE", help="Override one setting")
@click.option("--log-level", default=None, help="Overrides LOG_LEVEL")
@click.option("--output-dir", default=None, help="Overrides OUTPUT_DIR")
@click.pass_context
def cli(ctx, config_file, overrides, log_level, output_dir):
    """Distributed equivariant message passing for Hamiltonian block prediction."""
    try:
        values = parse_overrides(overrides)
        if output_dir:
            values["OUTPUT_DIR"] = output_dir
        if log_level:
            values["LOG_LEVEL"] = log_level
        config = Config(config_file, values)
    except EqhamnetError as e:
        click.echo(f"Error: {e.message}", err=True)
        ctx.exit(e.exit_code)

    rank = int(os.environ.get("RANK", "0")) if ctx.invoked_subcommand == "rank-worker" else None
    setup_logger(config.LOG_LEVEL, config.LOG_FILE or None, rank)

    # worker processes are started with the same global options
    argv = ["--config", config_file] if config_file else []
    for key, value in values.items():
        argv += ["--set", f"{key}={value}"]
    ctx.obj = {"config": config, "argv": argv}


for init_commands in (
    init_graph_commands,
    init_partition_commands,
    init_model_commands,
    init_bench_commands,
    init_synthetic_commands,
):
    for command in init_commands():
        cli.add_command(command)


def main():
    try:
        cli(prog_name="eqhamnet")
    except KeyboardInterrupt:
        logger.info("Interrupted")
        sys.exit(130)


if __name__ == "__main__":
    main()
