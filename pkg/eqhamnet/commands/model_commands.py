import logging
import os

import click

from eqhamnet.core.exceptions import EqhamnetError
from eqhamnet.core.transport import TcpTransport
from eqhamnet.services.run_service import RunService
from eqhamnet.services.runtime_service import launch_ranks

logger = logging.getLogger(__name__)


def _launch(ctx, command: str) -> bool:
    """Spawn TCP rank processes when configured; returns True if they ran the command."""
    config = ctx.obj["config"]
    if config.TRANSPORT != "tcp" or config.WORLD_SIZE == 1:
        return False
    code = launch_ranks([*ctx.obj["argv"], "rank-worker", command], config.WORLD_SIZE,
                        config.MASTER_ADDR, config.MASTER_PORT)
    if code:
        logger.error(f"{command} failed on at least one rank (exit code {code})")
        ctx.exit(code)
    click.echo(f"{command} finished on {config.WORLD_SIZE} ranks -> {config.OUTPUT_DIR}")
    return True


def init_model_commands():
    @click.command("forward")
    @click.pass_context
    def forward_command(ctx):
        """Predict Hamiltonian blocks; writes predictions, the assembled matrix, timings and a report."""
        config = ctx.obj["config"]
        try:
            if _launch(ctx, "forward"):
                return
            report = RunService(config).forward()
            click.echo(
                f"{report['n_blocks']} blocks on {report['world_size']} rank(s), "
                f"{report['exchanges']} exchanges -> {config.OUTPUT_DIR}"
            )
        except EqhamnetError as e:
            logger.error(f"forward failed: {e.message}", exc_info=True)
            ctx.exit(e.exit_code)

    @click.command("train")
    @click.pass_context
    def train_command(ctx):
        """Full-batch training against TARGET_PATH; writes the loss curve, timings and a checkpoint."""
        config = ctx.obj["config"]
        try:
            if _launch(ctx, "train"):
                return
            report = RunService(config).train()
            click.echo(f"{report['steps']} steps, final loss {report['loss']:.6e} -> {config.OUTPUT_DIR}")
        except EqhamnetError as e:
            logger.error(f"train failed: {e.message}", exc_info=True)
            ctx.exit(e.exit_code)

    @click.command("rank-worker", hidden=True)
    @click.argument("command", type=click.Choice(["forward", "train"]))
    @click.pass_context
    def rank_worker_command(ctx, command):
        """One rank of a multi-process run; RANK, WORLD_SIZE, MASTER_ADDR and MASTER_PORT come from the environment."""
        config = ctx.obj["config"]
        transport = None
        try:
            rank = int(os.environ["RANK"])
            world_size = int(os.environ.get("WORLD_SIZE", config.WORLD_SIZE))
            transport = TcpTransport(
                rank, world_size,
                os.environ.get("MASTER_ADDR", config.MASTER_ADDR),
                int(os.environ.get("MASTER_PORT", config.MASTER_PORT)),
            )
            RunService(config).run_rank(transport, command)
        except KeyError:
            raise click.UsageError("rank-worker needs RANK in the environment")
        except EqhamnetError as e:
            logger.error(f"rank-worker {command} failed: {e.message}", exc_info=True)
            ctx.exit(e.exit_code)
        finally:
            if transport is not None:
                transport.close()

    return [forward_command, train_command, rank_worker_command]
