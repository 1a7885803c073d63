import logging

import click

from eqhamnet.core.exceptions import EqhamnetError
from eqhamnet.services.synthetic_service import SyntheticSpec, generate

logger = logging.getLogger(__name__)


def init_synthetic_commands():
    @click.command("gen-synthetic")
    @click.option("--nx", default=5, show_default=True, type=int)
    @click.option("--ny", default=5, show_default=True, type=int)
    @click.option("--nz", default=2, show_default=True, type=int)
    @click.option("--spacing", default=2.2, show_default=True, type=float, help="Lattice constant in Angstrom")
    @click.option("--jitter", default=0.1, show_default=True, type=float, help="Max displacement per axis")
    @click.option("--decay", default=1.5, show_default=True, type=float, help="Off-site decay length")
    @click.pass_context
    def gen_synthetic_command(ctx, nx, ny, nz, spacing, jitter, decay):
        """Write a jittered lattice, its basis and a toy analytic Hamiltonian."""
        config = ctx.obj["config"]
        try:
            spec = SyntheticSpec(shape=(nx, ny, nz), spacing=spacing, jitter=jitter, decay=decay, seed=config.SEED)
            paths = generate(config.OUTPUT_DIR, spec, config.R_CUT)
            for name, path in paths.items():
                click.echo(f"{name}: {path}")
        except EqhamnetError as e:
            logger.error(f"gen-synthetic failed: {e.message}", exc_info=True)
            ctx.exit(e.exit_code)

    return [gen_synthetic_command]
