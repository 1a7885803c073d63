import json
import logging
import os

import click
from jsonschema import validate

from eqhamnet.core.exceptions import EqhamnetError
from eqhamnet.models.structure import BasisSpec
from eqhamnet.services.schemas import GRAPH_SUMMARY_SCHEMA
from eqhamnet.services.structure_service import build_graph, graph_summary, load_structure, tile, write_extxyz

logger = logging.getLogger(__name__)


def init_graph_commands():
    @click.command("build-graph")
    @click.pass_context
    def build_graph_command(ctx):
        """Build the periodic neighbor graph and write graph_summary.json."""
        config = ctx.obj["config"]
        try:
            (structure_path,) = config.require("STRUCTURE_PATH")
            structure = load_structure(structure_path)
            graph = build_graph(structure, config.R_CUT)
            summary = graph_summary(graph)
            if config.BASIS_PATH:
                basis = BasisSpec.from_file(config.BASIS_PATH)
                basis.check_species(structure.species)
                summary["n_orb"] = basis.n_orb_total(structure.species)
            validate(instance=summary, schema=GRAPH_SUMMARY_SCHEMA)
            os.makedirs(config.OUTPUT_DIR, exist_ok=True)
            path = os.path.join(config.OUTPUT_DIR, "graph_summary.json")
            with open(path, "w") as handle:
                json.dump(summary, handle, indent=2)
            click.echo(
                f"{summary['n_nodes']} nodes, {summary['n_edges']} edges, "
                f"mean degree {summary['mean_degree']:.2f} -> {path}"
            )
        except EqhamnetError as e:
            logger.error(f"build-graph failed: {e.message}", exc_info=True)
            ctx.exit(e.exit_code)

    @click.command("tile")
    @click.option("--nx", default=1, show_default=True, type=int)
    @click.option("--ny", default=1, show_default=True, type=int)
    @click.option("--nz", default=1, show_default=True, type=int)
    @click.option("--output", "output_path", default=None, help="Defaults to <output-dir>/tiled.xyz")
    @click.pass_context
    def tile_command(ctx, nx, ny, nz, output_path):
        """Replicate the structure nx x ny x nz times along its lattice vectors."""
        config = ctx.obj["config"]
        try:
            (structure_path,) = config.require("STRUCTURE_PATH")
            tiled = tile(load_structure(structure_path), nx, ny, nz)
            if output_path is None:
                os.makedirs(config.OUTPUT_DIR, exist_ok=True)
                output_path = os.path.join(config.OUTPUT_DIR, "tiled.xyz")
            write_extxyz(tiled, output_path)
            click.echo(f"{tiled.n_atoms} atoms -> {output_path}")
        except EqhamnetError as e:
            logger.error(f"tile failed: {e.message}", exc_info=True)
            ctx.exit(e.exit_code)

    return [build_graph_command, tile_command]
