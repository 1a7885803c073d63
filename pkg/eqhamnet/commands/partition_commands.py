import logging
import os

import click

from eqhamnet.core.exceptions import EqhamnetError
from eqhamnet.services.partition_service import (
    run_partition,
    write_assignment,
    write_metrics_json,
    write_topology_dot,
)
from eqhamnet.services.structure_service import build_graph, load_structure

logger = logging.getLogger(__name__)


def init_partition_commands():
    @click.command("partition")
    @click.option("--method", type=click.Choice(["lownn", "mincut", "both"]), default=None,
                  help="Overrides PARTITION_METHOD")
    @click.option("--depth", type=int, default=None, help="Overrides DEPTH")
    @click.option("--parts", "n_parts", type=int, default=None, help="Part count; defaults to 2**depth")
    @click.pass_context
    def partition_command(ctx, method, depth, n_parts):
        """Partition the atomic graph and write assignment, metrics and topology files per method."""
        config = ctx.obj["config"]
        method = method or config.PARTITION_METHOD
        depth = config.DEPTH if depth is None else depth
        if n_parts is None and config.N_PARTS > 1:
            n_parts = config.N_PARTS
        try:
            (structure_path,) = config.require("STRUCTURE_PATH")
            structure = load_structure(structure_path)
            graph = build_graph(structure, config.R_CUT)
            os.makedirs(config.OUTPUT_DIR, exist_ok=True)
            methods = ["lownn", "mincut"] if method == "both" else [method]
            for name in methods:
                assignment, metrics = run_partition(name, structure, graph, depth, n_parts, config.SEED)
                write_assignment(assignment, os.path.join(config.OUTPUT_DIR, f"assignment_{name}.txt"))
                write_metrics_json(metrics, os.path.join(config.OUTPUT_DIR, f"metrics_{name}.json"))
                write_topology_dot(metrics, os.path.join(config.OUTPUT_DIR, f"topology_{name}.dot"))
                click.echo(
                    f"{name}: {metrics.n_parts} parts, node imbalance {metrics.node_imbalance:.3f}, "
                    f"edge imbalance {metrics.edge_imbalance:.3f}, mean neighbors {metrics.mean_neighbors:.2f}, "
                    f"{metrics.wall_time:.3f}s"
                )
        except EqhamnetError as e:
            logger.error(f"partition failed: {e.message}", exc_info=True)
            ctx.exit(e.exit_code)

    return [partition_command]
