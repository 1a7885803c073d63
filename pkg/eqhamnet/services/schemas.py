"""JSON Schemas of the emitted documents and the header contracts of the emitted CSV files."""

import csv
from typing import Sequence

from eqhamnet.core.exceptions import ShapeError

_COUNT = {"type": "integer", "minimum": 0}
_INT_LIST = {"type": "array", "items": _COUNT}

PARTITION_METRICS_SCHEMA = {
    "type": "object",
    "required": ["method", "n_parts", "node_imbalance", "edge_imbalance", "total_communicated", "parts"],
    "properties": {
        "method": {"enum": ["lownn", "mincut"]},
        "n_parts": {"type": "integer", "minimum": 1},
        "node_imbalance": {"type": "number", "minimum": 1.0},
        "edge_imbalance": {"type": "number", "minimum": 1.0},
        "total_communicated": _COUNT,
        "mean_neighbors": {"type": "number", "minimum": 0.0},
        "wall_time": {"type": "number", "minimum": 0.0},
        "parts": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["part", "nodes", "edges", "neighbor_count", "recv_volume", "neighbors"],
                "properties": {
                    "part": _COUNT,
                    "nodes": _COUNT,
                    "edges": _COUNT,
                    "neighbor_count": _COUNT,
                    "recv_volume": _COUNT,
                    "neighbors": _INT_LIST,
                },
            },
        },
        "traffic": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["src", "dst", "embeddings"],
                "properties": {"src": _COUNT, "dst": _COUNT, "embeddings": _COUNT},
            },
        },
    },
}

GRAPH_SUMMARY_SCHEMA = {
    "type": "object",
    "required": ["n_nodes", "n_edges", "r_cut", "mean_degree", "max_degree", "distance_histogram"],
    "properties": {
        "n_nodes": {"type": "integer", "minimum": 1},
        "n_edges": _COUNT,
        "r_cut": {"type": "number", "exclusiveMinimum": 0},
        "mean_degree": {"type": "number", "minimum": 0},
        "max_degree": _COUNT,
        "isolated_nodes": _COUNT,
        "n_orb": _COUNT,
        "distance_histogram": {
            "type": "object",
            "required": ["bin_edges", "counts"],
            "properties": {
                "bin_edges": {"type": "array", "items": {"type": "number"}},
                "counts": _INT_LIST,
            },
        },
    },
}

RUN_REPORT_SCHEMA = {
    "type": "object",
    "required": ["command", "world_size", "n_nodes", "n_edges", "n_blocks", "exchanges", "bytes_sent"],
    "properties": {
        "command": {"enum": ["forward", "train"]},
        "world_size": {"type": "integer", "minimum": 1},
        "n_nodes": _COUNT,
        "n_edges": _COUNT,
        "n_blocks": _COUNT,
        "exchanges": _COUNT,
        "bytes_sent": _INT_LIST,
        "parameter_hash": {"type": "string"},
        "loss": {"type": ["number", "null"]},
        "node_mae": {"type": ["number", "null"]},
        "edge_mae": {"type": ["number", "null"]},
        "steps": _COUNT,
        "settings": {"type": "object"},
    },
}

LOSS_CURVE_HEADER = ["step", "loss", "learning_rate", "node_mae", "edge_mae"]
TIMING_HEADER = ["rank", "layer", "phase", "seconds"]
THROUGHPUT_HEADER = ["batch", "median_seconds", "messages_per_second"]
BLOCK_DISTANCE_HEADER = ["src", "dst", "distance", "max_abs"]


def check_csv_header(path: str, expected: Sequence[str]):
    with open(path, newline="") as handle:
        header = next(csv.reader(handle), [])
    if header != list(expected):
        raise ShapeError(f"{path} has header {header}, expected {list(expected)}")
