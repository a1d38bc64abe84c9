"""Synthetic ground truth: random DAGs with a target edge density, random
CPD parameters, ancestral sampling, and dataset file IO.

Graphs are drawn by sampling a uniformly random topological order and
including each order-respecting pair independently, which matches the
target expected edge count while being acyclic by construction.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import models
from .dags import DagState, state_from_adjacency, state_from_hex
from .models import Dataset, ModelConfig, ParamSet


@dataclass(frozen=True)
class GenConfig:
    d: int
    expected_edges_per_node: float = 1.0  # 1 for ER1, 2 for ER2
    n: int = 100
    n_heldout: int = 0
    kind: str = models.LINEAR
    noise_variance: float = 0.01
    mlp_hidden: int = 5
    seed: int = 0

    @property
    def edge_probability(self) -> float:
        pairs = self.d * (self.d - 1) / 2
        if pairs == 0:
            return 0.0
        return min(1.0, max(0.0, self.expected_edges_per_node * self.d / pairs))

    def model_config(self) -> ModelConfig:
        return ModelConfig(kind=self.kind, obs_variance=self.noise_variance,
                           mlp_hidden=self.mlp_hidden)


def sample_er_dag(cfg: GenConfig, rng: np.random.Generator) -> DagState:
    """Random DAG: uniform topological order, independent order-respecting
    edges with probability ``cfg.edge_probability``."""
    order = rng.permutation(cfg.d)
    adjacency = np.zeros((cfg.d, cfg.d), dtype=bool)
    p = cfg.edge_probability
    for a in range(cfg.d):
        for b in range(a + 1, cfg.d):
            if rng.random() < p:
                adjacency[order[a], order[b]] = True
    return state_from_adjacency(adjacency)


def sample_ground_truth_params(G: DagState, cfg: GenConfig,
                               rng: np.random.Generator) -> ParamSet:
    """Standard-Normal draws on the active coordinates, zeros elsewhere."""
    model_cfg = cfg.model_config()
    act = models.active_mask(G, model_cfg)
    values = np.zeros(act.shape)
    values[act] = rng.standard_normal(int(act.sum()))
    return ParamSet(values)


def _node_mean(theta_row: np.ndarray, masked_x: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Mean of one node's CPD given its (already masked) inputs, (N,) out."""
    if cfg.kind == models.LINEAR:
        return masked_x @ theta_row
    sl = models.mlp_slices(cfg, masked_x.shape[1])
    m = cfg.mlp_hidden
    w1 = theta_row[sl["w1"]].reshape(m, masked_x.shape[1])
    b1 = theta_row[sl["b1"]]
    w2 = theta_row[sl["w2"]]
    b2 = theta_row[sl["b2"]][0]
    hidden = np.maximum(masked_x @ w1.T + b1, 0.0)
    return hidden @ w2 + b2


def topological_order(G: DagState) -> np.ndarray:
    """One valid topological order (ancestor counts are monotone along edges)."""
    return np.argsort(G.closure.sum(axis=0), kind="stable")


def ancestral_sample(G: DagState, theta: ParamSet, cfg: GenConfig, n: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Sample n observations by visiting nodes in topological order."""
    model_cfg = cfg.model_config()
    x = np.zeros((n, G.d))
    scale = math.sqrt(cfg.noise_variance)
    parent_mask = G.adjacency.T.astype(np.float64)
    for i in topological_order(G):
        mean = _node_mean(theta.per_node[i], x * parent_mask[i], model_cfg)
        x[:, i] = mean + scale * rng.standard_normal(n)
    return x


def generate(cfg: GenConfig) -> tuple[DagState, ParamSet, Dataset]:
    """Ground-truth graph, parameters, and sampled train/held-out data."""
    rng = np.random.default_rng(cfg.seed)
    graph = sample_er_dag(cfg, rng)
    theta = sample_ground_truth_params(graph, cfg, rng)
    observations = ancestral_sample(graph, theta, cfg, cfg.n, rng)
    heldout = (ancestral_sample(graph, theta, cfg, cfg.n_heldout, rng)
               if cfg.n_heldout > 0 else None)
    return graph, theta, Dataset(observations, heldout)


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------


def write_matrix_csv(path, matrix: np.ndarray) -> None:
    """Header X1..Xd, one row per observation, full round-trip precision."""
    matrix = np.asarray(matrix, dtype=np.float64)
    with open(path, "w") as fh:
        fh.write(",".join(f"X{k + 1}" for k in range(matrix.shape[1])) + "\n")
        for row in matrix:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_matrix_csv(path) -> np.ndarray:
    with open(path) as fh:
        header = fh.readline().rstrip("\n")
        columns = header.split(",")
        expected = [f"X{k + 1}" for k in range(len(columns))]
        if columns != expected:
            raise ValueError(f"{path}:1: malformed header {header!r}")
        rows = []
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if len(cells) != len(columns):
                raise ValueError(f"{path}:{lineno}: expected {len(columns)} cells, "
                                 f"got {len(cells)}")
            try:
                rows.append([float(c) for c in cells])
            except ValueError as err:
                raise ValueError(f"{path}:{lineno}: {err}") from None
    return np.array(rows, dtype=np.float64).reshape(-1, len(columns))


def write_dataset(path, data: Dataset) -> None:
    write_matrix_csv(path, data.observations)


def read_dataset(path, heldout_path=None) -> Dataset:
    heldout = read_matrix_csv(heldout_path) if heldout_path else None
    return Dataset(read_matrix_csv(path), heldout)


def write_ground_truth(path, graph: DagState, theta: ParamSet, cfg: GenConfig) -> None:
    doc = {
        "d": graph.d,
        "adjacency_hex": graph.to_hex(),
        "theta": theta.per_node.tolist(),
        "config": {
            "d": cfg.d,
            "expected_edges_per_node": cfg.expected_edges_per_node,
            "n": cfg.n,
            "n_heldout": cfg.n_heldout,
            "kind": cfg.kind,
            "noise_variance": cfg.noise_variance,
            "mlp_hidden": cfg.mlp_hidden,
            "seed": cfg.seed,
        },
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)


def read_ground_truth(path) -> tuple[DagState, ParamSet, GenConfig]:
    with open(path) as fh:
        doc = json.load(fh)
    graph = state_from_hex(doc["adjacency_hex"], doc["d"])
    theta = ParamSet(np.array(doc["theta"], dtype=np.float64))
    cfg = GenConfig(**doc["config"])
    return graph, theta, cfg
