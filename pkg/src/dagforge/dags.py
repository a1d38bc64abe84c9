"""DAG construction state space: one edge at a time, acyclicity enforced.

A state is a DAG under construction together with its reflexive-transitive
closure, which is maintained incrementally so that cycle checks and action
masks cost a vectorized O(d^2) per edge insertion instead of a graph search
per step. States are immutable values; applying an action returns a new
state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np


@dataclass(frozen=True)
class Action:
    """Either add the edge ``source -> target``, or stop (both None)."""

    source: int | None = None
    target: int | None = None

    @property
    def is_stop(self) -> bool:
        return self.source is None


STOP = Action()


@dataclass(frozen=True, eq=False)
class DagState:
    d: int
    adjacency: np.ndarray  # (d, d) bool; adjacency[i, j] == edge i -> j
    closure: np.ndarray    # (d, d) bool; closure[i, j] == path i ~> j, incl. i == j
    num_edges: int

    def __post_init__(self):
        self.adjacency.flags.writeable = False
        self.closure.flags.writeable = False

    @cached_property
    def key(self) -> bytes:
        """Compact row-major bit encoding of the adjacency matrix."""
        return np.packbits(self.adjacency).tobytes()

    @cached_property
    def mask(self) -> np.ndarray:
        """Valid AddEdge actions: absent edges whose insertion keeps acyclicity."""
        m = ~self.adjacency & ~self.closure.T
        m.flags.writeable = False
        return m

    def __eq__(self, other) -> bool:
        if not isinstance(other, DagState):
            return NotImplemented
        return self.d == other.d and self.key == other.key

    def __hash__(self) -> int:
        return hash((self.d, self.key))

    def edges(self) -> list[tuple[int, int]]:
        return [(int(i), int(j)) for i, j in zip(*np.nonzero(self.adjacency))]

    def to_hex(self) -> str:
        return self.key.hex()

    def to_csv_rows(self) -> list[str]:
        """Row-major 0/1 CSV lines of the adjacency matrix."""
        return [",".join("1" if x else "0" for x in row) for row in self.adjacency]


def empty_state(d: int) -> DagState:
    if d < 1:
        raise ValueError(f"node count must be >= 1, got {d}")
    return DagState(
        d=d,
        adjacency=np.zeros((d, d), dtype=bool),
        closure=np.eye(d, dtype=bool),
        num_edges=0,
    )


def state_from_adjacency(adjacency: np.ndarray) -> DagState:
    """Build a state from a full adjacency matrix, recomputing the closure.

    Raises if the graph has a cycle (closure would contain a 2-cycle).
    """
    adjacency = np.asarray(adjacency, dtype=bool)
    d = adjacency.shape[0]
    if adjacency.shape != (d, d):
        raise ValueError("adjacency must be square")
    if adjacency.diagonal().any():
        raise ValueError("self-loops are not allowed")
    closure = _warshall_closure(adjacency)
    off = ~np.eye(d, dtype=bool)
    if np.any(closure & closure.T & off):
        raise ValueError("adjacency contains a cycle")
    return DagState(d=d, adjacency=adjacency.copy(), closure=closure,
                    num_edges=int(adjacency.sum()))


def state_from_hex(hex_string: str, d: int) -> DagState:
    raw = np.frombuffer(bytes.fromhex(hex_string), dtype=np.uint8)
    bits = np.unpackbits(raw)[: d * d].astype(bool).reshape(d, d)
    return state_from_adjacency(bits)


def _warshall_closure(adjacency: np.ndarray) -> np.ndarray:
    d = adjacency.shape[0]
    closure = adjacency | np.eye(d, dtype=bool)
    for k in range(d):
        closure |= np.outer(closure[:, k], closure[k, :])
    return closure


def action_mask(s: DagState, max_parents: int | None = None) -> np.ndarray:
    """Boolean matrix of legal AddEdge actions; entry (i, j) allows i -> j.

    ``max_parents`` optionally filters out targets already at the in-degree
    cap. Stop is always available and handled by the policy, not the mask.
    """
    if max_parents is None:
        return s.mask
    indegree = s.adjacency.sum(axis=0)
    return s.mask & (indegree < max_parents)[None, :]


def apply_add_edge(s: DagState, i: int, j: int) -> DagState:
    """Add edge i -> j, updating the closure incrementally."""
    if not s.mask[i, j]:
        raise ValueError(f"illegal transition: adding edge {i}->{j}")
    adjacency = s.adjacency.copy()
    adjacency[i, j] = True
    # Every ancestor of i (including i) now reaches every descendant of j.
    closure = s.closure | np.outer(s.closure[:, i], s.closure[j, :])
    return DagState(d=s.d, adjacency=adjacency, closure=closure,
                    num_edges=s.num_edges + 1)


def remove_edge(s: DagState, i: int, j: int) -> DagState:
    """Remove edge i -> j; the closure is recomputed from scratch."""
    if not s.adjacency[i, j]:
        raise ValueError(f"edge {i}->{j} not present")
    adjacency = s.adjacency.copy()
    adjacency[i, j] = False
    return DagState(d=s.d, adjacency=adjacency,
                    closure=_warshall_closure(adjacency),
                    num_edges=s.num_edges - 1)


def added_edge(parent: DagState, child: DagState) -> tuple[int, int]:
    """The unique edge present in ``child`` but not ``parent``.

    Raises unless ``child`` is ``parent`` plus exactly one edge.
    """
    if child.num_edges != parent.num_edges + 1:
        raise ValueError("child must have exactly one more edge than parent")
    diff = child.adjacency & ~parent.adjacency
    if diff.sum() != 1 or np.any(parent.adjacency & ~child.adjacency):
        raise ValueError("states are not adjacent in the edge-insertion order")
    i, j = np.nonzero(diff)
    return int(i[0]), int(j[0])


def backward_prob(parent: DagState, child: DagState) -> float:
    """Uniform-over-parents backward probability of the step child -> parent.

    Removing any edge of a DAG yields a DAG, so the parent set of a state
    with K edges has exactly K elements.
    """
    added_edge(parent, child)
    return 1.0 / child.num_edges


def enumerate_parents(s: DagState) -> list[DagState]:
    return [remove_edge(s, i, j) for i, j in s.edges()]


def count_trajectories(s: DagState) -> int:
    """Number of distinct construction orders reaching ``s``: K! for K edges."""
    if s.num_edges > 20:
        raise OverflowError("trajectory count exceeds 64-bit range for K > 20")
    return math.factorial(s.num_edges)


def feature_indicators(s: DagState) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Edge, directed-path, and Markov-blanket indicator matrices of one DAG.

    Entry (i, j) of the third matrix indicates X_i in the Markov blanket of
    X_j: a parent, child, or co-parent (sharing a child) of X_j.
    """
    a = s.adjacency
    eye = np.eye(s.d, dtype=bool)
    edge = a.astype(np.float64)
    path = (s.closure & ~eye).astype(np.float64)
    co_parent = (a.astype(np.int64) @ a.T.astype(np.int64)) > 0
    markov = ((a | a.T | co_parent) & ~eye).astype(np.float64)
    return edge, path, markov


def sample_backward_trajectory(s: DagState, rng: np.random.Generator) -> list[DagState]:
    """One uniformly random construction order of ``s``, in forward order.

    Sampled by removing one uniformly chosen edge at a time down to the
    empty graph, then reversing the visited states.
    """
    states = [s]
    current = s
    while current.num_edges > 0:
        edges = current.edges()
        i, j = edges[rng.integers(len(edges))]
        current = remove_edge(current, i, j)
        states.append(current)
    states.reverse()
    return states
