"""Exact ground truth for small graphs: full DAG enumeration, the conjugate
parameter posterior of the linear-Gaussian model, the exact graph posterior
and its features, and a hand-built policy whose balance residuals are zero
by construction.

Everything here is an oracle against which the trained sampler is checked;
it is only feasible for d <= 5 where all labeled DAGs can be enumerated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import models
from .autodiff import LOG_2PI, LOG_SENTINEL
from .dags import DagState, apply_add_edge, empty_state, feature_indicators
from .models import Dataset, ModelConfig, ParamSet
from .policy import ForwardDistribution

ENUMERATION_CAP = 5


def enumerate_dags(d: int) -> list[DagState]:
    """Every labeled DAG on d nodes, each exactly once.

    Breadth-first edge insertion over the action machinery with
    de-duplication by adjacency key; the visit order is deterministic.
    """
    if d > ENUMERATION_CAP:
        raise ValueError(f"enumeration cap: d must be <= {ENUMERATION_CAP}, got {d}")
    root = empty_state(d)
    seen: dict[bytes, DagState] = {root.key: root}
    frontier = [root]
    while frontier:
        next_frontier = []
        for state in frontier:
            for i, j in np.argwhere(state.mask):
                child = apply_add_edge(state, int(i), int(j))
                if child.key not in seen:
                    seen[child.key] = child
                    next_frontier.append(child)
        frontier = next_frontier
    return list(seen.values())


@dataclass(frozen=True)
class NodePosterior:
    """Conjugate Normal posterior over one node's active coefficients."""

    node: int
    parents: np.ndarray  # (k,) sorted parent indices
    mean: np.ndarray     # (k,)
    cov: np.ndarray      # (k, k)
    chol: np.ndarray     # (k, k) lower Cholesky factor of cov


def _node_posterior(X: np.ndarray, node: int, parents: np.ndarray,
                    cfg: ModelConfig) -> NodePosterior:
    k = parents.size
    if k == 0:
        empty = np.zeros((0,))
        zero = np.zeros((0, 0))
        return NodePosterior(node, parents, empty, zero, zero)
    xp = X[:, parents]
    y = X[:, node]
    prec = np.eye(k) / cfg.prior_variance + xp.T @ xp / cfg.obs_variance
    cov = np.linalg.inv(prec)
    cov = 0.5 * (cov + cov.T)
    mean = cov @ (np.full(k, cfg.prior_mean) / cfg.prior_variance
                  + xp.T @ y / cfg.obs_variance)
    return NodePosterior(node, parents, mean, cov, np.linalg.cholesky(cov))


def _node_log_marginal(X: np.ndarray, node: int, parents: np.ndarray,
                       cfg: ModelConfig) -> float:
    """Evidence of one node's regression, in the k-dimensional information
    form (never materializes the N x N covariance)."""
    n = X.shape[0]
    y = X[:, node]
    k = parents.size
    s2, s02 = cfg.obs_variance, cfg.prior_variance
    if k == 0:
        return float(-0.5 * (n * LOG_2PI + n * math.log(s2) + y @ y / s2))
    xp = X[:, parents]
    r = y - cfg.prior_mean * xp.sum(axis=1)
    a = np.eye(k) + (s02 / s2) * (xp.T @ xp)
    sign, logdet_a = np.linalg.slogdet(a)
    xtr = xp.T @ r
    quad = (r @ r - (s02 / s2) * (xtr @ np.linalg.solve(a, xtr))) / s2
    return float(-0.5 * (n * LOG_2PI + n * math.log(s2) + logdet_a + quad))


def _require_linear(cfg: ModelConfig) -> None:
    if cfg.kind != models.LINEAR:
        raise ValueError("exact posterior computations require the linear-gaussian kind")


def _observations(data) -> np.ndarray:
    return data.observations if isinstance(data, Dataset) else ad.as_f64(data)


def posterior_params(G: DagState, data, cfg: ModelConfig) -> list[NodePosterior]:
    """Per-node conjugate posterior (mean and covariance over active
    coordinates); nodes without parents get an empty block (Dirac at 0)."""
    _require_linear(cfg)
    X = _observations(data)
    return [
        _node_posterior(X, i, np.nonzero(G.adjacency[:, i])[0], cfg)
        for i in range(G.d)
    ]


def log_marginal_likelihood(G: DagState, data, cfg: ModelConfig) -> float:
    _require_linear(cfg)
    X = _observations(data)
    return sum(
        _node_log_marginal(X, i, np.nonzero(G.adjacency[:, i])[0], cfg)
        for i in range(G.d)
    )


@dataclass
class ExactPosterior:
    d: int
    config: ModelConfig
    dags: list[DagState]
    log_marginals: np.ndarray   # (n,) log marginal likelihood per DAG
    log_posterior: np.ndarray   # (n,) normalized log P(G | D)
    node_posteriors: dict[bytes, list[NodePosterior]]

    def posterior_for(self, G: DagState) -> list[NodePosterior]:
        found = self.node_posteriors.get(G.key)
        if found is None:
            raise KeyError("graph is not part of this enumerated posterior")
        return found

    def log_posterior_of(self, G: DagState) -> float:
        for state, lp in zip(self.dags, self.log_posterior):
            if state.key == G.key:
                return float(lp)
        raise KeyError("graph is not part of this enumerated posterior")

    def to_json_dict(self) -> dict:
        """Graph key (hex) -> log posterior, for regression fixtures."""
        return {s.to_hex(): float(lp) for s, lp in zip(self.dags, self.log_posterior)}


def exact_graph_posterior(data, cfg: ModelConfig,
                          graph_log_prior=models.log_prior_graph) -> ExactPosterior:
    """Enumerate all DAGs and normalize exp(log marginal + log prior).

    Per-node marginals and posteriors depend only on (node, parent set), so
    they are computed once per distinct parent set and shared across DAGs.
    """
    _require_linear(cfg)
    X = _observations(data)
    d = X.shape[1]
    dags = enumerate_dags(d)

    ml_cache: dict[tuple[int, bytes], float] = {}
    post_cache: dict[tuple[int, bytes], NodePosterior] = {}

    def node_terms(i: int, parents: np.ndarray) -> tuple[float, NodePosterior]:
        key = (i, parents.tobytes())
        if key not in ml_cache:
            ml_cache[key] = _node_log_marginal(X, i, parents, cfg)
            post_cache[key] = _node_posterior(X, i, parents, cfg)
        return ml_cache[key], post_cache[key]

    log_marginals = np.empty(len(dags))
    node_posteriors: dict[bytes, list[NodePosterior]] = {}
    log_scores = np.empty(len(dags))
    for idx, G in enumerate(dags):
        total = 0.0
        per_node = []
        for i in range(d):
            ml, post = node_terms(i, np.nonzero(G.adjacency[:, i])[0])
            total += ml
            per_node.append(post)
        log_marginals[idx] = total
        log_scores[idx] = total + graph_log_prior(G)
        node_posteriors[G.key] = per_node

    shift = log_scores.max()
    log_norm = shift + math.log(np.exp(log_scores - shift).sum())
    return ExactPosterior(
        d=d, config=cfg, dags=dags,
        log_marginals=log_marginals,
        log_posterior=log_scores - log_norm,
        node_posteriors=node_posteriors,
    )


def exact_features(post: ExactPosterior) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Edge, path, and Markov-blanket marginals under the exact posterior."""
    weights = np.exp(post.log_posterior)
    edge = np.zeros((post.d, post.d))
    path = np.zeros((post.d, post.d))
    markov = np.zeros((post.d, post.d))
    for weight, G in zip(weights, post.dags):
        e, p, m = feature_indicators(G)
        edge += weight * e
        path += weight * p
        markov += weight * m
    return edge, path, markov


def posterior_theta_log_density(theta: ParamSet, G: DagState,
                                posteriors) -> float:
    """Log density of theta's active blocks under the exact Normal posterior.

    ``posteriors`` is either an ExactPosterior or the per-node list returned
    by ``posterior_params``. Empty blocks contribute zero (empty-product
    convention); nonzero inactive coordinates are a contract violation.
    """
    per_node = (posteriors.posterior_for(G) if isinstance(posteriors, ExactPosterior)
                else posteriors)
    act = models.active_mask(G, ModelConfig(kind=models.LINEAR))
    if np.any(theta.per_node[~act] != 0.0):
        raise ValueError("inactive coordinates must be exactly zero (Dirac support)")
    total = 0.0
    for post in per_node:
        k = post.parents.size
        if k == 0:
            continue
        z = np.linalg.solve(post.chol, theta.per_node[post.node, post.parents] - post.mean)
        total += -0.5 * (k * LOG_2PI + z @ z) - np.log(np.diag(post.chol)).sum()
    return float(total)


class ConsistentPolicy:
    """Synthetic policy tables for d = 2 making every balance residual zero.

    On two nodes each DAG is reached by a unique trajectory, so setting the
    stop probability at the empty graph to P(G0 | D), the edge probabilities
    proportional to the posterior of the single-edge graphs, and the
    parameter distribution to the exact conjugate posterior reproduces the
    joint posterior exactly.
    """

    def __init__(self, post: ExactPosterior):
        if post.d != 2:
            raise ValueError("the consistent construction requires d = 2 "
                             "(unique trajectory per DAG)")
        self.post = post
        self.d = 2
        self._log_post = {s.key: float(lp) for s, lp in zip(post.dags, post.log_posterior)}
        root = empty_state(2)
        self._root_key = root.key
        self._log_p_stop_root = self._log_post[root.key]
        p_root = math.exp(self._log_p_stop_root)
        self._log_1m_root = math.log1p(-p_root)
        edge_lp = np.full((2, 2), LOG_SENTINEL)
        for s, lp in zip(post.dags, post.log_posterior):
            if s.num_edges == 1:
                ((i, j),) = s.edges()
                edge_lp[i, j] = float(lp) - self._log_1m_root
        self._edge_log_probs_root = edge_lp

    def forward(self, G: DagState) -> ForwardDistribution:
        if G.key == self._root_key:
            return ForwardDistribution(
                p_stop=math.exp(self._log_p_stop_root),
                log_p_stop=self._log_p_stop_root,
                log_1m_p_stop=self._log_1m_root,
                edge_log_probs=self._edge_log_probs_root.copy(),
            )
        return ForwardDistribution(
            p_stop=1.0, log_p_stop=0.0, log_1m_p_stop=LOG_SENTINEL,
            edge_log_probs=np.full((2, 2), LOG_SENTINEL),
        )

    def log_pf_edge(self, G: DagState, G_next: DagState) -> float:
        fd = self.forward(G)
        from .dags import added_edge

        i, j = added_edge(G, G_next)
        return fd.log_1m_p_stop + float(fd.edge_log_probs[i, j])

    def log_pf_theta(self, G: DagState, theta: ParamSet) -> float:
        fd = self.forward(G)
        return fd.log_p_stop + posterior_theta_log_density(theta, G, self.post)

    def sample_theta(self, G: DagState, rng: np.random.Generator
                     ) -> tuple[ParamSet, float]:
        values = np.zeros((2, 2))
        for post in self.post.posterior_for(G):
            k = post.parents.size
            if k == 0:
                continue
            values[post.node, post.parents] = post.mean + post.chol @ rng.standard_normal(k)
        theta = ParamSet(values)
        return theta, posterior_theta_log_density(theta, G, self.post)


def consistent_policy(post: ExactPosterior) -> ConsistentPolicy:
    return ConsistentPolicy(post)
