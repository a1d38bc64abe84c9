"""Gaussian conditional probability models over a DAG: likelihood, priors,
reward, and parameter-score computations.

Two CPD families are supported. ``linear-gaussian``: each node's mean is a
masked linear form of its parents; the per-node parameter vector has fixed
length d with inactive (non-parent) coordinates pinned to exactly zero, the
Dirac convention that keeps parameter dimensionality graph-independent.
``mlp-gaussian``: each node's mean is a one-hidden-layer MLP (ReLU) applied
to the parent-masked observation vector; all MLP weights are active
regardless of the graph, structure enters only through input masking.

Observation noise is a fixed hyperparameter, not inferred.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import LOG_2PI
from .dags import DagState

LINEAR = "linear-gaussian"
MLP = "mlp-gaussian"


@dataclass(frozen=True)
class ModelConfig:
    kind: str = LINEAR
    obs_variance: float = 0.01
    prior_mean: float = 0.0
    prior_variance: float = 1.0
    mlp_hidden: int = 5

    def __post_init__(self):
        if self.kind not in (LINEAR, MLP):
            raise ValueError(f"unknown CPD kind: {self.kind!r}")
        if self.obs_variance <= 0.0 or self.prior_variance <= 0.0:
            raise ValueError("variances must be positive")


@dataclass(frozen=True)
class ParamSet:
    """Per-node CPD parameters, stacked as a (d, P) float64 matrix.

    Row i holds the parameters of node i's conditional; P is
    ``theta_dim(cfg, d)``.
    """

    per_node: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "per_node", ad.as_f64(self.per_node))
        self.per_node.flags.writeable = False

    @property
    def d(self) -> int:
        return self.per_node.shape[0]


@dataclass(frozen=True)
class Dataset:
    observations: np.ndarray
    heldout: np.ndarray | None = None

    def __post_init__(self):
        obs = ad.as_f64(self.observations)
        if obs.ndim != 2:
            raise ValueError("observations must be an N x d matrix")
        if not np.all(np.isfinite(obs)):
            raise ValueError("observations must be finite")
        object.__setattr__(self, "observations", obs)
        if self.heldout is not None:
            held = ad.as_f64(self.heldout)
            if held.ndim != 2 or held.shape[1] != obs.shape[1]:
                raise ValueError("held-out split must match column count")
            object.__setattr__(self, "heldout", held)

    @property
    def n(self) -> int:
        return self.observations.shape[0]

    @property
    def d(self) -> int:
        return self.observations.shape[1]


def theta_dim(cfg: ModelConfig, d: int) -> int:
    """Width of each node's parameter row, a function of (config, d) only."""
    if cfg.kind == LINEAR:
        return d
    m = cfg.mlp_hidden
    return m * d + m + m + 1  # first-layer weights+biases, output weights+bias


def mlp_slices(cfg: ModelConfig, d: int) -> dict[str, slice]:
    """Flat layout of one node's MLP parameters: W1, b1, w2, b2."""
    m = cfg.mlp_hidden
    return {
        "w1": slice(0, m * d),
        "b1": slice(m * d, m * d + m),
        "w2": slice(m * d + m, m * d + 2 * m),
        "b2": slice(m * d + 2 * m, m * d + 2 * m + 1),
    }


def active_mask(G: DagState, cfg: ModelConfig) -> np.ndarray:
    """(d, P) boolean: which coordinates of each theta row are active under G."""
    if cfg.kind == LINEAR:
        return G.adjacency.T.copy()
    return np.ones((G.d, theta_dim(cfg, G.d)), dtype=bool)


def zero_params(G: DagState, cfg: ModelConfig) -> ParamSet:
    return ParamSet(np.zeros((G.d, theta_dim(cfg, G.d))))


# ---------------------------------------------------------------------------
# Means and likelihoods (batched over graphs; tape-aware)
# ---------------------------------------------------------------------------


def _batched_means(adj, theta, X, cfg: ModelConfig):
    """Predicted means, shape (B, N, d). ``adj`` is (B, d, d) float,
    ``theta`` is (B, d, P) array or Node, ``X`` is (N, d) constant."""
    if cfg.kind == LINEAR:
        parent_mask = np.swapaxes(adj, -1, -2)  # (B, d, d): row i -> parents of i
        coeffs = ad.mul(theta, parent_mask)
        return ad.swapaxes(ad.matmul(coeffs, X.T), -1, -2)

    B, d = adj.shape[0], adj.shape[1]
    m = cfg.mlp_hidden
    sl = mlp_slices(cfg, d)
    parent_mask = np.swapaxes(adj, -1, -2)
    w1 = ad.reshape(ad.getitem(theta, (slice(None), slice(None), sl["w1"])), (B, d, m, d))
    b1 = ad.getitem(theta, (slice(None), slice(None), sl["b1"]))
    w2 = ad.getitem(theta, (slice(None), slice(None), sl["w2"]))
    b2 = ad.getitem(theta, (slice(None), slice(None), sl["b2"]))
    # Masking the inputs equals masking the first-layer weights; the latter
    # avoids materializing a (B, d, N, d) tensor.
    w1m = ad.mul(w1, parent_mask[:, :, None, :])
    z1 = ad.add(ad.matmul(w1m, X.T), ad.reshape(b1, (B, d, m, 1)))  # (B, d, m, N)
    h = ad.relu(z1)
    out = ad.add(ad.matmul(ad.reshape(w2, (B, d, 1, m)), h),
                 ad.reshape(b2, (B, d, 1, 1)))  # (B, d, 1, N)
    return ad.swapaxes(ad.reshape(out, (B, d, X.shape[0])), -1, -2)


def batched_log_likelihoods(adj: np.ndarray, theta: np.ndarray, X: np.ndarray,
                            cfg: ModelConfig) -> np.ndarray:
    """(B,) total data log-likelihood per graph. Plain numpy, no tape."""
    means = _batched_means(adj, theta, X, cfg)
    resid = X[None, :, :] - means
    n, d = X.shape
    const = -0.5 * n * d * (LOG_2PI + math.log(cfg.obs_variance))
    return const - (resid * resid).sum(axis=(1, 2)) / (2.0 * cfg.obs_variance)


def per_observation_log_likelihood(G: DagState, theta: ParamSet, X: np.ndarray,
                                   cfg: ModelConfig) -> np.ndarray:
    """(N,) log-likelihood contributions of individual observations."""
    X = ad.as_f64(X)
    _check_shapes(G, theta, cfg)
    means = _batched_means(G.adjacency[None].astype(np.float64),
                           theta.per_node[None], X, cfg)[0]
    resid = X - means
    const = -0.5 * G.d * (LOG_2PI + math.log(cfg.obs_variance))
    return const - (resid * resid).sum(axis=1) / (2.0 * cfg.obs_variance)


def log_likelihood(G: DagState, theta: ParamSet, X: np.ndarray, cfg: ModelConfig) -> float:
    return float(per_observation_log_likelihood(G, theta, X, cfg).sum())


def _check_shapes(G: DagState, theta: ParamSet, cfg: ModelConfig) -> None:
    expected = (G.d, theta_dim(cfg, G.d))
    if theta.per_node.shape != expected:
        raise ValueError(
            f"parameter shape {theta.per_node.shape} does not match expected {expected}")


# ---------------------------------------------------------------------------
# Priors and rewards
# ---------------------------------------------------------------------------


def log_prior_params(G: DagState, theta: ParamSet, cfg: ModelConfig) -> float:
    """Normal prior over the active coordinates only.

    Linear kind: inactive coordinates live on the Dirac-at-zero support, so
    a nonzero inactive coordinate is a contract violation, not probability
    zero.
    """
    _check_shapes(G, theta, cfg)
    act = active_mask(G, cfg)
    if cfg.kind == LINEAR and np.any(theta.per_node[~act] != 0.0):
        raise ValueError("inactive coordinates must be exactly zero (Dirac support)")
    values = theta.per_node[act]
    return float(
        -0.5 * values.size * (LOG_2PI + math.log(cfg.prior_variance))
        - np.sum((values - cfg.prior_mean) ** 2) / (2.0 * cfg.prior_variance)
    )


def log_prior_graph(G: DagState) -> float:
    """Uniform (unnormalized) prior over graphs."""
    return 0.0


def log_reward(G: DagState, theta: ParamSet, data, cfg: ModelConfig,
               graph_log_prior=log_prior_graph) -> float:
    X = data.observations if isinstance(data, Dataset) else ad.as_f64(data)
    return (log_likelihood(G, theta, X, cfg)
            + log_prior_params(G, theta, cfg)
            + graph_log_prior(G))


def minibatch_log_reward(G: DagState, theta: ParamSet, batch: np.ndarray,
                         total_n: int, cfg: ModelConfig,
                         graph_log_prior=log_prior_graph) -> float:
    """Unbiased log-reward estimate from M uniformly drawn observations:
    priors exactly, likelihood scaled by N/M."""
    batch = ad.as_f64(batch)
    if batch.ndim != 2 or batch.shape[0] == 0:
        raise ValueError("mini-batch must be a nonempty matrix of observations")
    if not 1 <= batch.shape[0] <= total_n:
        raise ValueError("mini-batch size must satisfy 1 <= M <= N")
    scale = total_n / batch.shape[0]
    return (scale * float(per_observation_log_likelihood(G, theta, batch, cfg).sum())
            + log_prior_params(G, theta, cfg)
            + graph_log_prior(G))


def batched_log_rewards(adj: np.ndarray, theta: np.ndarray, rows: np.ndarray,
                        total_n: int, cfg: ModelConfig) -> np.ndarray:
    """(B,) log rewards for stacked graphs/parameters, uniform graph prior.

    ``rows`` is the (M, d) observation matrix used for the likelihood term,
    scaled by N/M; pass the full data with M == N for the exact reward.
    Inactive coordinates are assumed zero (sampling guarantees it).
    """
    scale = total_n / rows.shape[0] if rows.shape[0] else 0.0
    lik = scale * batched_log_likelihoods(adj, theta, rows, cfg)
    if cfg.kind == LINEAR:
        act = np.swapaxes(adj, -1, -2)
    else:
        act = np.ones_like(theta)
    count = act.sum(axis=(1, 2))
    diff = (theta - cfg.prior_mean) * act
    prior = (-0.5 * count * (LOG_2PI + math.log(cfg.prior_variance))
             - (diff * diff).sum(axis=(1, 2)) / (2.0 * cfg.prior_variance))
    return lik + prior


# ---------------------------------------------------------------------------
# Parameter scores (gradients of the log reward in theta)
# ---------------------------------------------------------------------------


def theta_score_ops(adj: np.ndarray, theta, rows: np.ndarray, total_n: int,
                    cfg: ModelConfig):
    """Gradient of the (mini-batch) log reward wrt theta, as tape ops.

    ``theta`` may be a Node, in which case the returned (B, d, P) score is
    differentiable through it; the ReLU gates are treated as constants
    (piecewise-constant, zero derivative almost everywhere).
    """
    X = ad.as_f64(rows)
    scale = total_n / X.shape[0] if X.shape[0] else 0.0  # prior-only when no rows
    parent_mask = np.swapaxes(adj, -1, -2)
    means = _batched_means(adj, theta, X, cfg)
    err = ad.mul(ad.sub(X[None, :, :], means), scale / cfg.obs_variance)  # (B, N, d)

    if cfg.kind == LINEAR:
        lik_score = ad.matmul(ad.swapaxes(err, -1, -2), X)  # (B, d, d)
        prior_score = ad.mul(ad.sub(theta, cfg.prior_mean), -1.0 / cfg.prior_variance)
        return ad.mul(ad.add(lik_score, prior_score), parent_mask)

    B, d = adj.shape[0], adj.shape[1]
    m = cfg.mlp_hidden
    sl = mlp_slices(cfg, d)
    w1 = ad.reshape(ad.getitem(theta, (slice(None), slice(None), sl["w1"])), (B, d, m, d))
    b1 = ad.getitem(theta, (slice(None), slice(None), sl["b1"]))
    w2 = ad.getitem(theta, (slice(None), slice(None), sl["w2"]))
    w1m = ad.mul(w1, parent_mask[:, :, None, :])
    z1 = ad.add(ad.matmul(w1m, X.T), ad.reshape(b1, (B, d, m, 1)))  # (B, d, m, N)
    gate = ad.step_positive(z1)
    hidden = ad.relu(z1)

    e = ad.reshape(ad.swapaxes(err, -1, -2), (B, d, 1, X.shape[0]))  # (B, d, 1, N)
    d_w2 = ad.reshape(ad.matmul(hidden, ad.swapaxes(e, -1, -2)), (B, d, m))
    d_b2 = ad.reshape(ad.sum_(e, axis=(-2, -1)), (B, d, 1))
    dz = ad.mul(ad.mul(ad.reshape(w2, (B, d, m, 1)), e), gate)  # (B, d, m, N)
    d_w1 = ad.mul(ad.matmul(dz, X), parent_mask[:, :, None, :])  # (B, d, m, d)
    d_b1 = ad.sum_(dz, axis=-1)
    lik_score = ad.concat(
        [ad.reshape(d_w1, (B, d, m * d)), d_b1, d_w2, d_b2], axis=-1)
    prior_score = ad.mul(ad.sub(theta, cfg.prior_mean), -1.0 / cfg.prior_variance)
    return ad.add(lik_score, prior_score)


def grad_theta_log_reward(G: DagState, theta: ParamSet, data, cfg: ModelConfig) -> np.ndarray:
    """(d, P) gradient of log_reward in theta, restricted to active coordinates."""
    _check_shapes(G, theta, cfg)
    X = data.observations if isinstance(data, Dataset) else ad.as_f64(data)
    if cfg.kind == LINEAR:
        act = active_mask(G, cfg)
        if np.any(theta.per_node[~act] != 0.0):
            raise ValueError("inactive coordinates must be exactly zero (Dirac support)")
    score = theta_score_ops(G.adjacency[None].astype(np.float64),
                            theta.per_node[None], X, X.shape[0], cfg)
    return ad.value_of(score)[0]
