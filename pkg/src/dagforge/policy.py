"""Forward sampling policy: graph backbone, stop head, edge head, and
per-node Normal parameter heads, composed hierarchically.

The action distribution at a graph state factors as: stop with probability
sigmoid(f(g)); otherwise add edge i -> j with probability proportional to
m_ij * exp(u_i . v_j) over the valid-action mask m; after stopping, draw
each node's parameter block from a Normal whose mean and variance (or
lower-triangular scale in full-covariance mode) are read off that node's
embedding w_i. States with an empty mask stop with probability exactly 1
regardless of the weights.

All head computations run through the autodiff ops, so the same code path
serves plain-array evaluation (rollouts) and taped evaluation (training).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import models
from .autodiff import LOG_SENTINEL
from .dags import STOP, Action, DagState, added_edge, empty_state, apply_add_edge
from .models import ModelConfig, ParamSet


@dataclass(frozen=True)
class PolicyConfig:
    d: int
    model: ModelConfig
    hidden: int = 64
    rounds: int = 2
    full_covariance: bool = False
    # Head-output ranges. The variance head is a sigmoid scaled between
    # sigma_floor and sigma_floor + sigma_span: for this model family the
    # posterior variance never exceeds the prior variance, so a finite cap
    # loses nothing, while unbounded or collapsing variances flood the
    # gradient with density-term noise and destabilize the shared backbone.
    # Means saturate smoothly at mu_bound for the same reason.
    sigma_floor: float = 1e-4
    sigma_span: float = 4.0
    mu_bound: float = 20.0
    # Raw offset of the variance head at initialization. Fresh draws with
    # variance ~2 make every child reward so much worse than its parent's
    # that the early residuals share one sign and shove the stop head the
    # wrong way; starting smaller keeps that transient mild.
    sigma_init_offset: float = -2.0
    # Stop logits saturate smoothly at this magnitude. Sharp posteriors can
    # demand stop probabilities like exp(-1000); past +-50 the remaining
    # probability-mass error (~1e-22) is invisible to every metric, and the
    # saturation keeps those unreachable targets from dragging the shared
    # backbone around forever.
    stop_logit_bound: float = 50.0

    def __post_init__(self):
        if self.full_covariance and self.model.kind != models.LINEAR:
            raise ValueError("full-covariance parameter heads are only supported "
                             "for the linear-gaussian kind")

    @property
    def theta_dim(self) -> int:
        return models.theta_dim(self.model, self.d)


@dataclass
class NodeEmbeddings:
    g: np.ndarray   # (H,) graph embedding
    u: np.ndarray   # (d, H) edge-source embeddings
    v: np.ndarray   # (d, H) edge-target embeddings
    w: np.ndarray   # (d, H) parameter-head embeddings


@dataclass
class ForwardDistribution:
    p_stop: float
    log_p_stop: float
    log_1m_p_stop: float
    edge_log_probs: np.ndarray              # (d, d), conditional on not stopping
    theta_mean: np.ndarray | None = None    # (d, P)
    theta_var: np.ndarray | None = None     # (d, P)
    theta_scale_tril: np.ndarray | None = None  # (d, P, P), full mode


def _tril_basis(p: int) -> tuple[np.ndarray, np.ndarray]:
    """Constant scatter matrices mapping packed entries into a (p, p) matrix:
    first the diagonal, then the strictly-lower entries in row-major order."""
    diag = np.zeros((p, p * p))
    for k in range(p):
        diag[k, k * p + k] = 1.0
    rows, cols = np.tril_indices(p, k=-1)
    off = np.zeros((len(rows), p * p))
    for m, (i, j) in enumerate(zip(rows, cols)):
        off[m, i * p + j] = 1.0
    return diag, off


class Policy:
    """Learnable forward policy over (graph, parameters) generation."""

    def __init__(self, config: PolicyConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params
        if config.full_covariance:
            self._tril_diag, self._tril_off = _tril_basis(config.theta_dim)

    @property
    def d(self) -> int:
        return self.config.d

    @classmethod
    def initialize(cls, config: PolicyConfig, rng: np.random.Generator) -> "Policy":
        h, p = config.hidden, config.theta_dim
        params: dict[str, np.ndarray] = {}

        def dense(name, fan_in, fan_out, zero=False):
            if zero:
                params[name + "_w"] = np.zeros((fan_in, fan_out))
            else:
                params[name + "_w"] = rng.normal(size=(fan_in, fan_out)) / math.sqrt(fan_in)
            params[name + "_b"] = np.zeros(fan_out)

        params["node_embed"] = rng.normal(size=(config.d, h)) / math.sqrt(h)
        for layer in range(config.rounds):
            dense(f"mp{layer}", 3 * h, h)
        for name in ("attn_q", "attn_k", "attn_v", "attn_o"):
            params[name] = rng.normal(size=(h, h)) / math.sqrt(h)
        dense("stop1", h, h)
        dense("stop2", h, 1, zero=True)
        dense("u", h, h, zero=True)  # zero scores at init => uniform edge draw
        dense("v", h, h)
        dense("w", h, h)
        dense("mu1", h, h)
        dense("mu2", h, p, zero=True)
        dense("sig1", h, h)
        dense("sig2", h, p, zero=True)
        if config.full_covariance:
            t = p * (p + 1) // 2
            dense("tril1", h, h)
            dense("tril2", h, t, zero=True)
        return cls(config, params)

    # -- batched computation (tape-aware) ---------------------------------

    def backbone(self, params, adj: np.ndarray):
        """Node embeddings (B, d, H) for a stack of adjacency matrices."""
        cfg = self.config
        B = adj.shape[0]
        h = ad.add(params["node_embed"], np.zeros((B, cfg.d, cfg.hidden)))
        adj_t = np.swapaxes(adj, -1, -2)
        for layer in range(cfg.rounds):
            parents = ad.matmul(adj_t, h)
            children = ad.matmul(adj, h)
            cat = ad.concat([h, parents, children], axis=-1)
            h = ad.relu(ad.add(ad.matmul(cat, params[f"mp{layer}_w"]),
                               params[f"mp{layer}_b"]))
        q = ad.matmul(h, params["attn_q"])
        k = ad.matmul(h, params["attn_k"])
        v = ad.matmul(h, params["attn_v"])
        scores = ad.mul(ad.matmul(q, ad.swapaxes(k, -1, -2)),
                        1.0 / math.sqrt(cfg.hidden))
        attn = ad.exp(ad.masked_log_softmax(scores, np.ones(cfg.d, dtype=bool)))
        return ad.add(h, ad.matmul(ad.matmul(attn, v), params["attn_o"]))

    def forward_parts(self, params, adj: np.ndarray, masks: np.ndarray) -> dict:
        """All head outputs for a batch of graphs.

        ``adj`` is (B, d, d) float64, ``masks`` (B, d, d) bool. Rows whose
        mask is empty are forced to stop: their log p_stop is exactly 0 with
        no gradient, and their continuation log-probability is the sentinel.
        """
        cfg = self.config
        B, d = adj.shape[0], adj.shape[1]
        h = self.backbone(params, adj)
        g = ad.mean_(h, axis=1)

        t = ad.relu(ad.add(ad.matmul(g, params["stop1_w"]), params["stop1_b"]))
        raw = ad.reshape(ad.add(ad.matmul(t, params["stop2_w"]), params["stop2_b"]), (B,))
        bound = cfg.stop_logit_bound
        logit = ad.mul(ad.tanh(ad.mul(raw, 1.0 / bound)), bound)
        log_pstop = ad.mul(ad.softplus(ad.mul(logit, -1.0)), -1.0)
        log_cont = ad.mul(ad.softplus(logit), -1.0)

        flat = masks.reshape(B, d * d).copy()
        has_valid = flat.any(axis=1)
        flat[~has_valid, 0] = True  # placeholder row; outputs overridden below
        u = ad.add(ad.matmul(h, params["u_w"]), params["u_b"])
        v = ad.add(ad.matmul(h, params["v_w"]), params["v_b"])
        scores = ad.matmul(u, ad.swapaxes(v, -1, -2))
        elp = ad.reshape(ad.masked_log_softmax(ad.reshape(scores, (B, d * d)), flat),
                         (B, d, d))

        w = ad.add(ad.matmul(h, params["w_w"]), params["w_b"])
        tm = ad.relu(ad.add(ad.matmul(w, params["mu1_w"]), params["mu1_b"]))
        mu_raw = ad.add(ad.matmul(tm, params["mu2_w"]), params["mu2_b"])
        mu = ad.mul(ad.tanh(ad.mul(mu_raw, 1.0 / cfg.mu_bound)), cfg.mu_bound)
        ts = ad.relu(ad.add(ad.matmul(w, params["sig1_w"]), params["sig1_b"]))
        var_raw = ad.add(ad.add(ad.matmul(ts, params["sig2_w"]), params["sig2_b"]),
                         cfg.sigma_init_offset)
        var = ad.add(ad.mul(ad.sigmoid(var_raw), cfg.sigma_span), cfg.sigma_floor)

        forced = ~has_valid
        if forced.any():
            keep = has_valid.astype(np.float64)
            log_pstop = ad.mul(log_pstop, keep)
            log_cont = ad.add(ad.mul(log_cont, keep), (1.0 - keep) * LOG_SENTINEL)

        parts = {
            "h": h, "g": g, "u": u, "v": v, "w": w,
            "log_pstop": log_pstop, "log_cont": log_cont,
            "edge_log_probs": elp, "mu": mu, "var": var,
            "has_valid": has_valid,
        }
        if cfg.full_covariance:
            tt = ad.relu(ad.add(ad.matmul(w, params["tril1_w"]), params["tril1_b"]))
            raw = ad.add(ad.matmul(tt, params["tril2_w"]), params["tril2_b"])
            p = cfg.theta_dim
            span = math.sqrt(cfg.sigma_span)
            diag = ad.add(ad.mul(ad.sigmoid(ad.getitem(raw, (Ellipsis, slice(0, p)))),
                                 span), math.sqrt(cfg.sigma_floor))
            off_raw = ad.getitem(raw, (Ellipsis, slice(p, None)))
            off = ad.mul(ad.tanh(ad.mul(off_raw, 1.0 / span)), span)
            flat_l = ad.add(ad.matmul(diag, self._tril_diag),
                            ad.matmul(off, self._tril_off))
            parts["scale_tril"] = ad.reshape(flat_l, (B, d, p, p))
        return parts

    # -- single-state evaluation (plain numpy) ----------------------------

    def forward(self, G: DagState) -> ForwardDistribution:
        parts = self.forward_parts(self.params, G.adjacency[None].astype(np.float64),
                                   G.mask[None])
        forced = not parts["has_valid"][0]
        fd = ForwardDistribution(
            p_stop=1.0 if forced else float(ad.value_of(ad.exp(parts["log_pstop"]))[0]),
            log_p_stop=float(parts["log_pstop"][0]),
            log_1m_p_stop=float(parts["log_cont"][0]),
            edge_log_probs=(np.full((self.d, self.d), LOG_SENTINEL) if forced
                            else parts["edge_log_probs"][0]),
            theta_mean=parts["mu"][0],
            theta_var=parts["var"][0],
        )
        if self.config.full_covariance:
            fd.theta_scale_tril = parts["scale_tril"][0]
        return fd

    def embed(self, G: DagState) -> NodeEmbeddings:
        parts = self.forward_parts(self.params, G.adjacency[None].astype(np.float64),
                                   G.mask[None])
        return NodeEmbeddings(g=parts["g"][0], u=parts["u"][0],
                              v=parts["v"][0], w=parts["w"][0])

    def log_pf_edge(self, G: DagState, G_next: DagState) -> float:
        i, j = added_edge(G, G_next)
        if not G.mask[i, j]:
            raise ValueError(f"illegal transition: adding edge {i}->{j}")
        fd = self.forward(G)
        return fd.log_1m_p_stop + float(fd.edge_log_probs[i, j])

    def log_pf_theta(self, G: DagState, theta: ParamSet) -> float:
        fd = self.forward(G)
        return fd.log_p_stop + self._theta_log_density(G, fd, theta)

    def _theta_log_density(self, G: DagState, fd: ForwardDistribution,
                           theta: ParamSet) -> float:
        act = models.active_mask(G, self.config.model)
        if theta.per_node.shape != (self.d, self.config.theta_dim):
            raise ValueError("parameter layout does not match the policy model")
        if self.config.model.kind == models.LINEAR and np.any(theta.per_node[~act] != 0.0):
            raise ValueError("inactive coordinates must be exactly zero")
        total = 0.0
        for i in range(self.d):
            idx = np.nonzero(act[i])[0]
            if idx.size == 0:
                continue
            x = theta.per_node[i, idx]
            if self.config.full_covariance:
                l_act = fd.theta_scale_tril[i][np.ix_(idx, idx)]
                total += float(ad.value_of(ad.gaussian_full_log_density(
                    x, fd.theta_mean[i, idx], l_act)))
            else:
                total += float(ad.value_of(ad.gaussian_diag_log_density(
                    x, fd.theta_mean[i, idx], fd.theta_var[i, idx])))
        return total

    def sample_theta(self, G: DagState, rng: np.random.Generator,
                     fd: ForwardDistribution | None = None
                     ) -> tuple[ParamSet, float]:
        """Reparametrized draw of the active parameter blocks.

        Returns the draw and its log-density under the parameter heads (the
        stop probability is not included). ``fd`` may pass a precomputed
        forward evaluation of G to skip recomputing it.
        """
        if fd is None:
            fd = self.forward(G)
        act = models.active_mask(G, self.config.model)
        values = np.zeros((self.d, self.config.theta_dim))
        for i in range(self.d):
            idx = np.nonzero(act[i])[0]
            if idx.size == 0:
                continue
            eps = rng.standard_normal(idx.size)
            if self.config.full_covariance:
                l_act = fd.theta_scale_tril[i][np.ix_(idx, idx)]
                values[i, idx] = fd.theta_mean[i, idx] + l_act @ eps
            else:
                values[i, idx] = fd.theta_mean[i, idx] + np.sqrt(fd.theta_var[i, idx]) * eps
        theta = ParamSet(values)
        return theta, self._theta_log_density(G, fd, theta)

    # -- persistence -------------------------------------------------------

    def save(self, path) -> None:
        doc = {
            "format_version": 1,
            "config": {
                "d": self.config.d,
                "hidden": self.config.hidden,
                "rounds": self.config.rounds,
                "full_covariance": self.config.full_covariance,
                "sigma_floor": self.config.sigma_floor,
                "sigma_span": self.config.sigma_span,
                "mu_bound": self.config.mu_bound,
                "sigma_init_offset": self.config.sigma_init_offset,
                "stop_logit_bound": self.config.stop_logit_bound,
                "model": {
                    "kind": self.config.model.kind,
                    "obs_variance": self.config.model.obs_variance,
                    "prior_mean": self.config.model.prior_mean,
                    "prior_variance": self.config.model.prior_variance,
                    "mlp_hidden": self.config.model.mlp_hidden,
                },
            },
            "params": {
                name: {"shape": list(tensor.shape), "values": tensor.ravel().tolist()}
                for name, tensor in self.params.items()
            },
        }
        with open(path, "w") as fh:
            json.dump(doc, fh)

    @classmethod
    def load(cls, path) -> "Policy":
        with open(path) as fh:
            doc = json.load(fh)
        if doc.get("format_version") != 1:
            raise ValueError(f"unsupported checkpoint version: {doc.get('format_version')}")
        c = doc["config"]
        config = PolicyConfig(
            d=c["d"], hidden=c["hidden"], rounds=c["rounds"],
            full_covariance=c["full_covariance"], sigma_floor=c["sigma_floor"],
            sigma_span=c.get("sigma_span", 4.0), mu_bound=c.get("mu_bound", 20.0),
            sigma_init_offset=c.get("sigma_init_offset", -2.0),
            stop_logit_bound=c.get("stop_logit_bound", 50.0),
            model=ModelConfig(**c["model"]),
        )
        params = {
            name: np.array(entry["values"], dtype=np.float64).reshape(entry["shape"])
            for name, entry in doc["params"].items()
        }
        return cls(config, params)


def sample_trajectory(policy, rng: np.random.Generator,
                      exploration_eps: float = 0.0
                      ) -> tuple[list[DagState], DagState]:
    """Roll out the edge-insertion phase from the empty graph.

    With probability ``exploration_eps`` at each step, a uniformly random
    valid action (an edge or stop) replaces the policy draw, which keeps the
    sampling distribution fully supported. Returns the visited states in
    order and the final graph; ``policy`` is anything exposing ``d`` and
    ``forward``.
    """
    if not 0.0 <= exploration_eps <= 1.0:
        raise ValueError("exploration_eps must lie in [0, 1]")
    state = empty_state(policy.d)
    states = [state]
    max_steps = policy.d * (policy.d - 1) // 2
    for _ in range(max_steps + 1):
        action = sample_action(policy, state, rng, exploration_eps)
        if action.is_stop:
            break
        state = apply_add_edge(state, action.source, action.target)
        states.append(state)
    return states, state


def sample_action(policy, state: DagState, rng: np.random.Generator,
                  exploration_eps: float = 0.0) -> Action:
    """One action draw at ``state``: stop, or an edge from the masked
    softmax; with probability ``exploration_eps`` a uniform valid action."""
    valid = np.argwhere(state.mask)
    if len(valid) == 0:
        return STOP  # saturated graph: stopping is forced
    if exploration_eps > 0.0 and rng.random() < exploration_eps:
        pick = int(rng.integers(len(valid) + 1))  # extra slot is the stop action
        if pick == len(valid):
            return STOP
        return Action(int(valid[pick][0]), int(valid[pick][1]))
    fd = policy.forward(state)
    if rng.random() < fd.p_stop:
        return STOP
    flat_probs = np.where(state.mask, np.exp(fd.edge_log_probs), 0.0).ravel()
    flat_probs /= flat_probs.sum()
    choice = int(rng.choice(state.d * state.d, p=flat_probs))
    return Action(*divmod(choice, state.d))
