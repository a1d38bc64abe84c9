"""Balance-condition training: residuals over single-edge transitions with
freshly sampled parameters at both endpoints, a replay buffer of graph
transitions, and the environment/update loop.

The residual for a transition G -> G' compares the two routes through the
common ancestor (G, .): reward plus backward probability plus the parameter
density at G on one side, against the edge step and the parameter density
at G' on the other. Sampled parameters enter every term as constants
(stop-gradient): gradients flow only through the policy's log-densities,
never through the reward or the draws themselves. An optional penalty term
additionally matches the parameter-head score to the reward score, and that
term alone differentiates through the reparametrized draw.

Rewards are evaluated lazily at loss time, never stored with transitions;
this is what makes mini-batch reward estimates possible.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import models
from .autodiff import LOG_2PI, Tape
from .dags import DagState, apply_add_edge, empty_state, state_from_adjacency
from .models import Dataset, ModelConfig, ParamSet
from .policy import Policy, PolicyConfig


@dataclass(frozen=True)
class TrainerConfig:
    env_steps_per_update: int = 16
    batch_size: int = 256
    learning_rate: float = 1e-3
    final_learning_rate: float | None = None  # linear decay target; None = constant
    huber_delta: float | None = 1.0     # None means plain squared residuals
    penalty_weight: float = 0.0
    total_updates: int = 5000
    eps_start: float = 0.1
    eps_end: float = 0.0
    eps_horizon: int | None = None      # defaults to total_updates
    minibatch_size: int = 0             # 0 = full-data rewards
    buffer_capacity: int = 100_000
    grad_clip: float = 10.0
    seed: int = 0

    def exploration_at(self, update: int) -> float:
        horizon = self.eps_horizon if self.eps_horizon is not None else self.total_updates
        if horizon <= 0:
            return self.eps_end
        frac = min(update / horizon, 1.0)
        return self.eps_start + (self.eps_end - self.eps_start) * frac

    def learning_rate_at(self, update: int) -> float:
        if self.final_learning_rate is None or self.total_updates <= 1:
            return self.learning_rate
        frac = min(update / max(self.total_updates - 1, 1), 1.0)
        return self.learning_rate + (self.final_learning_rate - self.learning_rate) * frac


@dataclass
class LossReport:
    update: int
    loss: float
    mean_abs_residual: float
    penalty: float
    p_stop_empty: float
    grad_norm: float

    CSV_HEADER = "update,loss,mean_abs_residual,penalty,p_stop_empty,grad_norm"

    def csv_row(self) -> str:
        return (f"{self.update},{self.loss!r},{self.mean_abs_residual!r},"
                f"{self.penalty!r},{self.p_stop_empty!r},{self.grad_norm!r}")


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


class ReplayBuffer:
    """FIFO ring of single-edge transitions stored as packed adjacency bits."""

    _MEMO_LIMIT = 200_000

    def __init__(self, capacity: int, d: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.d = d
        self._ring: deque[tuple[bytes, int, int]] = deque(maxlen=capacity)
        self._memo: dict[tuple[bytes, int, int], tuple[DagState, DagState]] = {}

    def __len__(self) -> int:
        return len(self._ring)

    @property
    def capacity(self) -> int:
        return self._ring.maxlen

    def push(self, parent: DagState, i: int, j: int) -> None:
        if not parent.mask[i, j]:
            raise ValueError("transition must add one legal edge")
        self._ring.append((parent.key, i, j))

    def _decode(self, entry: tuple[bytes, int, int]) -> tuple[DagState, DagState, int, int]:
        key, i, j = entry
        pair = self._memo.get(entry)
        if pair is None:
            bits = np.unpackbits(np.frombuffer(key, dtype=np.uint8))
            adjacency = bits[: self.d * self.d].astype(bool).reshape(self.d, self.d)
            parent = state_from_adjacency(adjacency)
            pair = (parent, apply_add_edge(parent, i, j))
            if len(self._memo) >= self._MEMO_LIMIT:
                self._memo.clear()
            self._memo[entry] = pair
        return pair[0], pair[1], i, j

    def sample(self, rng: np.random.Generator, n: int
               ) -> list[tuple[DagState, DagState, int, int]]:
        if not self._ring:
            raise ValueError("cannot sample from an empty replay buffer")
        indices = rng.integers(len(self._ring), size=n)
        return [self._decode(self._ring[int(k)]) for k in indices]


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            params[name] = params[name] - self.lr * (self.m[name] / bc1) / (
                np.sqrt(self.v[name] / bc2) + self.eps)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0.0 and total > max_norm:
        scale = max_norm / total
        for name in grads:
            grads[name] = grads[name] * scale
    return total


# ---------------------------------------------------------------------------
# Residual and loss
# ---------------------------------------------------------------------------


def subtb_residual(G: DagState, G_next: DagState, theta: ParamSet,
                   theta_next: ParamSet, policy, data, cfg: ModelConfig, *,
                   minibatch: np.ndarray | None = None,
                   total_n: int | None = None) -> float:
    """Balance residual of one transition, parameters held as constants.

    Positive when the G' route (reward at G', uniform backward step,
    parameter density at G) outweighs the G route (reward at G, edge step,
    parameter density at G').
    """
    X = data.observations if isinstance(data, Dataset) else ad.as_f64(data)
    if minibatch is None:
        reward = models.log_reward(G, theta, X, cfg)
        reward_next = models.log_reward(G_next, theta_next, X, cfg)
    else:
        n = total_n if total_n is not None else X.shape[0]
        reward = models.minibatch_log_reward(G, theta, minibatch, n, cfg)
        reward_next = models.minibatch_log_reward(G_next, theta_next, minibatch, n, cfg)
    log_pb = -math.log(G_next.num_edges)
    up = reward_next + log_pb + policy.log_pf_theta(G, theta)
    down = reward + policy.log_pf_edge(G, G_next) + policy.log_pf_theta(G_next, theta_next)
    return up - down


@dataclass
class LossResult:
    value: float
    grads: dict[str, np.ndarray]
    residuals: np.ndarray
    penalty: float
    theta_parent: np.ndarray
    theta_child: np.ndarray


def _stack_states(states: list[DagState]) -> tuple[np.ndarray, np.ndarray]:
    adj = np.stack([s.adjacency for s in states]).astype(np.float64)
    masks = np.stack([s.mask for s in states])
    return adj, masks


def _active_stack(adj: np.ndarray, cfg: ModelConfig, p: int) -> np.ndarray:
    if cfg.kind == models.LINEAR:
        return np.swapaxes(adj, -1, -2)
    return np.ones((adj.shape[0], adj.shape[1], p))


def _diag_density(mu, var, act: np.ndarray, theta: np.ndarray):
    """Taped log-density of constant theta values under diagonal heads."""
    diff = ad.sub(theta, mu)
    per_coord = ad.sub(ad.mul(ad.add(ad.log(var), LOG_2PI), -0.5),
                       ad.div(ad.mul(diff, diff), ad.mul(var, 2.0)))
    return ad.sum_(ad.mul(per_coord, act), axis=(1, 2))


def _diag_theta_terms(mu, var, act: np.ndarray, eps: np.ndarray):
    """Sample values and their taped log-density under diagonal heads."""
    theta = (ad.value_of(mu) + np.sqrt(ad.value_of(var)) * eps) * act
    return theta, _diag_density(mu, var, act, theta)


def _full_theta_terms(mu, scale_tril, states: list[DagState], cfg: ModelConfig,
                      eps: np.ndarray, theta_values: np.ndarray | None = None):
    """Full-covariance analog of ``_diag_theta_terms`` (per-block loop)."""
    b, d, p = eps.shape
    mu_values = ad.value_of(mu)
    tril_values = ad.value_of(scale_tril)
    theta = np.zeros((b, d, p)) if theta_values is None else theta_values
    dens_parts = []
    for k, state in enumerate(states):
        act = models.active_mask(state, cfg)
        total = 0.0
        for i in range(d):
            idx = np.nonzero(act[i])[0]
            if idx.size == 0:
                continue
            block = np.ix_(idx, idx)
            if theta_values is None:
                theta[k, i, idx] = (mu_values[k, i, idx]
                                    + tril_values[k, i][block] @ eps[k, i, idx])
            total = ad.add(total, ad.gaussian_full_log_density(
                theta[k, i, idx],
                ad.getitem(mu, (k, i, idx)),
                ad.getitem(scale_tril, (k, i) + block)))
        dens_parts.append(total)
    return theta, ad.stack_scalars(dens_parts)


def loss_on_batch(policy: Policy, transitions, data, cfg: TrainerConfig, *,
                  rng: np.random.Generator | None = None,
                  eps_override: tuple[np.ndarray, np.ndarray] | None = None,
                  theta_override: tuple[np.ndarray, np.ndarray] | None = None,
                  minibatch_rows: np.ndarray | None = None) -> LossResult:
    """Loss and parameter gradients for a batch of graph transitions.

    Parameters at both endpoints are drawn on-policy from the current heads
    (reparametrized, via ``rng`` or the fixed noise in ``eps_override``).
    Each residual mixes constant reward terms with taped policy densities;
    when ``cfg.minibatch_size`` > 0 (or ``minibatch_rows`` is given), the
    rewards use the scaled mini-batch estimate instead of the full data.

    ``theta_override`` injects fixed parameter values as plain constants,
    bypassing the draw entirely; since the residual treats the draw as a
    constant anyway, gradients are identical to a run whose draw produced
    the same values (this is what the stop-gradient tests pin down).
    """
    model_cfg = policy.config.model
    X = data.observations if isinstance(data, Dataset) else ad.as_f64(data)
    total_n = X.shape[0]
    b = len(transitions)
    if b == 0:
        raise ValueError("transition batch must be nonempty")
    if cfg.penalty_weight > 0.0 and policy.config.full_covariance:
        raise ValueError("the score penalty is defined for diagonal heads only")

    parents = [t[0] for t in transitions]
    children = [t[1] for t in transitions]
    edge_i = np.array([t[2] for t in transitions])
    edge_j = np.array([t[3] for t in transitions])

    adj, masks = _stack_states(parents + children)
    p = policy.config.theta_dim
    act = _active_stack(adj, model_cfg, p)

    if rng is None and ((eps_override is None and theta_override is None)
                        or (cfg.minibatch_size > 0 and minibatch_rows is None)):
        raise ValueError("an rng is required unless noise and mini-batch rows are fixed")

    if minibatch_rows is not None:
        rows = ad.as_f64(minibatch_rows)
    elif cfg.minibatch_size > 0:
        take = rng.choice(total_n, size=min(cfg.minibatch_size, total_n), replace=False)
        rows = X[take]
    else:
        rows = X

    tape = Tape()
    param_nodes = {name: tape.leaf(value) for name, value in policy.params.items()}
    parts = policy.forward_parts(param_nodes, adj, masks)

    if theta_override is not None:
        theta = np.concatenate([theta_override[0], theta_override[1]], axis=0)
        eps = None
        if policy.config.full_covariance:
            _, dens = _full_theta_terms(parts["mu"], parts["scale_tril"],
                                        parents + children, model_cfg,
                                        np.zeros((2 * b, adj.shape[1], p)),
                                        theta_values=theta)
        else:
            dens = _diag_density(parts["mu"], parts["var"], act, theta)
    else:
        if eps_override is not None:
            eps = np.concatenate([eps_override[0], eps_override[1]], axis=0)
        else:
            eps = rng.standard_normal((2 * b, adj.shape[1], p))
        if policy.config.full_covariance:
            theta, dens = _full_theta_terms(parts["mu"], parts["scale_tril"],
                                            parents + children, model_cfg, eps)
        else:
            theta, dens = _diag_theta_terms(parts["mu"], parts["var"], act, eps)

    rewards = models.batched_log_rewards(adj, theta, rows, total_n, model_cfg)
    log_pb = -np.log([c.num_edges for c in children])
    const = (rewards[b:] - rewards[:b]) + log_pb

    side_g = (slice(0, b),)
    side_gp = (slice(b, 2 * b),)
    log_pf_theta_g = ad.add(ad.getitem(parts["log_pstop"], side_g),
                            ad.getitem(dens, side_g))
    log_pf_theta_gp = ad.add(ad.getitem(parts["log_pstop"], side_gp),
                             ad.getitem(dens, side_gp))
    log_pf_edge = ad.add(ad.getitem(parts["log_cont"], side_g),
                         ad.getitem(parts["edge_log_probs"],
                                    (np.arange(b), edge_i, edge_j)))

    residual = ad.add(const, ad.sub(log_pf_theta_g,
                                    ad.add(log_pf_edge, log_pf_theta_gp)))
    if cfg.huber_delta is None or math.isinf(cfg.huber_delta):
        loss_node = ad.mean_(ad.mul(residual, residual))
    else:
        loss_node = ad.mean_(ad.huber(residual, cfg.huber_delta))

    penalty_value = 0.0
    if cfg.penalty_weight > 0.0:
        if eps is not None:
            # reparametrized draw: the penalty alone differentiates through it
            theta_node = ad.mul(ad.add(parts["mu"],
                                       ad.mul(ad.sqrt(parts["var"]), eps)), act)
        else:
            theta_node = theta
        score_pf = ad.mul(ad.div(ad.sub(parts["mu"], theta_node), parts["var"]), act)
        score_r = models.theta_score_ops(adj, theta_node, rows, total_n, model_cfg)
        gap = ad.sub(score_pf, score_r)
        penalty_node = ad.mul(ad.sum_(ad.mul(gap, gap)),
                              cfg.penalty_weight / (2.0 * b))
        penalty_value = float(ad.value_of(penalty_node))
        loss_node = ad.add(loss_node, penalty_node)

    names = list(policy.params)
    grad_list = ad.grad(tape, loss_node, [param_nodes[n] for n in names])
    return LossResult(
        value=float(ad.value_of(loss_node)),
        grads=dict(zip(names, grad_list)),
        residuals=ad.value_of(residual).copy(),
        penalty=penalty_value,
        theta_parent=theta[:b],
        theta_child=theta[b:],
    )


# ---------------------------------------------------------------------------
# Environment interaction and the training loop
# ---------------------------------------------------------------------------


def collect_transitions(policy: Policy, state: DagState, buffer: ReplayBuffer,
                        steps: int, rng: np.random.Generator,
                        exploration_eps: float) -> DagState:
    """Advance the environment ``steps`` actions, pushing edge transitions.

    Stop actions (sampled or forced at saturated graphs) reset the
    trajectory to the empty graph and store nothing.
    """
    from .policy import sample_action

    for _ in range(steps):
        action = sample_action(policy, state, rng, exploration_eps)
        if action.is_stop:
            state = empty_state(policy.d)
        else:
            buffer.push(state, action.source, action.target)
            state = apply_add_edge(state, action.source, action.target)
    return state


def train(data: Dataset, policy_cfg: PolicyConfig, cfg: TrainerConfig, *,
          initial_policy: Policy | None = None, start_update: int = 0,
          callback=None) -> tuple[Policy, list[LossReport]]:
    """Run the training loop and return the policy plus its history.

    ``callback(update, report, policy)`` is invoked after every update when
    provided (checkpoint cadence, logging). ``initial_policy`` with
    ``start_update`` resumes a previous run: updates continue from that
    index up to ``cfg.total_updates``. Raises TrainingDiverged with a
    diagnostic snapshot when the loss or the parameters go non-finite.
    """
    if data.d != policy_cfg.d:
        raise ValueError("data dimensionality does not match the policy")
    if policy_cfg.d < 2:
        raise ValueError("training requires at least two variables")
    if start_update > 0:
        rng = np.random.default_rng([cfg.seed, start_update])
    else:
        rng = np.random.default_rng(cfg.seed)
    policy = initial_policy if initial_policy is not None else Policy.initialize(
        policy_cfg, rng)
    buffer = ReplayBuffer(cfg.buffer_capacity, policy_cfg.d)
    optimizer = Adam(policy.params, cfg.learning_rate)
    state = empty_state(policy_cfg.d)
    empty = state
    history: list[LossReport] = []

    for update in range(start_update, cfg.total_updates):
        eps = cfg.exploration_at(update)
        state = collect_transitions(policy, state, buffer, cfg.env_steps_per_update,
                                    rng, eps)
        if len(buffer) == 0:
            continue
        batch = buffer.sample(rng, cfg.batch_size)
        result = loss_on_batch(policy, batch, data, cfg, rng=rng)
        if not math.isfinite(result.value):
            raise TrainingDiverged(
                f"non-finite loss at update {update}",
                diagnostics=_diagnostics(update, result, history))
        grad_norm = clip_global_norm(result.grads, cfg.grad_clip)
        optimizer.lr = cfg.learning_rate_at(update)
        optimizer.step(policy.params, result.grads)
        try:
            ad.check_finite(policy.params, f"update {update}")
        except FloatingPointError as err:
            raise TrainingDiverged(str(err),
                                   diagnostics=_diagnostics(update, result, history))
        report = LossReport(
            update=update,
            loss=result.value,
            mean_abs_residual=float(np.mean(np.abs(result.residuals))),
            penalty=result.penalty,
            p_stop_empty=policy.forward(empty).p_stop,
            grad_norm=grad_norm,
        )
        history.append(report)
        if callback is not None:
            callback(update, report, policy)
    return policy, history


def _diagnostics(update: int, result: LossResult, history: list[LossReport]) -> dict:
    recent = history[-5:]
    return {
        "update": update,
        "loss": result.value,
        "penalty": result.penalty,
        "residual_min": float(np.min(result.residuals)),
        "residual_max": float(np.max(result.residuals)),
        "recent_losses": [r.loss for r in recent],
    }
