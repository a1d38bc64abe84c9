"""Quality metrics for a trained sampler: sample-based posterior features,
RMSE/Pearson agreement with an exact posterior, parameter cross-entropy,
held-out likelihood, structural distances, the terminating-probability
estimator (beam search plus rejection-sampled trajectories), and a robust
slope fit for the reward-versus-probability diagnostic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import exact, models
from .dags import DagState, feature_indicators
from .models import ModelConfig, ParamSet


@dataclass
class SampleBag:
    """Pairs (G, theta) drawn from a trained policy."""

    pairs: list[tuple[DagState, ParamSet]]

    def __post_init__(self):
        for g, theta in self.pairs:
            if theta.per_node.shape[0] != g.d:
                raise ValueError("parameter set does not match its graph")

    def __len__(self) -> int:
        return len(self.pairs)


def draw_sample_bag(policy, n: int, rng: np.random.Generator) -> SampleBag:
    from .policy import sample_trajectory

    pairs = []
    for _ in range(n):
        _, graph = sample_trajectory(policy, rng)
        theta, _ = policy.sample_theta(graph, rng)
        pairs.append((graph, theta))
    return SampleBag(pairs)


# ---------------------------------------------------------------------------
# Feature agreement
# ---------------------------------------------------------------------------


def feature_estimates(bag: SampleBag) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Empirical edge / path / Markov-blanket frequencies over the bag."""
    if len(bag) == 0:
        raise ValueError("sample bag is empty")
    d = bag.pairs[0][0].d
    sums = [np.zeros((d, d)) for _ in range(3)]
    for graph, _ in bag.pairs:
        for total, ind in zip(sums, feature_indicators(graph)):
            total += ind
    return tuple(total / len(bag) for total in sums)


def rmse_and_pearson(est: np.ndarray, reference: np.ndarray) -> tuple[float, float]:
    """Off-diagonal RMSE and Pearson correlation between feature matrices.

    Returns NaN for the correlation when either side has zero variance.
    """
    est, reference = np.asarray(est, dtype=float), np.asarray(reference, dtype=float)
    if est.shape != reference.shape:
        raise ValueError("feature matrices must have the same shape")
    off = ~np.eye(est.shape[0], dtype=bool)
    a, b = est[off], reference[off]
    rmse = float(np.sqrt(np.mean((a - b) ** 2)))
    sa, sb = a.std(), b.std()
    if sa == 0.0 or sb == 0.0:
        return rmse, float("nan")
    r = float(np.mean((a - a.mean()) * (b - b.mean())) / (sa * sb))
    return rmse, r


def cross_entropy_theta(bag: SampleBag, posterior: exact.ExactPosterior) -> float:
    """Mean negative log-density of sampled parameters under the exact
    per-graph posterior."""
    if len(bag) == 0:
        raise ValueError("sample bag is empty")
    total = 0.0
    for graph, theta in bag.pairs:
        total -= exact.posterior_theta_log_density(theta, graph, posterior)
    return total / len(bag)


def heldout_nll(bag: SampleBag, heldout: np.ndarray, cfg: ModelConfig) -> float:
    """Expected per-observation negative log-likelihood on held-out rows,
    averaged over posterior samples (mean of negative logs)."""
    if len(bag) == 0:
        raise ValueError("sample bag is empty")
    heldout = np.asarray(heldout, dtype=np.float64)
    total = 0.0
    for graph, theta in bag.pairs:
        total += -models.per_observation_log_likelihood(graph, theta, heldout, cfg).mean()
    return total / len(bag)


def structural_hamming_distance(G: DagState, reference: DagState) -> int:
    """Edge changes (additions, deletions, reversals each count one) needed
    to turn G into the reference."""
    a, r = G.adjacency, reference.adjacency
    upper = np.triu_indices(G.d, k=1)
    pair_a = np.stack([a[upper], a.T[upper]])
    pair_r = np.stack([r[upper], r.T[upper]])
    return int(np.any(pair_a != pair_r, axis=0).sum())


def expected_shd(bag: SampleBag, reference: DagState) -> float:
    if len(bag) == 0:
        raise ValueError("sample bag is empty")
    return float(np.mean([structural_hamming_distance(g, reference)
                          for g, _ in bag.pairs]))


def auroc(edge_features: np.ndarray, reference: DagState) -> float:
    """Rank-based area under the ROC curve of off-diagonal edge scores
    against the reference adjacency; ties count one half. NaN when the
    reference has no positive or no negative labels."""
    off = ~np.eye(reference.d, dtype=bool)
    scores = np.asarray(edge_features, dtype=float)[off]
    labels = reference.adjacency[off]
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # midrank, 1-based
        i = j + 1
    rank_sum = float(ranks[labels].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


# ---------------------------------------------------------------------------
# Terminating-state probability estimation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EstimatorConfig:
    beam_size: int = 64
    mc_trajectories: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.beam_size < 0 or self.mc_trajectories < 1:
            raise ValueError("beam size must be >= 0 and trajectory count >= 1")


class _ForwardCache:
    """Memoizes per-state continuation log-probabilities for one policy."""

    def __init__(self, policy, store: dict | None = None):
        self.policy = policy
        self.store = store if store is not None else {}

    def step_logp(self, state: DagState, i: int, j: int) -> float:
        entry = self.store.get(state.key)
        if entry is None:
            fd = self.policy.forward(state)
            entry = fd.log_1m_p_stop + fd.edge_log_probs
            self.store[state.key] = entry
        return float(entry[i, j])


def _order_log_prob(order: tuple[int, ...], edges: list[tuple[int, int]],
                    cache: _ForwardCache, d: int) -> float:
    from .dags import apply_add_edge, empty_state

    state = empty_state(d)
    total = 0.0
    for k in order:
        i, j = edges[k]
        total += cache.step_logp(state, i, j)
        state = apply_add_edge(state, i, j)
    return total


def exhaustive_log_reach_prob(G: DagState, policy) -> float:
    """Exact log marginal probability of reaching G, summing all K! orders."""
    from itertools import permutations

    edges = G.edges()
    if len(edges) > 8:
        raise ValueError("exhaustive sum is limited to 8 edges")
    cache = _ForwardCache(policy)
    logs = [_order_log_prob(order, edges, cache, G.d)
            for order in permutations(range(len(edges)))]
    return _logsumexp(np.array(logs)) if logs else 0.0


def _logsumexp(values: np.ndarray) -> float:
    top = values.max()
    return float(top + np.log(np.exp(values - top).sum()))


def _log_factorial_minus(k: int, b: int) -> float:
    """log(K! - b), exact through 64-bit range, Stirling beyond."""
    if k <= 20:
        return math.log(math.factorial(k) - b)
    return math.lgamma(k + 1) + math.log1p(-b / math.exp(
        min(math.lgamma(k + 1), 700.0)))


def _beam_orders(G: DagState, cache: _ForwardCache, beam_size: int
                 ) -> list[tuple[tuple[int, ...], float]]:
    """Top-scoring edge-insertion orders by level-wise beam expansion,
    keeping only transitions that add edges of G."""
    from .dags import apply_add_edge, empty_state

    edges = G.edges()
    items = [((), 0.0, empty_state(G.d))]
    for _ in range(len(edges)):
        expanded = []
        for order, logp, state in items:
            used = set(order)
            for k in range(len(edges)):
                if k in used:
                    continue
                i, j = edges[k]
                expanded.append((order + (k,), logp + cache.step_logp(state, i, j),
                                 apply_add_edge(state, i, j)))
        expanded.sort(key=lambda item: (-item[1], item[0]))
        items = expanded[:beam_size]
    return [(order, logp) for order, logp, _ in items]


def estimate_log_pT(G: DagState, theta: ParamSet, policy,
                    cfg: EstimatorConfig, rng: np.random.Generator | None = None,
                    cache: dict | None = None) -> float:
    """Estimate of the log terminating-state probability of (G, theta).

    The structural part sums the exact probabilities of the top beam
    trajectories and adds an unbiased correction from uniformly sampled
    edge orders rejected against the beam set; the parameter part is the
    policy's log-density of theta at G. With beam size at least K! the sum
    is exact and nothing is sampled.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    forward_cache = _ForwardCache(policy, cache)
    k = G.num_edges
    theta_term = policy.log_pf_theta(G, theta)
    if k == 0:
        return theta_term  # the empty graph is reached with probability 1

    k_factorial = math.factorial(k) if k <= 20 else None
    beam_size = cfg.beam_size
    if k_factorial is not None and beam_size > k_factorial:
        beam_size = k_factorial

    beam_logs: list[float] = []
    beam_set: set[tuple[int, ...]] = set()
    if beam_size > 0:
        for order, logp in _beam_orders(G, forward_cache, beam_size):
            beam_set.add(order)
            beam_logs.append(logp)

    parts = []
    if beam_logs:
        parts.append(_logsumexp(np.array(beam_logs)))

    remaining_exact = None if k_factorial is None else k_factorial - beam_size
    if remaining_exact is None or remaining_exact > 0:
        edges = G.edges()
        mc_logs = np.empty(cfg.mc_trajectories)
        for m in range(cfg.mc_trajectories):
            while True:
                order = tuple(int(x) for x in rng.permutation(k))
                if order not in beam_set:
                    break
            mc_logs[m] = _order_log_prob(order, edges, forward_cache, G.d)
        parts.append(_log_factorial_minus(k, beam_size)
                     - math.log(cfg.mc_trajectories) + _logsumexp(mc_logs))

    return _logsumexp(np.array(parts)) + theta_term


# ---------------------------------------------------------------------------
# Robust slope fit
# ---------------------------------------------------------------------------


def ransac_slope(points, rng: np.random.Generator | None = None,
                 proposals: int = 1000) -> tuple[float, float, int]:
    """Robust line fit: random point pairs propose lines, the largest inlier
    set (residuals within 1.4826 x the MAD of an initial least-squares fit)
    wins, and the winner is refit by least squares on its inliers.

    Returns (slope, intercept, inlier count); slope and intercept are NaN
    when all abscissae coincide.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
        raise ValueError("need at least two (x, y) points")
    x, y = pts[:, 0], pts[:, 1]
    if np.all(x == x[0]):
        return float("nan"), float("nan"), 0
    if rng is None:
        rng = np.random.default_rng(0)

    slope0, intercept0 = _least_squares_line(x, y)
    resid = y - (slope0 * x + intercept0)
    mad = float(np.median(np.abs(resid - np.median(resid))))
    threshold = max(1.4826 * mad, 1e-9)

    if pts.shape[0] == 2:
        return _exact_two_point_line(x, y) + (2,)

    best_count = -1
    best_inliers = None
    for _ in range(proposals):
        a, b = rng.choice(pts.shape[0], size=2, replace=False)
        if x[a] == x[b]:
            continue
        slope = (y[b] - y[a]) / (x[b] - x[a])
        intercept = y[a] - slope * x[a]
        inliers = np.abs(y - (slope * x + intercept)) <= threshold
        count = int(inliers.sum())
        if count > best_count:
            best_count = count
            best_inliers = inliers
    if best_inliers is None or best_count < 2:
        slope, intercept = _least_squares_line(x, y)
        return slope, intercept, pts.shape[0]
    slope, intercept = _least_squares_line(x[best_inliers], y[best_inliers])
    return slope, intercept, best_count


def _least_squares_line(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    xm, ym = x.mean(), y.mean()
    slope = float(((x - xm) * (y - ym)).sum() / ((x - xm) ** 2).sum())
    return slope, float(ym - slope * xm)


def _exact_two_point_line(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    slope = float((y[1] - y[0]) / (x[1] - x[0]))
    return slope, float(y[0] - slope * x[0])


# ---------------------------------------------------------------------------
# Report artifacts
# ---------------------------------------------------------------------------


def write_scatter_csv(path, rows) -> None:
    """Rows of (log_reward, log_pT, num_edges), full round-trip precision."""
    with open(path, "w") as fh:
        fh.write("log_reward,log_pT,num_edges\n")
        for log_r, log_pt, edges in rows:
            fh.write(f"{log_r!r},{log_pt!r},{edges}\n")


def write_scatter_svg(path, rows, slope: float, intercept: float) -> None:
    """Minimal standalone SVG scatter of log_pT against log_reward with the
    fitted line overlaid."""
    pts = np.asarray([(r[0], r[1]) for r in rows], dtype=float)
    width, height, margin = 640, 480, 50
    x0, x1 = pts[:, 0].min(), pts[:, 0].max()
    y0, y1 = pts[:, 1].min(), pts[:, 1].max()
    xspan = (x1 - x0) or 1.0
    yspan = (y1 - y0) or 1.0

    def sx(x):
        return margin + (x - x0) / xspan * (width - 2 * margin)

    def sy(y):
        return height - margin - (y - y0) / yspan * (height - 2 * margin)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<text x="{width // 2}" y="{height - 10}" text-anchor="middle" '
        f'font-size="12">log reward</text>',
        f'<text x="14" y="{height // 2}" font-size="12" '
        f'transform="rotate(-90 14 {height // 2})">log terminating probability</text>',
    ]
    for x, y in pts:
        parts.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="2.5" '
                     f'fill="steelblue" fill-opacity="0.6"/>')
    if math.isfinite(slope):
        ya, yb = slope * x0 + intercept, slope * x1 + intercept
        parts.append(f'<line x1="{sx(x0):.2f}" y1="{sy(ya):.2f}" x2="{sx(x1):.2f}" '
                     f'y2="{sy(yb):.2f}" stroke="crimson" stroke-width="1.5"/>')
        parts.append(f'<text x="{width - margin}" y="{margin}" text-anchor="end" '
                     f'font-size="12">slope {slope:.3f}</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts))
