"""0-1 knapsack: generator, exact DP and greedy baselines, and the recursive
budget-filling selection episode driven by a split network."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from ..split import normalize_input

__all__ = [
    "KnapsackInstance", "gen_knapsack", "knapsack_dp", "dantzig_greedy",
    "KnapsackEpisode", "dcn_knapsack_episode", "knapsack_episode_log_density",
]

WEIGHT_SCALE = 10_000   # continuous weights are floored onto this grid for the DP


@dataclass
class KnapsackInstance:
    values: np.ndarray
    weights: np.ndarray
    capacity: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.capacity <= 0 or np.any(self.weights < 0):
            raise ValueError("capacity must be positive and weights nonnegative")

    @property
    def n(self) -> int:
        return len(self.values)


def gen_knapsack(n: int, count: int, rng: np.random.Generator) -> list:
    """Values and weights uniform on [0,1], capacity uniform on [0.2n, 0.3n]."""
    out = []
    for _ in range(count):
        out.append(KnapsackInstance(
            values=rng.uniform(size=n),
            weights=rng.uniform(size=n),
            capacity=float(rng.uniform(0.2 * n, 0.3 * n)),
        ))
    return out


def discretize(inst: KnapsackInstance, scale: int = WEIGHT_SCALE):
    """Integer weights (floored) and capacity (ceiled): a relaxation of the
    original instance, so the DP optimum upper-bounds the true optimum."""
    w = np.floor(inst.weights * scale).astype(np.int64)
    cap = int(np.ceil(inst.capacity * scale))
    return w, cap


def knapsack_dp(inst: KnapsackInstance, scale: int = WEIGHT_SCALE):
    """Exact optimum of the discretized instance via the O(nW) table.

    Returns (value, selection indices sorted ascending).
    """
    w, cap = discretize(inst, scale)
    n = inst.n
    best = np.zeros(cap + 1)
    take = np.zeros((n, cap + 1), dtype=bool)
    for i in range(n):
        wi, vi = int(w[i]), inst.values[i]
        if wi > cap:
            continue
        if wi == 0:
            if vi > 0:
                best += vi
                take[i, :] = True
            continue
        cand = best[: cap + 1 - wi] + vi
        improved = cand > best[wi:]
        take[i, wi:] = improved
        best[wi:] = np.where(improved, cand, best[wi:])
    # walk the table backwards to recover one optimal selection
    sel, c = [], cap
    for i in range(n - 1, -1, -1):
        if take[i, c]:
            sel.append(i)
            c -= int(w[i])
    sel.reverse()
    return float(best[cap]), sel


def dantzig_greedy(inst: KnapsackInstance, stop_at_first_misfit: bool = False):
    """Pick items by descending value/weight ratio while they fit.

    Default tries remaining items after a misfit; the classical stop-at-first
    variant is available behind the flag.
    """
    if inst.n == 0:
        return 0.0, []
    with np.errstate(divide="ignore"):
        ratios = np.where(inst.weights > 0, inst.values / np.maximum(inst.weights, 1e-300),
                          np.inf)
    order = np.argsort(-ratios, kind="stable")
    total_v, total_w, sel = 0.0, 0.0, []
    for i in order:
        if total_w + inst.weights[i] <= inst.capacity:
            sel.append(int(i))
            total_w += inst.weights[i]
            total_v += inst.values[i]
        elif stop_at_first_misfit:
            break
    return float(total_v), sorted(sel)


# ---------------------------------------------------------------------------
# recursive selection episode


@dataclass
class RoundRecord:
    pool: list                        # item ids available this round, fixed order
    draws: list                       # (item id, accepted) in draw order


@dataclass
class KnapsackEpisode:
    selection: list
    value: float
    weight: float
    log_density: float
    rounds: list = field(default_factory=list)


def _item_features(inst: KnapsackInstance, pool) -> np.ndarray:
    # the policy sees (value, weight) pairs only; the budget acts through the
    # sampling procedure, keeping the scorer stable across round structures
    return np.stack([inst.values[pool], inst.weights[pool]], axis=1)


def dcn_knapsack_episode(inst: KnapsackInstance, split_model, alpha: float,
                         rounds: int, rng: np.random.Generator) -> KnapsackEpisode:
    """Sample a selection by filling an alpha-fraction of the remaining budget
    per round, the last round filling everything that still fits.

    Draws are multinomial without replacement over the split probabilities.
    Intermediate rounds end at the first drawn item that would overflow the
    round budget (the item stays available later); the final round skips
    misfits and keeps drawing. The capacity constraint cannot be violated.
    """
    if not (0 < alpha < 1) or rounds < 1:
        raise ValueError("need 0 < alpha < 1 and rounds >= 1")
    pool = list(range(inst.n))
    remaining = float(inst.capacity)
    episode = KnapsackEpisode(selection=[], value=0.0, weight=0.0, log_density=0.0)
    for r in range(rounds):
        if not pool or remaining <= 0:
            break
        final = r == rounds - 1
        budget = remaining if final else alpha * remaining
        rec = RoundRecord(pool=list(pool), draws=[])
        p = split_model.probs(normalize_input(_item_features(inst, pool))).data
        live = list(range(len(pool)))   # positions into rec.pool
        while live:
            fits = inst.weights[[rec.pool[q] for q in live]] <= budget + 1e-12
            if not fits.any():
                break                    # nothing can fit: round ends without a draw
            probs = p[live] / p[live].sum()
            q = live[int(rng.choice(len(live), p=probs))]
            episode.log_density += float(np.log(p[q]) - np.log(p[live].sum()))
            item = rec.pool[q]
            wi = float(inst.weights[item])
            live.remove(q)
            if wi <= budget + 1e-12:
                rec.draws.append((item, True))
                episode.selection.append(item)
                episode.value += float(inst.values[item])
                episode.weight += wi
                budget -= wi
                remaining -= wi
                pool.remove(item)
            else:
                rec.draws.append((item, False))
                if not final:
                    break                # round over; item stays in the pool
        if rec.draws:
            episode.rounds.append(rec)
    return episode


def _round_log_density_terms(rec: RoundRecord):
    """Draw positions paired with the live index set seen by each draw."""
    pos = {item: i for i, item in enumerate(rec.pool)}
    live = list(range(len(rec.pool)))
    terms = []
    for item, accepted in rec.draws:
        q = pos[item]
        terms.append((q, list(live)))
        live.remove(q)
    return terms


def knapsack_episode_log_density(inst: KnapsackInstance, split_model, episode: KnapsackEpisode):
    """Rebuild the episode's sampling log-density on the tape (differentiable)."""
    total = None
    for rec in episode.rounds:
        feats = _item_features(inst, rec.pool)
        p = split_model.probs(normalize_input(feats))
        logp = ad.log(p)
        for q, live in _round_log_density_terms(rec):
            num = ad.gather(logp, [q])
            den = ad.log(ad.sum_all(ad.gather(p, live)))
            contrib = ad.sub(ad.sum_all(num), den)
            total = contrib if total is None else ad.add(total, contrib)
    return total if total is not None else Tensor(0.0)
