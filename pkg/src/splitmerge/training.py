"""Training regimes: maximum likelihood through the merge chain, score-function
(REINFORCE) gradients for the split, baselines, depth schedule, lr/epoch decay,
and the orchestrating train loop."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .checkpoint import save_checkpoint
from .merge import chain_nll, recursive_merge
from .optim import make_optimizer
from .split import (normalize_input, sample_tree, split_balance_regularizer,
                    tree_log_density)

__all__ = [
    "TrainingConfig", "resolve_config", "depth_schedule", "mle_loss",
    "reinforce_grad", "reinforce_surrogate", "reward_loss", "train_loop",
    "TrainingDiverged", "episode_rng", "TASK_DEFAULTS",
]


class TrainingDiverged(RuntimeError):
    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


# default depth bands: (upper bound exclusive, scales); clamps to the last entry
TRAIN_BANDS = [[12, 0], [25, 1], [50, 2], [100, 3], [None, 4]]
TEST_BANDS = [[25, 0], [50, 1], [100, 2], [200, 3], [None, 4]]


def depth_schedule(n: int, phase: str, bands=None) -> int:
    if n < 1:
        raise ValueError("n must be >= 1")
    if bands is None:
        bands = TRAIN_BANDS if phase == "train" else TEST_BANDS
    for upper, j in bands:
        if upper is None or n < upper:
            return int(j)
    return int(bands[-1][1])


@dataclass
class TrainingConfig:
    task: str
    epochs: int = 10
    batch_size: int | None = None
    samples: int | None = None            # S for the score-function estimator
    baseline: str = "mean-of-samples"     # none | mean-of-samples
    reg_weight: float | None = None       # lambda for the balance regularizer
    eps: float = 1e-6
    seed: int = 0
    split_optimizer: str = "rmsprop"
    split_rate: float = 0.01
    merge_optimizer: str = "adam"
    merge_rate: float = 0.001
    grad_clip: float = 5.0
    depth_train_bands: list | None = None
    depth_test_bands: list | None = None
    split_hidden: int | None = None
    split_layers: int | None = None
    merge_hidden: int | None = None
    merge_layers: int | None = None
    leaf_threshold: int | None = None
    stage1_epochs: int = 0                # merge-only epochs before joint training
    train_split: bool = True
    binarize_on_plateau: bool = True
    plateau_epochs: int = 3
    plateau_rel_improvement: float = 0.01
    alpha: float = 0.5                    # knapsack round fill fraction
    rounds: int | None = None             # knapsack episode rounds
    max_scales: int | None = None         # clustering/tsp tree depth override
    beam_width: int = 40
    eval_samples: int | None = None
    dev_size: int = 64
    out_dir: str | None = None
    dataset: str | None = None


TASK_DEFAULTS = {
    "hull": dict(batch_size=128, samples=8, reg_weight=1.0, split_hidden=15,
                 split_layers=5, merge_hidden=512, leaf_threshold=6, eval_samples=1),
    "clustering": dict(batch_size=256, samples=8, reg_weight=0.0, split_hidden=32,
                       split_layers=20, leaf_threshold=2, eval_samples=8),
    "knapsack": dict(batch_size=512, samples=8, reg_weight=0.0, split_hidden=32,
                     split_layers=5, rounds=3, eval_samples=8),
    "tsp": dict(batch_size=32, samples=4, reg_weight=1.0, split_hidden=20,
                split_layers=6, merge_hidden=20, merge_layers=20, max_scales=1,
                leaf_threshold=4, eval_samples=4),
}


def resolve_config(cfg: TrainingConfig) -> TrainingConfig:
    """Fill unset fields from the per-task defaults."""
    if cfg.task not in TASK_DEFAULTS:
        raise ValueError(f"unknown task {cfg.task!r}")
    for key, value in TASK_DEFAULTS[cfg.task].items():
        if getattr(cfg, key) is None:
            setattr(cfg, key, value)
    if cfg.samples is not None and cfg.samples < 1:
        raise ValueError("samples must be >= 1")
    for rate in (cfg.split_rate, cfg.merge_rate):
        if rate <= 0:
            raise ValueError("learning rates must be positive")
    return cfg


def config_to_dict(cfg: TrainingConfig) -> dict:
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}


def episode_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Deterministic per-episode stream derived from the master seed."""
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, index]))


# ---------------------------------------------------------------------------
# estimators


def reinforce_surrogate(f_values, log_densities, baseline: str = "none") -> Tensor:
    """Build S^-1 sum_s (F_s - b) * logdens_s on the tape.

    Differentiating this surrogate gives the score-function gradient estimate
    of grad E[F]; F values are constants (detached).
    """
    f = np.asarray(f_values, dtype=np.float64)
    if len(f) != len(log_densities):
        raise ValueError("one F value per log-density")
    if not np.isfinite(f).all():
        raise ValueError("non-finite F values")
    b = f.mean() if baseline == "mean-of-samples" else 0.0
    total = None
    for fs, ld in zip(f, log_densities):
        term = ad.scale(ld, (float(fs) - b) / len(f))
        total = term if total is None else ad.add(total, term)
    return total


def reinforce_grad(f_values, log_density_fns, params: dict, baseline: str = "none") -> dict:
    """Score-function gradient estimate w.r.t. ``params``.

    ``log_density_fns`` are thunks that rebuild each sample's log-density on
    the active tape (so the same sampled structures can be re-evaluated).
    Returns the adjoint map name -> gradient array.
    """
    for p in params.values():
        p.zero_grad()
    with Tape() as tape:
        lds = [fn() for fn in log_density_fns]
        tape.backward(reinforce_surrogate(f_values, lds, baseline))
    return {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
            for name, p in params.items()}


def mle_loss(batch, split_model, merge_model, samples: int, max_depth: int,
             leaf_threshold: int, rng: np.random.Generator, eps: float = 1e-6,
             binarize_fine: bool = False):
    """Monte-Carlo likelihood loss through the stochastic chain.

    ``batch`` holds (raw_points, target element ids) pairs. Returns
    (loss value, merge-parameter adjoint map). At depth 0 this is exactly the
    teacher-forced pointer-net cross entropy.
    """
    for p in merge_model.params.values():
        p.zero_grad()
    total_val = 0.0
    with Tape() as tape:
        total = None
        for raw, targets in batch:
            elements = normalize_input(np.asarray(raw)).elements
            for _ in range(samples):
                tree = sample_tree(raw, split_model, max_depth, leaf_threshold, rng)
                res = recursive_merge(tree, merge_model, elements,
                                      "teacher-forced-at-root", target_ids=targets,
                                      eps=eps, binarize_fine=binarize_fine)
                nll = ad.scale(chain_nll(res), 1.0 / (samples * len(batch)))
                total = nll if total is None else ad.add(total, nll)
        tape.backward(total)
        total_val = total.item()
    grads = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
             for name, p in merge_model.params.items()}
    return total_val, grads


def reward_loss(batch, split_model, reward_fn, samples: int, max_depth: int,
                leaf_threshold: int, rng: np.random.Generator,
                baseline: str = "mean-of-samples", reg_weight: float = 0.0,
                adjacency_fn=None):
    """Negative expected reward with REINFORCE gradients for the split.

    ``reward_fn(raw, leaves)`` scores a sampled partition (leaf index sets).
    Returns (loss value, split adjoint map, mean reward).
    """
    for p in split_model.params.values():
        p.zero_grad()
    mean_rewards = []
    with Tape() as tape:
        total = None
        for raw in batch:
            raw = np.asarray(raw, dtype=np.float64)
            adjacency = adjacency_fn(raw) if adjacency_fn is not None else None
            rewards, lds, regs = [], [], []
            for _ in range(samples):
                tree = sample_tree(raw, split_model, max_depth, leaf_threshold,
                                   rng, adjacency=adjacency)
                rewards.append(reward_fn(raw, [v.indices for v in tree.leaves]))
                lds.append(tree_log_density(tree, split_model, raw, adjacency=adjacency))
                if reg_weight > 0 and tree.sampling_nodes:
                    regs.append(split_balance_regularizer(tree, split_model, raw,
                                                          adjacency=adjacency))
            surr = ad.neg(reinforce_surrogate(rewards, lds, baseline))
            term = ad.scale(surr, 1.0 / len(batch))
            if regs:
                reg = None
                for r in regs:
                    reg = r if reg is None else ad.add(reg, r)
                term = ad.add(term, ad.scale(reg, reg_weight / (samples * len(batch))))
            total = term if total is None else ad.add(total, term)
            mean_rewards.append(float(np.mean(rewards)))
        tape.backward(total)
    grads = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
             for name, p in split_model.params.items()}
    mean_reward = float(np.mean(mean_rewards))
    return -mean_reward, grads, mean_reward


# ---------------------------------------------------------------------------
# the loop


@dataclass
class TrainState:
    epoch: int = 1
    binarize_fine: bool = False
    loss_history: list = field(default_factory=list)
    best_metric: float | None = None
    stage: int = 1


def _plateau(history, k: int, rel: float) -> bool:
    if len(history) < k + 1:
        return False
    for prev, cur in zip(history[-k - 1:-1], history[-k:]):
        if prev - cur > rel * abs(prev):
            return False
    return True


def train_loop(cfg: TrainingConfig, instances, adapter, out_dir,
               models=None, optimizers=None, state: TrainState | None = None):
    """Epoch/batch orchestration: deterministic given (config, seed).

    Writes one JSON metrics record per epoch to ``metrics.jsonl`` and keeps
    ``last.ckpt.json`` / ``best.ckpt.json`` in ``out_dir``. Aborts with a
    diagnostic dump on non-finite loss.
    """
    cfg = resolve_config(cfg)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not instances:
        raise ValueError("empty dataset")
    build_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 771]))
    if models is None:
        models = adapter.build_models(cfg, build_rng, instances)
    if optimizers is None:
        optimizers = {}
        if cfg.train_split and models.get("split") is not None:
            optimizers["split"] = make_optimizer(cfg.split_optimizer,
                                                 models["split"].params, cfg.split_rate)
        if models.get("merge") is not None:
            optimizers["merge"] = make_optimizer(cfg.merge_optimizer,
                                                 models["merge"].params, cfg.merge_rate)
    state = state or TrainState()
    metrics_path = out_dir / "metrics.jsonl"
    mode = "a" if state.epoch > 1 and metrics_path.exists() else "w"
    metrics_f = open(metrics_path, mode)

    dev = instances[: min(cfg.dev_size, len(instances))]
    try:
        for epoch in range(state.epoch, cfg.epochs + 1):
            state.epoch = epoch
            state.stage = 1 if epoch <= cfg.stage1_epochs else 2
            for opt in optimizers.values():
                opt.set_epoch(epoch)
            order = np.random.default_rng(
                np.random.SeedSequence([cfg.seed, epoch, 31337])).permutation(len(instances))
            epoch_loss, nbatch = 0.0, 0
            stats_acc: dict[str, list] = {}
            for start in range(0, len(order), cfg.batch_size):
                batch_idx = order[start:start + cfg.batch_size]
                for opt in optimizers.values():
                    opt.zero_grad()
                batch_loss = 0.0
                with Tape() as tape:
                    total = None
                    for bi in batch_idx:
                        erng = episode_rng(cfg.seed, epoch, int(bi))
                        loss_t, stats = adapter.episode_loss(
                            models, instances[int(bi)], cfg, erng, state)
                        term = ad.scale(loss_t, 1.0 / len(batch_idx))
                        total = term if total is None else ad.add(total, term)
                        for k, v in stats.items():
                            stats_acc.setdefault(k, []).append(v)
                    if not np.isfinite(total.data):
                        dump = out_dir / "diverged.json"
                        dump.write_text(json.dumps({
                            "epoch": epoch, "batch_start": int(start),
                            "loss": float(total.data),
                        }))
                        raise TrainingDiverged(f"non-finite loss at epoch {epoch}", dump)
                    tape.backward(total)
                    batch_loss = total.item()
                for opt in optimizers.values():
                    if cfg.grad_clip > 0:
                        opt.clip_global_norm(cfg.grad_clip)
                    opt.step()
                epoch_loss += batch_loss
                nbatch += 1
            epoch_loss /= max(nbatch, 1)

            dev_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch, 99]))
            metric = adapter.dev_metric(models, dev, cfg, dev_rng, state)
            record = {
                "epoch": epoch,
                "loss": epoch_loss,
                "task_metric": metric,
                "mean_alpha": _mean(stats_acc.get("alpha")),
                "mean_tree_cost": _mean(stats_acc.get("tree_cost")),
                "root_alpha_dev": _mean(stats_acc.get("root_alpha_dev")),
                "lr": {role: opt.effective_rate for role, opt in optimizers.items()},
                "binarize_fine": state.binarize_fine,
                "stage": state.stage,
            }
            metrics_f.write(json.dumps(record, sort_keys=True) + "\n")
            metrics_f.flush()

            plateau_loss = _mean(stats_acc.get("plateau_loss"))
            state.loss_history.append(epoch_loss if plateau_loss is None else plateau_loss)
            if (cfg.binarize_on_plateau and not state.binarize_fine
                    and adapter.uses_chain and state.stage == 2
                    and _plateau(state.loss_history, cfg.plateau_epochs,
                                 cfg.plateau_rel_improvement)):
                state.binarize_fine = True

            meta = {"task": cfg.task, "epoch": epoch, "seed": cfg.seed,
                    "config": config_to_dict(cfg), "binarize_fine": state.binarize_fine,
                    "metric": metric}
            save_checkpoint(out_dir / "last.ckpt.json", models, optimizers, meta)
            signed = adapter.metric_sign * metric if metric is not None else None
            if signed is not None and (state.best_metric is None or signed > state.best_metric):
                state.best_metric = signed
                save_checkpoint(out_dir / "best.ckpt.json", models, optimizers, meta)
    finally:
        metrics_f.close()
    return models, optimizers, state


def _mean(values):
    if not values:
        return None
    return float(np.mean(values))
