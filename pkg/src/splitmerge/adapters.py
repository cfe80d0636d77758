"""Per-task glue: model construction, per-instance training episodes, dev
metrics, and full evaluation protocols."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .gnn_merge import GnnMerge
from .merge import PtrNetMerge, chain_nll, recursive_merge
from .split import (GraphSplit, Set2SetSplit, complexity_estimate,
                    normalize_input, sample_tree, split_balance_regularizer,
                    tree_log_density)
from .tasks import clustering as clus
from .tasks import hull as hull_task
from .tasks import knapsack as knap
from .tasks import tsp as tsp_task
from .training import depth_schedule, episode_rng, reinforce_surrogate

__all__ = ["TASKS", "get_adapter"]


def _tree_stats(trees):
    stats = {}
    alphas, costs, root_devs = [], [], []
    for tree in trees:
        est = complexity_estimate(tree)
        costs.append(est["cost"])
        if tree.sampling_nodes:
            alphas.append(est["mean_alpha"])
            root = tree.root
            if root.sampled:
                if root.is_leaf:
                    root_alpha = 1.0
                else:
                    root_alpha = max(c.size for c in root.children) / root.size
                root_devs.append(abs(root_alpha - 0.5))
    if alphas:
        stats["alpha"] = float(np.mean(alphas))
        stats["tree_cost"] = float(np.mean(costs))
    if root_devs:
        stats["root_alpha_dev"] = float(np.mean(root_devs))
    return stats


def _add_regularizer(loss, trees, split_model, raw, cfg, adjacency=None):
    if cfg.reg_weight <= 0:
        return loss
    terms = [split_balance_regularizer(t, split_model, raw, adjacency=adjacency)
             for t in trees if t.sampling_nodes]
    if not terms:
        return loss
    reg = terms[0]
    for t in terms[1:]:
        reg = ad.add(reg, t)
    return ad.add(loss, ad.scale(reg, cfg.reg_weight / len(terms)))


class HullAdapter:
    task = "hull"
    uses_chain = True
    metric_sign = 1   # accuracy: higher is better

    def build_models(self, cfg, rng, instances=None):
        return {
            "split": Set2SetSplit(2, cfg.split_hidden, cfg.split_layers, rng),
            "merge": PtrNetMerge(2, cfg.merge_hidden, rng),
        }

    def episode_loss(self, models, inst, cfg, erng, state):
        raw = inst.points
        elements = normalize_input(raw).elements
        if state.stage == 1:
            depth = 0
        else:
            depth = depth_schedule(inst.n, "train", cfg.depth_train_bands)
        n_samples = 1 if depth == 0 else cfg.samples
        trees, nlls = [], []
        for _ in range(n_samples):
            tree = sample_tree(raw, models["split"], depth, cfg.leaf_threshold, erng)
            res = recursive_merge(tree, models["merge"], elements,
                                  "teacher-forced-at-root", target_ids=inst.hull,
                                  eps=cfg.eps, binarize_fine=state.binarize_fine)
            trees.append(tree)
            nlls.append(chain_nll(res))
        loss = nlls[0]
        for t in nlls[1:]:
            loss = ad.add(loss, t)
        if n_samples > 1:
            loss = ad.scale(loss, 1.0 / n_samples)
        stats = _tree_stats(trees)
        stats["plateau_loss"] = loss.item()
        sampled = [t for t in trees if t.sampling_nodes]
        if sampled and cfg.train_split:
            f_values = [-nll.item() for nll, t in zip(nlls, trees) if t.sampling_nodes]
            lds = [tree_log_density(t, models["split"], raw) for t in sampled]
            loss = ad.add(loss, ad.neg(reinforce_surrogate(f_values, lds, cfg.baseline)))
            loss = _add_regularizer(loss, sampled, models["split"], raw, cfg)
        return loss, stats

    def predict(self, models, inst, cfg, erng, depth=None, binarize_fine=False):
        if depth is None:
            depth = depth_schedule(inst.n, "test", cfg.depth_test_bands)
        raw = inst.points
        tree = sample_tree(raw, models["split"], depth, cfg.leaf_threshold, erng)
        res = recursive_merge(tree, models["merge"], normalize_input(raw).elements,
                              "fully-generative", eps=cfg.eps,
                              binarize_fine=binarize_fine)
        return res.output_ids, tree, res

    def dev_metric(self, models, instances, cfg, rng, state):
        hits = 0
        for i, inst in enumerate(instances):
            pred, _, _ = self.predict(models, inst, cfg,
                                      np.random.default_rng(np.random.SeedSequence([7, i])))
            hits += hull_task.hull_accuracy(pred, inst.hull)
        return hits / max(len(instances), 1)

    def evaluate(self, models, instances, cfg, seed=0, depth=None, collect=None):
        per_size = {}
        for i, inst in enumerate(instances):
            erng = episode_rng(seed, 0, i)
            pred, tree, res = self.predict(models, inst, cfg, erng, depth=depth)
            acc = hull_task.hull_accuracy(pred, inst.hull)
            used = depth if depth is not None else depth_schedule(
                inst.n, "test", cfg.depth_test_bands)
            bucket = per_size.setdefault(inst.n, {"count": 0, "hits": 0, "splits": used})
            bucket["count"] += 1
            bucket["hits"] += acc
            if collect is not None and len(collect) < collect.maxlen:
                collect.append({"instance": i, "points": inst.points.tolist(),
                                "target": list(inst.hull), "output": list(map(int, pred)),
                                "tree": _tree_dump(tree), "chain": _chain_dump(res.chain)})
        for n, b in per_size.items():
            b["accuracy"] = b["hits"] / b["count"]
            del b["hits"]
        total = sum(b["count"] for b in per_size.values())
        overall = sum(b["accuracy"] * b["count"] for b in per_size.values()) / total
        return {"task": self.task, "per_size": {str(k): per_size[k] for k in sorted(per_size)},
                "overall_accuracy": overall, "count": total}


class KnapsackAdapter:
    task = "knapsack"
    uses_chain = False
    metric_sign = -1   # optimality ratio: lower is better

    def build_models(self, cfg, rng, instances=None):
        return {"split": GraphSplit(2, cfg.split_hidden, cfg.split_layers, rng),
                "merge": None}

    def episode_loss(self, models, inst, cfg, erng, state):
        episodes = [knap.dcn_knapsack_episode(inst, models["split"], cfg.alpha,
                                              cfg.rounds, erng)
                    for _ in range(cfg.samples)]
        f_values = [ep.value for ep in episodes]
        lds = [knap.knapsack_episode_log_density(inst, models["split"], ep)
               for ep in episodes]
        loss = ad.neg(reinforce_surrogate(f_values, lds, cfg.baseline))
        return loss, {"reward": float(np.mean(f_values))}

    def select(self, models, inst, cfg, erng, rounds=None, samples=None):
        """Best-of-samples selection scored by the observable total value."""
        rounds = rounds or cfg.rounds
        samples = samples or cfg.eval_samples
        best = None
        for _ in range(samples):
            ep = knap.dcn_knapsack_episode(inst, models["split"], cfg.alpha, rounds, erng)
            if best is None or ep.value > best.value:
                best = ep
        return best

    def dev_metric(self, models, instances, cfg, rng, state):
        ratios = []
        for i, inst in enumerate(instances):
            opt = inst.oracle["opt_value"] if getattr(inst, "oracle", None) else \
                knap.knapsack_dp(inst)[0]
            ep = self.select(models, inst, cfg,
                             np.random.default_rng(np.random.SeedSequence([7, i])),
                             samples=min(cfg.eval_samples, 4))
            ratios.append(opt / max(ep.value, 1e-9))
        return float(np.mean(ratios))

    def evaluate(self, models, instances, cfg, seed=0, splits_list=None, collect=None):
        splits_list = splits_list or [1, 2, 3, 4, 5, 6]
        per_splits = {}
        violations = 0
        for rounds in splits_list:
            ratios = []
            for i, inst in enumerate(instances):
                erng = episode_rng(seed, rounds, i)
                ep = self.select(models, inst, cfg, erng, rounds=rounds)
                opt = inst.oracle["opt_value"] if getattr(inst, "oracle", None) else \
                    knap.knapsack_dp(inst)[0]
                if ep.weight > inst.capacity + 1e-9:
                    violations += 1
                ratios.append(opt / max(ep.value, 1e-9))
                if collect is not None and len(collect) < collect.maxlen and rounds == splits_list[0]:
                    collect.append({"instance": i, "selection": list(map(int, ep.selection)),
                                    "value": ep.value, "weight": ep.weight,
                                    "capacity": inst.capacity})
            per_splits[rounds] = {"mean_ratio": float(np.mean(ratios)),
                                  "count": len(instances)}
        best = min(per_splits, key=lambda j: per_splits[j]["mean_ratio"])
        return {"task": self.task,
                "per_splits": {str(k): per_splits[k] for k in sorted(per_splits)},
                "best_splits": int(best),
                "best_mean_ratio": per_splits[best]["mean_ratio"],
                "capacity_violations": violations,
                "count": len(instances)}


class ClusteringAdapter:
    task = "clustering"
    uses_chain = False
    metric_sign = -1   # cost ratio: lower is better

    def build_models(self, cfg, rng, instances=None):
        dim = instances[0].points.shape[1] if instances else 2
        return {"split": GraphSplit(dim, cfg.split_hidden, cfg.split_layers, rng),
                "merge": None}

    def _depth(self, inst, cfg):
        return cfg.max_scales or int(np.ceil(np.log2(max(inst.k, 2))))

    def episode_loss(self, models, inst, cfg, erng, state):
        raw = inst.points
        adjacency = inst.affinity
        depth = self._depth(inst, cfg)
        trees, rewards, lds = [], [], []
        for _ in range(cfg.samples):
            tree = sample_tree(raw, models["split"], depth, cfg.leaf_threshold,
                               erng, adjacency=adjacency)
            trees.append(tree)
            rewards.append(clus.kmeans_reward(raw, [v.indices for v in tree.leaves]))
            lds.append(tree_log_density(tree, models["split"], raw, adjacency=adjacency))
        loss = ad.neg(reinforce_surrogate(rewards, lds, cfg.baseline))
        loss = _add_regularizer(loss, [t for t in trees if t.sampling_nodes],
                                models["split"], raw, cfg, adjacency=adjacency)
        stats = _tree_stats(trees)
        stats["reward"] = float(np.mean(rewards))
        return loss, stats

    def partition(self, models, inst, cfg, erng, samples=None):
        """Best-of-samples leaf partition scored by the clustering cost."""
        samples = samples or cfg.eval_samples
        depth = self._depth(inst, cfg)
        best_groups, best_cost, best_tree = None, np.inf, None
        for _ in range(samples):
            tree = sample_tree(inst.points, models["split"], depth, cfg.leaf_threshold,
                               erng, adjacency=inst.affinity)
            groups = [v.indices for v in tree.leaves]
            cost = clus.kmeans_cost(inst.points, groups)
            if cost < best_cost:
                best_groups, best_cost, best_tree = groups, cost, tree
        return best_groups, best_cost, best_tree

    def _baseline_costs(self, inst):
        meta = inst.meta
        if "rec_lloyd_cost" not in meta:
            meta["rec_lloyd_cost"] = clus.recursive_lloyd(
                inst.points, 2 ** int(np.ceil(np.log2(inst.k))), 5,
                np.random.default_rng(1234))[1]
        if "lloyd_cost" not in meta:
            meta["lloyd_cost"] = clus.lloyd(inst.points, inst.k, 5,
                                            np.random.default_rng(1234))[1]
        return meta["lloyd_cost"], meta["rec_lloyd_cost"]

    def dev_metric(self, models, instances, cfg, rng, state):
        ratios = []
        for i, inst in enumerate(instances):
            _, cost, _ = self.partition(models, inst, cfg,
                                        np.random.default_rng(np.random.SeedSequence([7, i])),
                                        samples=min(cfg.eval_samples, 4))
            _, rec = self._baseline_costs(inst)
            ratios.append(cost / max(rec, 1e-12))
        return float(np.mean(ratios))

    def evaluate(self, models, instances, cfg, seed=0, collect=None):
        per_k = {}
        for i, inst in enumerate(instances):
            erng = episode_rng(seed, 0, i)
            groups, cost, tree = self.partition(models, inst, cfg, erng)
            lloyd_cost, rec_cost = self._baseline_costs(inst)
            b = per_k.setdefault(inst.k, {"count": 0, "ratios_rec": [], "ratios_lloyd": []})
            b["count"] += 1
            b["ratios_rec"].append(cost / max(rec_cost, 1e-12))
            b["ratios_lloyd"].append(cost / max(lloyd_cost, 1e-12))
            if collect is not None and len(collect) < collect.maxlen:
                labels = np.zeros(inst.n, dtype=int)
                for gi, g in enumerate(groups):
                    labels[np.asarray(g, dtype=int)] = gi
                collect.append({"instance": i, "points": inst.points.tolist(),
                                "labels": labels.tolist(), "cost": cost,
                                "tree": _tree_dump(tree)})
        out = {}
        for k, b in per_k.items():
            out[str(k)] = {"count": b["count"],
                           "mean_ratio_rec_lloyd": float(np.mean(b["ratios_rec"])),
                           "mean_ratio_lloyd": float(np.mean(b["ratios_lloyd"]))}
        return {"task": self.task, "per_k": out,
                "count": sum(b["count"] for b in per_k.values())}


class TspAdapter:
    task = "tsp"
    uses_chain = False
    metric_sign = -1   # tour ratio: lower is better

    def build_models(self, cfg, rng, instances=None):
        return {"split": GraphSplit(2, cfg.split_hidden, cfg.split_layers, rng),
                "merge": GnnMerge(2, cfg.merge_hidden, cfg.merge_layers, 8, rng)}

    def _leaf_union_adjacency(self, inst, tree):
        adj = np.zeros((inst.n, inst.n))
        for leaf in tree.leaves:
            ids = leaf.indices
            if len(ids) < 2:
                continue
            sub = tsp_task.leaf_tour_solver(inst.points[ids])
            order = [int(ids[j]) for j in sub]
            if len(order) == 2:
                adj[order[0], order[1]] = adj[order[1], order[0]] = 1.0
            else:
                adj += tsp_task.tour_adjacency(inst.n, order)
        return adj

    def _edge_nll(self, models, inst, tree, elements):
        init_adj = self._leaf_union_adjacency(inst, tree)
        logits = models["merge"].edge_logits(elements, init_adj)
        n = inst.n
        masked = ad.add(logits, Tensor(np.diag(np.full(n, -1e9))))
        probs = ad.softmax_rows(masked)
        tour = inst.tour
        succ = {tour[i]: tour[(i + 1) % n] for i in range(n)}
        pred = {v: k for k, v in succ.items()}
        rows = np.concatenate([np.arange(n), np.arange(n)])
        cols = np.array([succ[i] for i in range(n)] + [pred[i] for i in range(n)])
        picked = ad.pick(probs, rows, cols)
        return ad.scale(ad.neg(ad.sum_all(ad.log(picked))), 1.0 / (2 * n))

    def episode_loss(self, models, inst, cfg, erng, state):
        raw = inst.points
        elements = normalize_input(raw).elements
        adjacency = inst.adjacency
        depth = cfg.max_scales or 1
        trees, nlls = [], []
        for _ in range(cfg.samples):
            tree = sample_tree(raw, models["split"], depth, cfg.leaf_threshold,
                               erng, adjacency=adjacency)
            trees.append(tree)
            nlls.append(self._edge_nll(models, inst, tree, elements))
        loss = nlls[0]
        for t in nlls[1:]:
            loss = ad.add(loss, t)
        loss = ad.scale(loss, 1.0 / len(nlls))
        stats = _tree_stats(trees)
        stats["plateau_loss"] = loss.item()
        sampled = [t for t in trees if t.sampling_nodes]
        if sampled and cfg.train_split:
            f_values = [-nll.item() for nll, t in zip(nlls, trees) if t.sampling_nodes]
            lds = [tree_log_density(t, models["split"], raw, adjacency=adjacency)
                   for t in sampled]
            loss = ad.add(loss, ad.neg(reinforce_surrogate(f_values, lds, cfg.baseline)))
            loss = _add_regularizer(loss, sampled, models["split"], raw, cfg,
                                    adjacency=adjacency)
        return loss, stats

    def predict(self, models, inst, cfg, erng, beam_width=None, samples=None):
        """Best-of-samples tour scored by the observable cycle length."""
        beam_width = beam_width or cfg.beam_width
        samples = samples or cfg.eval_samples
        depth = cfg.max_scales or 1
        best_tour, best_cost, best_tree = None, np.inf, None
        elements = normalize_input(inst.points).elements
        for _ in range(samples):
            tree = sample_tree(inst.points, models["split"], depth, cfg.leaf_threshold,
                               erng, adjacency=inst.adjacency)
            init_adj = self._leaf_union_adjacency(inst, tree)
            logits = models["merge"].edge_logits(elements, init_adj).data
            scores = np.exp(logits - logits.max())
            np.fill_diagonal(scores, 0.0)
            tour = tsp_task.beam_search_tour(scores, beam_width)
            cost = tsp_task.tour_cost(inst.points, tour)
            if cost < best_cost:
                best_tour, best_cost, best_tree = tour, cost, tree
        return best_tour, best_cost, best_tree

    def dev_metric(self, models, instances, cfg, rng, state):
        ratios = []
        for i, inst in enumerate(instances):
            _, cost, _ = self.predict(models, inst, cfg,
                                      np.random.default_rng(np.random.SeedSequence([7, i])),
                                      samples=min(cfg.eval_samples, 2))
            ratios.append(cost / inst.tour_length)
        return float(np.mean(ratios))

    def evaluate(self, models, instances, cfg, seed=0, beam_width=None, collect=None):
        per_size = {}
        ham_violations = 0
        for i, inst in enumerate(instances):
            erng = episode_rng(seed, 0, i)
            tour, cost, tree = self.predict(models, inst, cfg, erng, beam_width=beam_width)
            if sorted(tour) != list(range(inst.n)):
                ham_violations += 1
            m = tsp_task.ratio_metric(inst.points, tour, inst.tour)
            b = per_size.setdefault(inst.n, {"count": 0, "ratios": [], "accs": [],
                                             "costs": []})
            b["count"] += 1
            b["ratios"].append(m["ratio"])
            b["accs"].append(m["accuracy"])
            b["costs"].append(m["cost"])
            if collect is not None and len(collect) < collect.maxlen:
                collect.append({"instance": i, "points": inst.points.tolist(),
                                "tour": list(map(int, tour)), "cost": cost,
                                "truth": list(map(int, inst.tour)),
                                "tree": _tree_dump(tree)})
        out = {}
        for n, b in per_size.items():
            out[str(n)] = {"count": b["count"],
                           "mean_ratio": float(np.mean(b["ratios"])),
                           "mean_cost": float(np.mean(b["costs"])),
                           "edge_accuracy": float(np.mean(b["accs"]))}
        all_ratios = [r for b in per_size.values() for r in b["ratios"]]
        return {"task": self.task, "per_size": out,
                "mean_ratio": float(np.mean(all_ratios)),
                "hamiltonian_violations": ham_violations,
                "count": sum(b["count"] for b in per_size.values())}


def _tree_dump(tree) -> dict:
    nodes = []
    for v in tree.all_nodes():
        nodes.append({
            "scale": v.scale, "pos": v.pos, "indices": [int(i) for i in v.indices],
            "probs": None if v.probs is None else [float(p) for p in v.probs],
            "labels": None if v.labels is None else [int(z) for z in v.labels],
            "leaf": v.is_leaf,
        })
    return {"n": tree.n, "max_depth": tree.max_depth,
            "leaf_threshold": tree.leaf_threshold, "nodes": nodes}


def _chain_dump(chain) -> dict:
    return {
        "column_elements": [int(c) for c in chain.column_elements],
        "levels": [{
            "mode": lvl.mode,
            "terminal_tail": lvl.terminal_tail,
            "kinds": list(lvl.block_kinds),
            "blocks": [b.data.tolist() for b in lvl.blocks],
        } for lvl in chain.levels],
    }


TASKS = {
    "hull": HullAdapter(),
    "knapsack": KnapsackAdapter(),
    "clustering": ClusteringAdapter(),
    "tsp": TspAdapter(),
}


def get_adapter(task: str):
    try:
        return TASKS[task]
    except KeyError:
        raise ValueError(f"unknown task {task!r}") from None
