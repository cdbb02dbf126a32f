"""Post-hoc explainers: feature-mask optimization and Shapley-scored
connected-subgraph search, plus the mask file format."""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor
from .errors import ConfigError, ParameterError, ValidationError
from .graphs import Graph
from .layers import context_for, induced_subgraph
from .models import GnnModel


@dataclass
class ExplanationMask:
    """Feature-importance matrix over a target's support nodes.

    node_support and subgraph_nodes are in the ids of the graph the
    explanation was computed on; values[i] is the mask row for
    node_support[i].
    """

    explainer_id: str
    target: int
    node_support: np.ndarray
    values: np.ndarray
    seed: int
    subgraph_nodes: list[int] | None = None

    def __post_init__(self):
        self.node_support = np.asarray(self.node_support, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape[0] != self.node_support.size:
            raise ValidationError("mask rows do not match node_support")
        if self.values.size and (self.values.min() < 0 or self.values.max() > 1):
            raise ValidationError("mask entries must lie in [0, 1]")
        if self.target not in set(int(i) for i in self.node_support):
            raise ValidationError("target must be inside node_support")
        if self.subgraph_nodes is not None:
            extra = set(self.subgraph_nodes) - set(int(i) for i in self.node_support)
            if extra:
                raise ValidationError(f"subgraph nodes outside support: {extra}")

    def row_of(self, node: int) -> int:
        hits = np.flatnonzero(self.node_support == node)
        if hits.size != 1:
            raise ValidationError(f"node {node} not in mask support")
        return int(hits[0])


@dataclass
class GNNExplainerConfig:
    epochs: int = 100
    lr: float = 0.01
    node_mask_type: str = "attributes"
    edge_mask_type: str | None = None
    edge_size: float = 0.005      # carried for completeness; inert without edge masks
    edge_ent: float = 1.0         # carried for completeness; inert without edge masks
    node_feat_size: float = 1.0
    node_feat_ent: float = 0.1
    eps: float = 1e-15
    mask_init_std: float = 0.1
    cleanup_threshold: float = 0.5


@dataclass
class SubgraphXConfig:
    rollout: int = 20
    min_atoms: int = 5
    c_puct: float = 10.0
    expand_atoms: int = 14
    local_radius: int = 4
    sample_num: int = 100
    reward_method: str = "mc_l_shapley"
    high2low: bool = False
    subgraph_building: str = "zero_filling"
    max_nodes: int = 5


# ---------------------------------------------------------------------------
# GNNExplainer


class GnnExplainer:
    explainer_id = "gnnexplainer"

    def __init__(self, config: GNNExplainerConfig | None = None):
        self.config = config or GNNExplainerConfig()
        if self.config.edge_mask_type not in (None, "none", "None"):
            raise ConfigError("edge masks are out of scope; edge_mask_type must be None")

    def explain(self, model: GnnModel, graph: Graph, target: int,
                seed: int) -> ExplanationMask:
        cfg = self.config
        if not 0 <= target < graph.num_nodes:
            raise ParameterError(f"target {target} not in graph")
        ctx = context_for(graph)
        region = ctx.k_hop(target, model.num_hops)
        sub, lookup = induced_subgraph(graph, region)
        t_idx = int(lookup[target])
        sub_ctx = context_for(sub)

        base = ad.log_softmax(model.forward_scores(
            sub.features, sub_ctx, training=False, tape=False))
        predicted = int(base[t_idx].argmax())
        pseudo_labels = np.full(sub.num_nodes, predicted, dtype=np.int64)
        rows = np.array([t_idx], dtype=np.int64)
        log_eps = math.log(cfg.eps)

        rng = np.random.default_rng(seed)
        mask = Tensor(rng.normal(0.0, cfg.mask_init_std,
                                 size=(sub.num_nodes, sub.num_features)),
                      requires_grad=True)
        opt = Adam([mask], lr=cfg.lr)
        for _ in range(cfg.epochs):
            gate = ad.sigmoid(mask)
            masked = ad.mul(gate, sub.features)
            scores = model.forward_scores(masked, sub_ctx, training=False,
                                          update_stats=False, tape=True)
            log_probs = ad.log_softmax(scores)
            nll = ad.nll_loss(log_probs, pseudo_labels, rows)
            # clamp the target log-probability at log(eps) so the loss stays finite
            nll = ad.mul(ad.clamp_min(ad.mul(nll, -1.0), log_eps), -1.0)
            size_term = ad.mul(ad.mean(gate), cfg.node_feat_size)
            ent_term = ad.mul(ad.mean(ad.bernoulli_entropy(gate, cfg.eps)),
                              cfg.node_feat_ent)
            loss = ad.add(ad.add(nll, size_term), ent_term)
            if not np.isfinite(loss.data):
                raise ValidationError("explainer loss became non-finite")
            opt.zero_grad()
            loss.backward()
            opt.step()

        values = 1.0 / (1.0 + np.exp(-mask.data))
        # remove low-value elements so the final explanation has exact zeros
        values = np.where(values < cfg.cleanup_threshold, 0.0, values)
        return ExplanationMask(
            explainer_id=self.explainer_id, target=int(target),
            node_support=region, values=values, seed=seed,
        )


# ---------------------------------------------------------------------------
# Shapley value estimation


def shapley_exact_subsets(value_fn, num_others: int) -> float:
    """Closed-form weighted-subset Shapley formula (test oracle counterpart).

    value_fn(others_subset: frozenset[int], include_candidate: bool) -> float
    """
    total = 0.0
    p = num_others + 1
    for size in range(num_others + 1):
        weight = (math.factorial(size) * math.factorial(p - size - 1)
                  / math.factorial(p))
        for subset in itertools.combinations(range(num_others), size):
            s = frozenset(subset)
            total += weight * (value_fn(s, True) - value_fn(s, False))
    return total


def shapley_permutations(value_fn, num_others: int, rng: np.random.Generator,
                         samples: int | None) -> float:
    """Permutation-sampling Shapley estimate of the candidate's contribution.

    samples=None enumerates every ordering exactly (feasible for few players).
    """
    if samples is None:
        total = 0.0
        count = 0
        for perm in itertools.permutations(range(num_others + 1)):
            cut = perm.index(num_others)   # slot num_others is the candidate
            s = frozenset(perm[:cut])
            total += value_fn(s, True) - value_fn(s, False)
            count += 1
        return total / count
    total = 0.0
    for _ in range(samples):
        order = rng.permutation(num_others)
        cut = int(rng.integers(0, num_others + 1))
        s = frozenset(int(i) for i in order[:cut])
        total += value_fn(s, True) - value_fn(s, False)
    return total / samples


class _CoalitionValue:
    """Zero-filling coalition value for one explained node: the model's
    probability of its originally predicted class when features of nodes
    outside the coalition are zeroed."""

    def __init__(self, model: GnnModel, sub: Graph, sub_ctx, t_idx: int):
        self.model = model
        self.sub = sub
        self.sub_ctx = sub_ctx
        self.t_idx = t_idx
        base = ad.log_softmax(model.forward_scores(
            sub.features, sub_ctx, training=False, tape=False))
        self.predicted = int(base[t_idx].argmax())
        self._cache: dict[frozenset, float] = {}

    def prob(self, included: frozenset) -> float:
        hit = self._cache.get(included)
        if hit is not None:
            return hit
        keep = np.zeros((self.sub.num_nodes, 1))
        if included:
            keep[list(included)] = 1.0
        x = self.sub.features * keep
        log_probs = ad.log_softmax(self.model.forward_scores(
            x, self.sub_ctx, training=False, tape=False))
        value = float(np.exp(log_probs[self.t_idx, self.predicted]))
        self._cache[included] = value
        return value


def shapley_mc(model: GnnModel, graph: Graph, target: int,
               candidate_subgraph, cfg: SubgraphXConfig, seed: int = 0,
               samples: int | None | str = "config") -> float:
    """Monte-Carlo Shapley value of a candidate node coalition.

    Players are the nodes within cfg.local_radius hops of the target; the
    candidate acts as a single block player and remaining players join
    coalitions individually. samples defaults to cfg.sample_num; pass None
    for exhaustive enumeration.
    """
    candidate = frozenset(int(v) for v in candidate_subgraph)
    if not candidate:
        return 0.0
    ctx = context_for(graph)
    region = ctx.k_hop(target, cfg.local_radius)
    region_set = set(int(i) for i in region)
    if not candidate <= region_set:
        raise ParameterError(
            "candidate subgraph must lie within local_radius of the target"
        )
    sub, lookup = induced_subgraph(graph, region)
    sub_ctx = context_for(sub)
    value = _CoalitionValue(model, sub, sub_ctx, int(lookup[target]))

    cand_idx = frozenset(int(lookup[v]) for v in candidate)
    others = [int(lookup[v]) for v in sorted(region_set - candidate)]

    def value_fn(subset: frozenset, include_candidate: bool) -> float:
        included = frozenset(others[i] for i in subset)
        if include_candidate:
            included |= cand_idx
        return value.prob(included)

    if samples == "config":
        samples = cfg.sample_num
    rng = np.random.default_rng(seed)
    return shapley_permutations(value_fn, len(others), rng, samples)


# ---------------------------------------------------------------------------
# SubgraphX


class _SearchNode:
    __slots__ = ("nodes", "children", "visits", "best", "score")

    def __init__(self, nodes: frozenset, score: float):
        self.nodes = nodes
        self.children: list["_SearchNode"] | None = None
        self.visits = 0
        self.best = score
        self.score = score


class SubgraphX:
    explainer_id = "subgraphx"

    def __init__(self, config: SubgraphXConfig | None = None):
        self.config = config or SubgraphXConfig()
        if self.config.reward_method != "mc_l_shapley":
            raise ConfigError("only the mc_l_shapley reward is implemented")
        if self.config.subgraph_building != "zero_filling":
            raise ConfigError("only zero_filling subgraph building is implemented")

    def explain(self, model: GnnModel, graph: Graph, target: int,
                seed: int) -> ExplanationMask:
        cfg = self.config
        if not 0 <= target < graph.num_nodes:
            raise ParameterError(f"target {target} not in graph")
        ctx = context_for(graph)
        region = ctx.k_hop(target, cfg.local_radius)
        sub, lookup = induced_subgraph(graph, region)
        sub_ctx = context_for(sub)
        t_idx = int(lookup[target])
        neighbors = sub_ctx.neighbors()
        value = _CoalitionValue(model, sub, sub_ctx, t_idx)
        rng = np.random.default_rng(seed)

        def score_of(nodes: frozenset) -> float:
            others = sorted(set(range(sub.num_nodes)) - nodes)

            def value_fn(subset: frozenset, include_candidate: bool) -> float:
                included = frozenset(others[i] for i in subset)
                if include_candidate:
                    included |= nodes
                return value.prob(included)

            return shapley_permutations(value_fn, len(others), rng,
                                        cfg.sample_num)

        scored: dict[frozenset, float] = {}

        def score_cached(nodes: frozenset) -> float:
            if nodes not in scored:
                scored[nodes] = score_of(nodes)
            return scored[nodes]

        if sub.num_nodes <= cfg.min_atoms:
            chosen = frozenset(range(sub.num_nodes))
        else:
            root_set = frozenset(range(sub.num_nodes))
            root = _SearchNode(root_set, score_cached(root_set))
            for _ in range(cfg.rollout):
                path = [root]
                node = root
                while len(node.nodes) > cfg.min_atoms:
                    if node.children is None:
                        node.children = [
                            _SearchNode(child, score_cached(child))
                            for child in self._expand(node, t_idx, neighbors)
                        ]
                    if not node.children:
                        break
                    node = max(
                        node.children,
                        key=lambda c, parent=node: (
                            c.best + cfg.c_puct * math.sqrt(
                                math.log(parent.visits + 1.0) / (c.visits + 1.0)),
                            -min(c.nodes),
                        ),
                    )
                    path.append(node)
                reward = max(visited.score for visited in path)
                for visited in path:
                    visited.visits += 1
                    visited.best = max(visited.best, reward)
            small = {s: v for s, v in scored.items() if len(s) <= cfg.max_nodes}
            if not small:
                # search never reached max_nodes-sized subgraphs; fall back to
                # the smallest scored candidates
                floor = min(len(s) for s in scored)
                small = {s: v for s, v in scored.items() if len(s) == floor}
            chosen = max(small.items(),
                         key=lambda kv: (kv[1], -len(kv[0]),
                                         [-i for i in sorted(kv[0])]))[0]

        values = np.zeros((sub.num_nodes, sub.num_features))
        values[sorted(chosen)] = 1.0
        return ExplanationMask(
            explainer_id=self.explainer_id, target=int(target),
            node_support=region, values=values, seed=seed,
            subgraph_nodes=[int(region[i]) for i in sorted(chosen)],
        )

    def _expand(self, node: _SearchNode, t_idx: int,
                neighbors) -> list[frozenset]:
        cfg = self.config
        degree = {
            v: sum(1 for u in neighbors[v] if u in node.nodes)
            for v in node.nodes if v != t_idx
        }
        order = sorted(degree, key=lambda v: (degree[v], v),
                       reverse=cfg.high2low)
        children = []
        for v in order[:cfg.expand_atoms]:
            candidate = node.nodes - {v}
            if self._connected_with_target(candidate, t_idx, neighbors):
                children.append(candidate)
        return children

    @staticmethod
    def _connected_with_target(nodes: frozenset, t_idx: int, neighbors) -> bool:
        if t_idx not in nodes:
            return False
        stack = [t_idx]
        seen = {t_idx}
        while stack:
            u = stack.pop()
            for v in neighbors[u]:
                v = int(v)
                if v in nodes and v not in seen:
                    seen.add(v)
                    stack.append(v)
        return len(seen) == len(nodes)


EXPLAINER_IDS = ("gnnexplainer", "subgraphx")


def make_explainer(explainer_id: str, overrides: dict | None = None):
    overrides = overrides or {}
    if explainer_id == "gnnexplainer":
        return GnnExplainer(_config_from(GNNExplainerConfig, overrides))
    if explainer_id == "subgraphx":
        return SubgraphX(_config_from(SubgraphXConfig, overrides))
    raise ConfigError(f"unknown explainer id {explainer_id!r}")


def _config_from(cls, overrides: dict):
    base = cls()
    unknown = set(overrides) - set(asdict(base))
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} option(s): {sorted(unknown)}")
    return cls(**{**asdict(base), **overrides})


# ---------------------------------------------------------------------------
# mask files: header json + support ids + row-major decimal values


MASK_MAGIC = "gnnxbench-mask v1"


def save_mask(mask: ExplanationMask, path, header_extra: dict | None = None) -> None:
    header = {
        "explainer": mask.explainer_id,
        "target": int(mask.target),
        "seed": int(mask.seed),
    }
    if header_extra:
        header.update(header_extra)
    lines = [MASK_MAGIC, json.dumps(header, sort_keys=True)]
    lines.append("support " + " ".join(str(int(i)) for i in mask.node_support))
    if mask.subgraph_nodes is not None:
        lines.append("subgraph " + " ".join(str(int(i)) for i in mask.subgraph_nodes))
    lines.append("values")
    for row in mask.values:
        lines.append(" ".join(repr(float(x)) for x in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_mask(path) -> tuple[ExplanationMask, dict]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != MASK_MAGIC:
        raise ValidationError(f"{path} is not a mask file")
    header = json.loads(lines[1])
    if not lines[2].startswith("support "):
        raise ValidationError(f"{path}: missing support line")
    support = np.array([int(t) for t in lines[2].split()[1:]], dtype=np.int64)
    cursor = 3
    subgraph = None
    if lines[cursor].startswith("subgraph "):
        subgraph = [int(t) for t in lines[cursor].split()[1:]]
        cursor += 1
    if lines[cursor] != "values":
        raise ValidationError(f"{path}: missing values sentinel")
    rows = [
        [float(t) for t in line.split()]
        for line in lines[cursor + 1:cursor + 1 + support.size]
    ]
    mask = ExplanationMask(
        explainer_id=header["explainer"], target=int(header["target"]),
        node_support=support, values=np.asarray(rows, dtype=np.float64),
        seed=int(header["seed"]), subgraph_nodes=subgraph,
    )
    return mask, header
