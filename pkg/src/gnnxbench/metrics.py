"""The four interpretability metrics over explanation masks.

Fidelity: agreement between predictions on the masked input and the
original (higher is better); the literal |Δp| reading is also computed.
Sparsity: fraction of active mask entries (lower is better).
Stability: L2 distance between masks before/after input perturbation.
Consistency: cosine similarity of masks across repeated explainer runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import MetricError
from .explainers import ExplanationMask
from .graphs import Graph, PerturbationSpec, perturb
from .models import GnnModel
from .seeding import derive_seed


def apply_mask(graph: Graph, mask: ExplanationMask) -> np.ndarray:
    """X with mask rows multiplied in over the support; other rows unchanged."""
    features = np.array(graph.features)
    features[mask.node_support] = features[mask.node_support] * mask.values
    return features


def fidelity(model: GnnModel, graph: Graph, masks: list[ExplanationMask],
             mode: str = "agreement") -> float:
    """Mean agreement (or literal |Δp|) between masked and original predictions
    at each mask's target."""
    if not masks:
        raise MetricError("fidelity is undefined for an empty mask list")
    if mode not in ("agreement", "abs-diff"):
        raise MetricError(f"unknown fidelity mode {mode!r}")
    base = model.predict_log_probs(graph)
    total = 0.0
    for mask in masks:
        masked = Graph(features=apply_mask(graph, mask), edges=graph.edges,
                       labels=graph.labels, num_classes=graph.num_classes)
        out = model.predict_log_probs(masked)
        target = mask.target
        original_class = int(base[target].argmax())
        if mode == "agreement":
            total += float(int(out[target].argmax()) == original_class)
        else:
            total += abs(float(np.exp(out[target, original_class]))
                         - float(np.exp(base[target, original_class])))
    return total / len(masks)


def sparsity(mask: ExplanationMask, zero_tol: float = 1e-6) -> float:
    """Fraction of mask entries above zero_tol; lower means simpler."""
    if mask.values.size == 0:
        raise MetricError("sparsity is undefined for an empty mask")
    return float((mask.values > zero_tol).sum() / mask.values.size)


def consistency(masks: list[ExplanationMask]) -> float:
    """Mean cosine similarity over consecutive mask pairs (identical support)."""
    if len(masks) < 2:
        raise MetricError("consistency needs at least two masks")
    for other in masks[1:]:
        if not np.array_equal(other.node_support, masks[0].node_support):
            raise MetricError("consistency requires identical mask supports")
    sims = []
    for a, b in zip(masks, masks[1:]):
        va, vb = a.values.ravel(), b.values.ravel()
        na, nb = np.linalg.norm(va), np.linalg.norm(vb)
        if na == 0.0 or nb == 0.0:
            sims.append(0.0)
        else:
            sims.append(float(va @ vb / (na * nb)))
    return float(np.mean(sims))


def remap_mask_ids(mask: ExplanationMask, new_ids: dict[int, int]) -> ExplanationMask:
    """Translate a mask's node ids (e.g. perturbed-graph ids back to the
    original graph's via the inverse removal remap)."""
    support = np.array([new_ids[int(i)] for i in mask.node_support],
                       dtype=np.int64)
    subgraph = None
    if mask.subgraph_nodes is not None:
        subgraph = [new_ids[int(i)] for i in mask.subgraph_nodes]
    return ExplanationMask(
        explainer_id=mask.explainer_id, target=new_ids[int(mask.target)],
        node_support=support, values=mask.values, seed=mask.seed,
        subgraph_nodes=subgraph,
    )


def mask_l2_distance(a: ExplanationMask, b: ExplanationMask) -> float:
    """L2 norm of the mask difference over the intersection of supports."""
    common, a_rows, b_rows = np.intersect1d(
        a.node_support, b.node_support, return_indices=True)
    if common.size == 0:
        raise MetricError("masks share no support nodes")
    diff = a.values[a_rows] - b.values[b_rows]
    return float(np.linalg.norm(diff.ravel()))


@dataclass
class StabilityRun:
    run: int
    base_mask: ExplanationMask
    perturbed_mask: ExplanationMask   # ids already mapped back to the base graph
    distance: float


def stability_runs(model: GnnModel, graph: Graph, explainer, target: int,
                   spec: PerturbationSpec, runs: int,
                   base_masks: list[ExplanationMask] | None = None,
                   explainer_seeds: list[int] | None = None) -> list[StabilityRun]:
    """One perturb-and-re-explain trial per run; the same explainer seed is
    used on both sides so the perturbation is the only difference."""
    if runs < 1:
        raise MetricError("stability needs runs >= 1")
    out = []
    for r in range(runs):
        seed = (explainer_seeds[r] if explainer_seeds is not None
                else derive_seed("stability-explain", spec.seed, r))
        run_spec = PerturbationSpec(
            feature_fraction=spec.feature_fraction,
            node_removal_fraction=spec.node_removal_fraction,
            seed=derive_seed("stability-perturb", spec.seed, r),
        )
        base = (base_masks[r] if base_masks is not None
                else explainer.explain(model, graph, target, seed))
        perturbed_graph, remap = perturb(graph, run_spec, protected_node=target)
        mask_p = explainer.explain(model, perturbed_graph, remap[target], seed)
        inverse = {new: old for old, new in remap.items()}
        mask_p = remap_mask_ids(mask_p, inverse)
        out.append(StabilityRun(run=r, base_mask=base, perturbed_mask=mask_p,
                                distance=mask_l2_distance(base, mask_p)))
    return out


def stability(model: GnnModel, graph: Graph, explainer, target: int,
              spec: PerturbationSpec, runs: int, **kwargs) -> float:
    trials = stability_runs(model, graph, explainer, target, spec, runs, **kwargs)
    return float(np.mean([t.distance for t in trials]))


# ---------------------------------------------------------------------------
# aggregation


@dataclass
class MetricStat:
    mean: float
    std: float
    n: int

    def formatted(self) -> str:
        return f"{self.mean:.3f} ± {self.std:.3f}"


def aggregate(values, **metadata) -> MetricStat:
    """Mean ± sample standard deviation (std 0 for a singleton)."""
    values = list(values)
    if not values:
        raise MetricError("aggregate needs at least one value")
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    stat = MetricStat(mean=float(arr.mean()), std=std, n=arr.size)
    stat.metadata = metadata
    return stat


_RANGES = {
    "fidelity": (0.0, 1.0),
    "sparsity": (0.0, 1.0),
    "consistency": (-1.0, 1.0),
    "stability": (0.0, float("inf")),
}


@dataclass
class MetricReport:
    """Per-cell metric summary plus the protocol metadata that produced it."""

    fidelity: MetricStat
    sparsity: MetricStat
    stability: MetricStat
    consistency: MetricStat
    extras: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, (lo, hi) in _RANGES.items():
            stat = getattr(self, name)
            if not (lo - 1e-9 <= stat.mean <= hi + 1e-9):
                raise MetricError(
                    f"{name} mean {stat.mean} outside [{lo}, {hi}]"
                )

    def to_dict(self) -> dict:
        out = {
            name: {"mean": stat.mean, "std": stat.std, "n": stat.n}
            for name in _RANGES
            for stat in [getattr(self, name)]
        }
        out["extras"] = self.extras
        out["metadata"] = self.metadata
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "MetricReport":
        stats = {
            name: MetricStat(**{k: data[name][k] for k in ("mean", "std", "n")})
            for name in _RANGES
        }
        return cls(extras=data.get("extras", {}),
                   metadata=data.get("metadata", {}), **stats)
