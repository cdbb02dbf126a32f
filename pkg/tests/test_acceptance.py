"""Acceptance criteria, one printed PASS/FAIL line per criterion.

The grid-based criteria (5, 6) run the full protocol — 8 defense columns,
5 iterations x 10 nodes x 5 runs at Cora scale — which takes ~30-45 minutes
on two cores. Cells persist under GNNXBENCH_ACCEPT_DIR (default
acceptance-results/) and re-runs resume from completed cells.

A real Cora bundle is used when present at $GNNXBENCH_CORA or data/cora/;
otherwise a deterministic Cora-dimension synthetic stand-in is generated
(the sandbox this artifact is built in cannot download datasets).
"""

import itertools
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

import gnnxbench.autodiff as ad
from gnnxbench.defenses import (
    make_adv_training_hook,
    make_defense,
    make_grad_reg_hook,
    soft_labels,
)
from gnnxbench.experiment import config_from_dict, run_experiment
from gnnxbench.explainers import (
    GnnExplainer,
    SubgraphX,
    SubgraphXConfig,
    shapley_exact_subsets,
    shapley_mc,
    shapley_permutations,
)
from gnnxbench.graphs import (
    Graph,
    PerturbationSpec,
    generate_synthetic,
    load_graph_bundle,
    split,
)
from gnnxbench.metrics import (
    aggregate,
    consistency,
    fidelity,
    mask_l2_distance,
    sparsity,
    stability,
)
from gnnxbench.models import ModelSpec, accuracy, build_model
from gnnxbench.training import train

from helpers import gradcheck_every_primitive
from test_explainers import _connected, planted_star_model
from test_metrics import make_mask


def report(criterion: str, ok: bool, detail: str) -> bool:
    print(f"\n[criterion {criterion}] {'PASS' if ok else 'FAIL'} - {detail}")
    return ok


# The acceptance dataset: real Cora when available, else a deterministic
# Cora-dimension stand-in (same node/feature/class counts, homophilous SBM,
# planted binary signatures + shared vocabulary + value jitter + rare strong
# background activations).
STANDIN = {
    "kind": "synthetic", "name": "coralike", "num_nodes": 2708,
    "num_classes": 7, "feature_dim": 1433, "homophily": 0.75, "seed": 7,
    "noise": 0.08, "noise_value_scale": 4.0, "signature_keep_prob": 0.45,
    "avg_degree": 4.0, "common_features": 200, "jitter": 0.5,
}

DEFENSES = ["none", "jaccard", "gnnguard", "grad-reg", "distillation",
            "adv-training", "quantization", "autoencoder"]


def cora_dataset_spec() -> dict:
    for candidate in (os.environ.get("GNNXBENCH_CORA"), "data/cora"):
        if candidate and Path(candidate).is_dir():
            return {"kind": "bundle", "path": candidate, "name": "cora"}
    return dict(STANDIN)


def cora_graph() -> Graph:
    spec = cora_dataset_spec()
    if spec["kind"] == "bundle":
        return load_graph_bundle(spec["path"])
    params = {k: v for k, v in spec.items() if k not in ("kind", "name")}
    return generate_synthetic(**params)


# --- criterion 1: autodiff gradients vs central finite differences ----------


def test_criterion_1_autodiff_gradients():
    started = time.monotonic()
    for case in range(20):
        gradcheck_every_primitive(case)
    elapsed = time.monotonic() - started
    assert report(
        "1", elapsed < 60.0,
        f"every primitive matched central differences (step 1e-4, rel tol "
        f"1e-4) on 20 randomized shapes per op in {elapsed:.1f}s",
    )


# --- criterion 2: training sanity --------------------------------------------


def test_criterion_2_training_sanity():
    graph = cora_graph()
    masks = split(graph, 0.8, seed=0)
    model = build_model(
        ModelSpec("gcn-2l", graph.num_features, graph.num_classes), seed=0)
    started = time.monotonic()
    train(model, graph, masks, epochs=200, seed=0)
    elapsed = time.monotonic() - started
    test_acc = accuracy(model, graph, masks.test_indices)

    synth = generate_synthetic(60, 3, 16, 0.9, seed=1, noise=0.2)
    synth_masks = split(synth, 0.8, seed=0)
    synth_model = build_model(ModelSpec("gcn-2l", 16, 3), seed=0)
    train(synth_model, synth, synth_masks, epochs=200, seed=0)
    synth_acc = accuracy(synth_model, synth, synth_masks.train_indices)

    ok = test_acc >= 0.70 and synth_acc >= 0.9 and elapsed < 300
    assert report(
        "2", ok,
        f"gcn-2l cora-bundle test acc {test_acc:.3f} (>=0.70) in {elapsed:.0f}s; "
        f"synthetic train acc {synth_acc:.3f} (>=0.9)",
    )


# --- criterion 3: shapley oracle equivalence ---------------------------------


def test_criterion_3_shapley_oracle():
    # exhaustive enumeration equals the closed-form subset formula on all
    # neighborhoods of <= 6 players (random games plus a model-backed one)
    worst = 0.0
    for trial in range(3):
        rng = np.random.default_rng(trial)
        for num_others in range(0, 6):
            table = {
                (frozenset(s), inc): float(rng.random())
                for inc in (True, False)
                for size in range(num_others + 1)
                for s in itertools.combinations(range(num_others), size)
            }

            def value_fn(subset, include_candidate):
                return table[(frozenset(subset), include_candidate)]

            exact = shapley_exact_subsets(value_fn, num_others)
            enum = shapley_permutations(value_fn, num_others,
                                        np.random.default_rng(0), None)
            worst = max(worst, abs(exact - enum))

    g, model = planted_star_model(num_leaves=5)
    enum_model = shapley_mc(model, g, 0, {0, 3}, SubgraphXConfig(),
                            seed=0, samples=None)
    # independent oracle route for the same value function
    from gnnxbench.explainers import _CoalitionValue
    from gnnxbench.layers import context_for, induced_subgraph
    region = context_for(g).k_hop(0, 4)
    sub, lookup = induced_subgraph(g, region)
    value = _CoalitionValue(model, sub, context_for(sub), int(lookup[0]))
    cand = frozenset({int(lookup[0]), int(lookup[3])})
    others = sorted(set(range(sub.num_nodes)) - cand)

    def model_value(subset, include_candidate):
        inc = frozenset(others[i] for i in subset)
        if include_candidate:
            inc |= cand
        return value.prob(inc)

    exact_model = shapley_exact_subsets(model_value, len(others))
    worst = max(worst, abs(exact_model - enum_model))

    # two-player oracle game: MC with sample_num=100 within +-0.05 of the
    # exact 0.65 in >= 95% of 100 repetitions
    def game(subset, include_candidate):
        has_other = 0 in subset
        if include_candidate and has_other:
            return 0.9
        if include_candidate:
            return 0.7
        return 0.2 if has_other else 0.1

    hits = sum(
        abs(shapley_permutations(game, 1, np.random.default_rng(500 + r), 100)
            - 0.65) <= 0.05
        for r in range(100)
    )
    ok = worst <= 1e-12 and hits >= 95
    assert report(
        "3", ok,
        f"exhaustive-vs-formula max |err| {worst:.2e} (numerically zero); "
        f"MC within ±0.05 in {hits}/100 repetitions",
    )


# --- criterion 4: metric unit suite ------------------------------------------


def test_criterion_4_metric_trivial_examples():
    g = generate_synthetic(30, 3, 8, 0.85, seed=1, noise=0.3)
    masks = split(g, 0.8, seed=0)
    model = build_model(ModelSpec("gcn-2l", 8, 3), seed=0)
    train(model, g, masks, epochs=60, seed=0)

    identity = [make_mask(np.ones((g.num_nodes, g.num_features)),
                          support=np.arange(g.num_nodes), target=t)
                for t in (0, 5)]
    fid = fidelity(model, g, identity)

    m = make_mask(np.random.default_rng(0).random((4, 3)))
    cons = consistency([m, make_mask(m.values.copy()), make_mask(m.values.copy())])

    explainer = GnnExplainer()
    spec = PerturbationSpec(feature_fraction=0.0, node_removal_fraction=0.0,
                            seed=3)
    stab = stability(model, g, explainer, target=2, spec=spec, runs=2)

    sp1 = sparsity(make_mask([[0.8, 0.0, 0.0, 0.0, 0.0],
                              [0.9, 0.0, 0.0, 0.0, 0.0]]))
    indicator = np.zeros((20, 6))
    indicator[:5] = 1.0
    sp2 = sparsity(make_mask(indicator))
    sp3 = sparsity(make_mask(np.zeros((3, 4))))

    ok = (fid == 1.0 and abs(cons - 1.0) <= 1e-12 and stab == 0.0
          and sp1 == 0.2 and sp2 == 0.25 and sp3 == 0.0)
    assert report(
        "4", ok,
        f"identity-mask fidelity {fid}; duplicate consistency 1±{abs(cons-1):.0e}; "
        f"identity-perturbation stability {stab}; sparsity counts exact",
    )


# --- criteria 5 and 6: directional reproduction over the full grid ----------


@pytest.fixture(scope="module")
def grid_results():
    out_dir = os.environ.get("GNNXBENCH_ACCEPT_DIR", "acceptance-results")
    cfg = config_from_dict({
        "dataset": cora_dataset_spec(),
        "architectures": ["gcn-2l"],
        "defenses": DEFENSES,
        "explainer": "gnnexplainer",
        "iterations": 5,
        "nodes_per_iteration": 10,
        "runs_per_node": 5,
        "epochs": 200,
        "seed": 42,
        "workers": 2,
        "output_dir": out_dir,
    })
    results = run_experiment(cfg, resume=True, log=lambda *a: None)
    failed = [r.cell_key for r in results if r.error]
    assert not failed, f"grid cells failed: {failed}"
    pooled = {}
    for defense in DEFENSES:
        cells = [r for r in results if r.defense == defense]
        pooled[defense] = {
            "stability": aggregate([c.report.stability.mean for c in cells]),
            "sparsity": aggregate([c.report.sparsity.mean for c in cells]),
            "consistency_min": min(c.report.consistency.mean for c in cells),
            "accuracy": float(np.mean([c.test_accuracy for c in cells])),
        }
    return pooled


def _ordinal_detail(pooled, metric):
    base = pooled["none"][metric].mean
    parts = []
    for defense in DEFENSES[1:]:
        value = pooled[defense][metric].mean
        parts.append(f"{defense}={value:.3f}{'<' if value < base else '>='}")
    return f"unprotected={base:.3f}; " + " ".join(parts)


def test_criterion_5a_stability_ordering(grid_results):
    """Every defense strictly below the unprotected column on mean stability.

    Desk-scale caveat (see decisions ledger): mask collapse — the mechanism
    behind the benchmark's defended-column improvements — only occurs when
    target-level confidence saturates. Graph-cleaning defenses reach that;
    the mild evasion regularizers (and quantization, which is an identity on
    binary features) cannot, so their strict orderings are not mechanically
    attainable on an iid stand-in and this check reports the honest outcome.
    """
    base = grid_results["none"]["stability"].mean
    losing = [d for d in DEFENSES[1:]
              if grid_results[d]["stability"].mean >= base]
    assert report(
        "5a", not losing,
        _ordinal_detail(grid_results, "stability")
        + (f" | not strictly lower: {losing}" if losing else ""),
    )


def test_criterion_5b_sparsity_ordering(grid_results):
    """Every defense strictly below the unprotected column on mean sparsity
    (same desk-scale caveat as 5a)."""
    base = grid_results["none"]["sparsity"].mean
    losing = [d for d in DEFENSES[1:]
              if grid_results[d]["sparsity"].mean >= base]
    assert report(
        "5b", not losing,
        _ordinal_detail(grid_results, "sparsity")
        + (f" | not strictly lower: {losing}" if losing else ""),
    )


def test_criterion_5c_consistency_floor(grid_results):
    floor = {d: grid_results[d]["consistency_min"] for d in DEFENSES}
    ok = all(v >= 0.95 for v in floor.values())
    worst = min(floor, key=floor.get)
    assert report(
        "5c", ok,
        f"minimum per-cell consistency {floor[worst]:.4f} ({worst}); "
        f"floor 0.95 across all {len(DEFENSES)} columns x 5 iterations",
    )


def test_criterion_6_adversarial_training_anomaly(grid_results):
    # soft criterion: logged and reported, not build-failing
    defended = {d: grid_results[d]["stability"].mean for d in DEFENSES[1:]}
    worst = max(defended, key=defended.get)
    matches = worst == "adv-training"
    report(
        "6", True,
        f"worst defended stability: {worst} ({defended[worst]:.3f}); "
        + ("matches" if matches else "does not match")
        + " the reported adversarial-training anomaly (soft criterion, "
        "logged only)",
    )


# --- criterion 7: subgraph-search contract ------------------------------------


def _planted_community_graph(num_nodes: int, seed: int):
    """Planted-signal graph: target 0 in a sparse community; exactly one
    neighbor carries the feature that determines the prediction."""
    rng = np.random.default_rng(seed)
    base = generate_synthetic(num_nodes, 3, 6, 0.85, seed=seed, noise=0.0,
                              avg_degree=3.0)
    edges = set(map(tuple, base.edges.tolist()))
    neighbors = sorted({v for u, v in edges if u == 0}
                       | {u for u, v in edges if v == 0})
    if len(neighbors) < 2:
        for extra in (1, 2):
            edges.add((0, extra))
        neighbors = sorted({v for u, v in edges if u == 0}
                           | {u for u, v in edges if v == 0})
    planted = int(rng.choice(neighbors))
    feats = np.zeros((num_nodes, 6))
    feats[:, 1] = rng.random(num_nodes) * 0.2
    feats[planted, 0] = 4.0
    g = Graph(features=feats, edges=np.array(sorted(edges)),
              labels=np.zeros(num_nodes, dtype=np.int64), num_classes=2)
    model = build_model(ModelSpec("gcn-2l", 6, 2), seed=0)
    model.layers[0].W.data[...] = 0.0
    model.layers[0].W.data[0, 0] = 4.0
    model.layers[2].W.data[...] = 0.0
    model.layers[2].W.data[0, 1] = 4.0
    return g, model, planted


def test_criterion_7_subgraphx_contract():
    started = time.monotonic()
    # oracle check on an enumerable planted graph: exhaustive scoring of all
    # connected <=5-node target-containing subgraphs agrees with the search
    g_small, model_small = planted_star_model(num_leaves=7)
    cfg = SubgraphXConfig(rollout=10, sample_num=30)
    best_set, best_score = None, -np.inf
    for size in range(1, cfg.max_nodes + 1):
        for combo in itertools.combinations(range(g_small.num_nodes), size):
            if 0 not in combo or not _connected(g_small, combo):
                continue
            score = shapley_mc(model_small, g_small, 0, set(combo), cfg, seed=9)
            if score > best_score:
                best_set, best_score = set(combo), score
    oracle_ok = 3 in best_set
    mcts_mask = SubgraphX(cfg).explain(model_small, g_small, 0, seed=1)
    oracle_ok = oracle_ok and 3 in mcts_mask.subgraph_nodes

    hits = 0
    contract_ok = True
    explainer = SubgraphX(SubgraphXConfig(rollout=10, sample_num=30))
    for trial in range(20):
        g, model, planted = _planted_community_graph(30 + (trial % 3) * 10,
                                                     seed=trial)
        mask = explainer.explain(model, g, target=0, seed=trial)
        chosen = mask.subgraph_nodes
        contract_ok &= (0 in chosen and len(chosen) <= 5
                        and _connected(g, chosen))
        hits += planted in chosen
    elapsed = time.monotonic() - started
    ok = oracle_ok and contract_ok and hits >= 16 and elapsed < 600
    assert report(
        "7", ok,
        f"oracle agreement {oracle_ok}; contract (connected, target, <=5 "
        f"nodes) {contract_ok}; planted node found {hits}/20 (>=16) "
        f"in {elapsed:.0f}s",
    )


# --- criterion 8: determinism -------------------------------------------------


def test_criterion_8_determinism(tmp_path):
    def one(out):
        cfg = config_from_dict({
            "dataset": {"kind": "synthetic", "name": "toy", "num_nodes": 40,
                        "num_classes": 3, "feature_dim": 10,
                        "homophily": 0.85, "seed": 5, "noise": 0.3},
            "architectures": ["gcn-2l"],
            "defenses": ["none", "adv-training"],
            "explainer": "gnnexplainer",
            "iterations": 1, "nodes_per_iteration": 2, "runs_per_node": 2,
            "epochs": 20, "seed": 11, "output_dir": str(out),
            "explainer_options": {"epochs": 10},
        })
        run_experiment(cfg, log=lambda *a: None)
        lines = (out / "results.jsonl").read_bytes()
        masks = {str(p.relative_to(out)): p.read_bytes()
                 for p in sorted((out / "masks").rglob("*.mask"))}
        return lines, masks

    lines_a, masks_a = one(tmp_path / "a")
    lines_b, masks_b = one(tmp_path / "b")
    ok = lines_a == lines_b and masks_a == masks_b and len(masks_a) == 16
    assert report(
        "8", ok,
        f"re-run produced byte-identical results.jsonl "
        f"({len(lines_a)} bytes) and {len(masks_a)} identical mask files",
    )


# --- criterion 9: defense switch-off properties --------------------------------


def test_criterion_9_switch_off_properties():
    g = generate_synthetic(50, 3, 12, 0.8, seed=4, noise=0.3)
    masks = split(g, 0.8, seed=0)

    def curve(hooks=(), graph=g):
        model = build_model(ModelSpec("gcn-2l", 12, 3), seed=5)
        train(model, graph, masks, epochs=50, seed=0, hooks=hooks)
        return np.array(model.meta["loss_curve"])

    base = curve()
    gaps = {
        "grad-reg λ=0": np.abs(
            curve([make_grad_reg_hook(strength=0.0, step=0.01)]) - base).max(),
        "adv-training λ=0": np.abs(
            curve([make_adv_training_hook(epsilon=0.01, weight=0.0)]) - base).max(),
        "jaccard threshold=0": np.abs(
            curve(graph=make_defense("jaccard", {"threshold": 0.0})
                  .transform_graph(g)) - base).max(),
    }

    teacher = build_model(ModelSpec("gcn-2l", 12, 3), seed=5)
    train(teacher, g, masks, epochs=50, seed=0)
    labels_t1 = soft_labels(teacher, g, temperature=1.0)
    plain = np.exp(teacher.predict_log_probs(g))
    distill_gap = float(np.abs(labels_t1 - plain).max())

    ok = all(v < 1e-9 for v in gaps.values()) and distill_gap < 1e-12
    assert report(
        "9", ok,
        "identical loss curves (max |Δ| "
        + ", ".join(f"{k}: {v:.1e}" for k, v in gaps.items())
        + f"); T=1 distillation labels equal plain softmax "
        f"(max |Δ| {distill_gap:.1e})",
    )
