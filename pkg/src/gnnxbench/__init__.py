"""gnnxbench: how adversarial defenses change post-hoc GNN explanations.

Pipeline: pick a dataset, apply a defense (before or during training),
train one of six small GNN architectures, explain predictions post-hoc
(feature-mask optimization or Shapley-scored subgraph search), and score
the explanations with fidelity, sparsity, stability, and consistency.
"""

from .graphs import (
    Graph,
    PerturbationSpec,
    SplitMasks,
    generate_synthetic,
    load_graph_bundle,
    perturb,
    save_graph_bundle,
    split,
)
from .models import ARCHITECTURES, ModelSpec, accuracy, build_model
from .training import train
from .defenses import DEFENSE_IDS, make_defense
from .explainers import (
    EXPLAINER_IDS,
    ExplanationMask,
    GNNExplainerConfig,
    GnnExplainer,
    SubgraphX,
    SubgraphXConfig,
    make_explainer,
    shapley_mc,
)
from .metrics import (
    MetricReport,
    aggregate,
    consistency,
    fidelity,
    sparsity,
    stability,
)
from .experiment import ExperimentConfig, load_config, run_experiment

__version__ = "0.1.0"

__all__ = [
    "ARCHITECTURES", "DEFENSE_IDS", "EXPLAINER_IDS",
    "ExperimentConfig", "ExplanationMask", "GNNExplainerConfig",
    "GnnExplainer", "Graph", "MetricReport", "ModelSpec",
    "PerturbationSpec", "SplitMasks", "SubgraphX", "SubgraphXConfig",
    "accuracy", "aggregate", "build_model", "consistency", "fidelity",
    "generate_synthetic", "load_config", "load_graph_bundle",
    "make_defense", "make_explainer", "perturb", "run_experiment",
    "save_graph_bundle", "shapley_mc", "sparsity", "split", "stability",
    "train",
]
