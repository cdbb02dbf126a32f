"""The six benchmark architectures: construction, prediction, checkpoints."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ParameterError, ShapeError
from .graphs import Graph
from .layers import (
    BatchNorm,
    GATConv,
    GCNConv,
    GINConv,
    GraphContext,
    Layer,
    Linear,
    ReLU,
    SAGEConv,
    context_for,
)

ARCHITECTURES = ("gcn-2l", "gcn-3l", "sage-2l", "sage-3l", "gin-2l", "gat-2l")

HIDDEN = 16
GAT_HEADS = (3, 1)


@dataclass(frozen=True)
class ModelSpec:
    architecture: str
    input_size: int
    output_size: int
    hidden: int = HIDDEN
    gat_heads: tuple[int, int] = GAT_HEADS

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ParameterError(
                f"unknown architecture {self.architecture!r}; "
                f"expected one of {ARCHITECTURES}"
            )


class GnnModel:
    """A layer stack ending in log-softmax, plus optional defense attachments.

    ``feature_transform`` (autoencoder defense) preprocesses inputs inside
    the model; ``gate`` (message gating defense) produces per-edge weights
    consumed by each convolution.
    """

    def __init__(self, spec: ModelSpec, layers: list[Layer]):
        self.spec = spec
        self.layers = layers
        self.feature_transform = None
        self.gate = None
        self.meta: dict = {}

    @property
    def num_hops(self) -> int:
        return sum(1 for l in self.layers if l.is_conv)

    def named_parameters(self) -> list[tuple[str, ad.Tensor]]:
        out = []
        if self.feature_transform is not None:
            out.extend(
                (f"transform.{name}", p)
                for name, p in self.feature_transform.named_params()
            )
        for i, layer in enumerate(self.layers):
            out.extend((f"layers.{i}.{name}", p) for name, p in layer.named_params())
        if self.gate is not None:
            out.extend((f"gate.{name}", p) for name, p in self.gate.named_params())
        return out

    def parameters(self) -> list[ad.Tensor]:
        return [p for _, p in self.named_parameters()]

    def forward_scores(self, x, ctx: GraphContext, *, training: bool = False,
                       update_stats: bool = False, tape: bool = False,
                       rng: np.random.Generator | None = None):
        """Pre-log-softmax scores; x may be a Tensor or a plain ndarray."""
        width = x.shape[1]
        if width != self.spec.input_size:
            raise ShapeError(
                f"input width {width} does not match spec input_size "
                f"{self.spec.input_size}"
            )
        h = x
        if self.feature_transform is not None:
            h = self.feature_transform.forward(h, training=training, tape=tape,
                                               rng=rng)
        conv_pos = 0
        for layer in self.layers:
            gate = None
            if layer.is_conv and self.gate is not None:
                gate = self.gate.edge_weights(conv_pos, h, ctx, tape=tape)
                conv_pos += 1
            elif layer.is_conv:
                conv_pos += 1
            h = layer.forward(h, ctx, training=training,
                              update_stats=update_stats, tape=tape, gate=gate)
        return h

    def predict_log_probs(self, graph: Graph) -> np.ndarray:
        """Row-wise log-probabilities in evaluation mode (tape-free)."""
        ctx = context_for(graph)
        scores = self.forward_scores(graph.features, ctx, training=False, tape=False)
        return ad.log_softmax(scores)

    def layer_summary(self) -> list[str]:
        return [repr(l) for l in self.layers] + ["LogSoftmax"]


def build_model(spec: ModelSpec, seed: int) -> GnnModel:
    """Fresh model with Glorot-uniform weights, deterministic given seed."""
    rng = np.random.default_rng(seed)
    d_in, d_out, h = spec.input_size, spec.output_size, spec.hidden
    a = spec.architecture
    if a == "gcn-2l":
        layers = [GCNConv(rng, d_in, h), ReLU(), GCNConv(rng, h, d_out)]
    elif a == "gcn-3l":
        layers = [GCNConv(rng, d_in, h), ReLU(), GCNConv(rng, h, h), ReLU(),
                  GCNConv(rng, h, d_out)]
    elif a == "sage-2l":
        layers = [SAGEConv(rng, d_in, h), BatchNorm(h), ReLU(),
                  SAGEConv(rng, h, d_out)]
    elif a == "sage-3l":
        layers = [SAGEConv(rng, d_in, h), BatchNorm(h), ReLU(),
                  SAGEConv(rng, h, h), BatchNorm(h), ReLU(),
                  SAGEConv(rng, h, d_out)]
    elif a == "gin-2l":
        mlp1 = [Linear(rng, d_in, h), BatchNorm(h), ReLU(),
                Linear(rng, h, h), BatchNorm(h), ReLU()]
        mlp2 = [Linear(rng, h, h), BatchNorm(h), ReLU(),
                Linear(rng, h, d_out)]
        layers = [GINConv(rng, mlp1, d_in, h), ReLU(),
                  GINConv(rng, mlp2, h, d_out)]
    elif a == "gat-2l":
        h1, h2 = spec.gat_heads
        layers = [GATConv(rng, d_in, h, heads=h1, concat=True),
                  BatchNorm(h * h1), ReLU(),
                  GATConv(rng, h * h1, d_out, heads=h2, concat=False)]
    else:  # pragma: no cover - guarded by ModelSpec
        raise ParameterError(f"unknown architecture {a!r}")
    return GnnModel(spec, layers)


def accuracy(model: GnnModel, graph: Graph, indices: np.ndarray) -> float:
    log_probs = model.predict_log_probs(graph)
    predicted = log_probs.argmax(axis=1)
    return float((predicted[indices] == graph.labels[indices]).mean())


# ---------------------------------------------------------------------------
# checkpoints (JSON-of-arrays; floats serialize via repr and round-trip exactly)


def save_checkpoint(model: GnnModel, path) -> None:
    payload = {
        "format": "gnnxbench-checkpoint-v1",
        "spec": {
            "architecture": model.spec.architecture,
            "input_size": model.spec.input_size,
            "output_size": model.spec.output_size,
            "hidden": model.spec.hidden,
            "gat_heads": list(model.spec.gat_heads),
        },
        "meta": model.meta,
        "params": {
            name: p.data.tolist() for name, p in model.named_parameters()
        },
        "bn_stats": {},
    }
    for i, layer in enumerate(model.layers):
        stats = _bn_stats(layer, f"layers.{i}")
        payload["bn_stats"].update(stats)
        if isinstance(layer, GINConv):
            for j, inner in enumerate(layer.mlp):
                payload["bn_stats"].update(_bn_stats(inner, f"layers.{i}.mlp.{j}"))
    Path(path).write_text(
        json.dumps(payload, sort_keys=True) + "\n", encoding="utf-8"
    )


def _bn_stats(layer, prefix: str) -> dict:
    if isinstance(layer, BatchNorm) and layer.stored_mean is not None:
        return {
            f"{prefix}.mean": layer.stored_mean.tolist(),
            f"{prefix}.var": layer.stored_var.tolist(),
        }
    return {}


def load_checkpoint(path) -> GnnModel:
    """Rebuild a model from a checkpoint; defense attachments are restored
    by gnnxbench.defenses.restore_attachments using the stored meta."""
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    spec_d = payload["spec"]
    spec = ModelSpec(
        architecture=spec_d["architecture"],
        input_size=int(spec_d["input_size"]),
        output_size=int(spec_d["output_size"]),
        hidden=int(spec_d["hidden"]),
        gat_heads=tuple(spec_d["gat_heads"]),
    )
    model = build_model(spec, seed=0)
    model.meta = payload.get("meta", {})
    from .defenses import restore_attachments

    restore_attachments(model)
    params = dict(model.named_parameters())
    for name, values in payload["params"].items():
        if name not in params:
            raise ParameterError(f"checkpoint parameter {name!r} has no slot")
        arr = np.asarray(values, dtype=np.float64)
        if arr.shape != params[name].data.shape:
            raise ShapeError(
                f"checkpoint parameter {name!r}: shape {arr.shape} vs "
                f"{params[name].data.shape}"
            )
        params[name].data[...] = arr
    stats = payload.get("bn_stats", {})
    for i, layer in enumerate(model.layers):
        _restore_bn(layer, f"layers.{i}", stats)
        if isinstance(layer, GINConv):
            for j, inner in enumerate(layer.mlp):
                _restore_bn(inner, f"layers.{i}.mlp.{j}", stats)
    return model


def _restore_bn(layer, prefix: str, stats: dict) -> None:
    if isinstance(layer, BatchNorm) and f"{prefix}.mean" in stats:
        layer.stored_mean = np.asarray(stats[f"{prefix}.mean"], dtype=np.float64)
        layer.stored_var = np.asarray(stats[f"{prefix}.var"], dtype=np.float64)
