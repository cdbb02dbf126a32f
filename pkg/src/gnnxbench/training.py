"""Full-graph training with additive defense loss hooks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor
from .errors import ParameterError, TrainingError
from .graphs import Graph, SplitMasks
from .layers import GraphContext, context_for
from .models import GnnModel


@dataclass
class EpochContext:
    """What a loss hook sees each epoch: the live forward pass plus inputs."""

    model: GnnModel
    graph: Graph
    ctx: GraphContext
    masks: SplitMasks
    scores: Tensor          # pre-log-softmax model output on the tape
    log_probs: Tensor
    base_loss: Tensor
    epoch: int
    rng: np.random.Generator


def base_nll(c: EpochContext) -> Tensor:
    return ad.nll_loss(c.log_probs, c.graph.labels, c.masks.train_indices)


def input_gradient(model: GnnModel, graph: Graph, ctx: GraphContext,
                   masks: SplitMasks, loss_fn=None) -> np.ndarray:
    """Gradient of the training loss w.r.t. the feature matrix.

    Runs a throwaway forward/backward; it pollutes parameter .grad buffers,
    so callers must zero gradients before the real backward pass (train()
    does this after all hooks ran).
    """
    x = Tensor(graph.features, requires_grad=True)
    scores = model.forward_scores(x, ctx, training=True, update_stats=False,
                                  tape=True)
    log_probs = ad.log_softmax(scores)
    if loss_fn is None:
        loss = ad.nll_loss(log_probs, graph.labels, masks.train_indices)
    else:
        loss = loss_fn(scores, log_probs)
    x.zero_grad()
    loss.backward()
    return x.grad


def train(model: GnnModel, graph: Graph, masks: SplitMasks, *,
          epochs: int = 200, hooks=(), seed: int = 0, lr: float = 1e-3,
          warmup: tuple[int, float] | None = None,
          base_loss=base_nll) -> GnnModel:
    """Adam full-batch training; returns the same model with meta filled in.

    hooks are callables EpochContext -> Tensor | None whose results add to
    the base loss. warmup=(iters, lr) runs a joint warm-up phase first
    (message-gating defense), then training proceeds normally.
    """
    if epochs < 1:
        raise ParameterError(f"epochs must be >= 1, got {epochs}")
    ctx = context_for(graph)
    rng = np.random.default_rng(seed)
    params = model.parameters()
    curve: list[float] = []

    def run_phase(num_epochs: int, phase_lr: float) -> None:
        opt = Adam(params, lr=phase_lr)
        for epoch in range(num_epochs):
            scores = model.forward_scores(
                graph.features, ctx, training=True, update_stats=True,
                tape=True, rng=rng,
            )
            log_probs = ad.log_softmax(scores)
            c = EpochContext(model=model, graph=graph, ctx=ctx, masks=masks,
                             scores=scores, log_probs=log_probs,
                             base_loss=None, epoch=epoch, rng=rng)
            total = base_loss(c)
            c.base_loss = total
            for hook in hooks:
                extra = hook(c)
                if extra is not None:
                    total = ad.add(total, extra)
            if not np.isfinite(total.data):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}", epoch=epoch
                )
            # hooks may have run internal backward passes; start grads clean
            opt.zero_grad()
            total.backward()
            opt.step()
            curve.append(float(total.data))

    if warmup is not None:
        run_phase(warmup[0], warmup[1])
    run_phase(epochs, lr)

    model.meta.update({
        "epochs": epochs,
        "final_train_loss": curve[-1],
        "train_seed": seed,
        "loss_curve": curve,
    })
    return model
