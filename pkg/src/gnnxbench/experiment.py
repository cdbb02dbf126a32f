"""Experiment grid orchestration: dataset x architecture x defense x explainer.

Within one iteration every architecture/defense cell shares the same split
and target-node set. Each cell persists incrementally (its own result file,
mask files, and checkpoint), so an interrupted grid loses at most the
in-flight cell and --resume skips completed ones. All randomness derives
from the master seed through gnnxbench.seeding.derive_seed.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .defenses import DEFENSE_IDS, make_defense
from .errors import ConfigError, MetricError
from .explainers import EXPLAINER_IDS, load_mask, make_explainer, save_mask
from .graphs import Graph, PerturbationSpec, generate_synthetic, load_graph_bundle, split
from .metrics import (
    MetricReport,
    aggregate,
    consistency,
    fidelity,
    mask_l2_distance,
    sparsity,
    stability_runs,
)
from .models import ModelSpec, accuracy, build_model, load_checkpoint, save_checkpoint
from .seeding import derive_seed
from .training import train

ATTACK_SLOTS = ("none", "fgsm-in-training")

DEFENSE_INITIALS = {
    "adv-training": "AT", "autoencoder": "AE", "distillation": "DD",
    "gnnguard": "GG", "grad-reg": "GR", "jaccard": "JD",
    "quantization": "DQD", "none": "Unprotected",
}

SUBGRAPHX_NODE_LIMIT = 3000   # Cora-scale; larger graphs need an override


@dataclass
class ExperimentConfig:
    dataset: dict
    architectures: list[str]
    defenses: list[str]
    explainer: str = "gnnexplainer"
    attack: str = "none"
    iterations: int = 5
    nodes_per_iteration: int = 10
    runs_per_node: int = 5
    epochs: int = 200
    train_fraction: float = 0.8
    seed: int = 0
    output_dir: str = "results"
    workers: int = 1
    fidelity_mode: str = "agreement"
    sparsity_tolerance: float = 1e-6
    perturbation: dict = field(default_factory=lambda: {
        "feature_fraction": 0.05, "node_removal_fraction": 0.05})
    explainer_options: dict = field(default_factory=dict)
    defense_options: dict = field(default_factory=dict)
    subgraphx_allow_large: bool = False

    def validate(self) -> None:
        if self.dataset.get("kind") not in ("bundle", "synthetic"):
            raise ConfigError("dataset.kind must be 'bundle' or 'synthetic'")
        if not self.architectures:
            raise ConfigError("at least one architecture is required")
        for arch in self.architectures:
            ModelSpec(arch, 1, 1)   # raises ParameterError-compatible check
        for defense in self.defenses:
            if defense not in DEFENSE_IDS:
                raise ConfigError(f"unknown defense id {defense!r}")
            make_defense(defense, self.defense_options.get(defense))
        if self.explainer not in EXPLAINER_IDS:
            raise ConfigError(f"unknown explainer id {self.explainer!r}")
        make_explainer(self.explainer, self.explainer_options)
        if self.attack not in ATTACK_SLOTS:
            raise ConfigError(
                f"unknown attack id {self.attack!r}; the attack slot supports "
                f"only {ATTACK_SLOTS} (standalone attacks are out of scope)"
            )
        if self.iterations < 1 or self.nodes_per_iteration < 1:
            raise ConfigError("iterations and nodes_per_iteration must be >= 1")
        if self.runs_per_node < 1 or self.epochs < 1:
            raise ConfigError("runs_per_node and epochs must be >= 1")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must be in (0, 1)")
        if self.fidelity_mode not in ("agreement", "abs-diff"):
            raise ConfigError(f"unknown fidelity mode {self.fidelity_mode!r}")


def config_from_dict(raw: dict) -> ExperimentConfig:
    known = set(ExperimentConfig.__dataclass_fields__)
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
    cfg = ExperimentConfig(**raw)
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return config_from_dict(raw)


def load_dataset(cfg: ExperimentConfig) -> tuple[Graph, str]:
    spec = cfg.dataset
    if spec["kind"] == "bundle":
        graph = load_graph_bundle(spec["path"])
        name = spec.get("name") or Path(spec["path"]).name
    else:
        params = {k: v for k, v in spec.items() if k not in ("kind", "name")}
        graph = generate_synthetic(**params)
        name = spec.get("name", "synthetic")
    return graph, name


@dataclass
class ExperimentCellResult:
    cell_key: str
    dataset: str
    architecture: str
    defense: str
    explainer: str
    iteration: int
    report: MetricReport | None
    test_accuracy: float | None
    seeds: dict
    wall_clock: float | None = None
    error: str | None = None

    def to_payload(self) -> dict:
        """Deterministic payload: everything except wall-clock."""
        return {
            "cell_key": self.cell_key,
            "dataset": self.dataset,
            "architecture": self.architecture,
            "defense": self.defense,
            "explainer": self.explainer,
            "iteration": self.iteration,
            "report": self.report.to_dict() if self.report else None,
            "test_accuracy": self.test_accuracy,
            "seeds": self.seeds,
            "error": self.error,
        }

    def to_jsonl_line(self) -> str:
        return json.dumps(self.to_payload(), sort_keys=True)

    @classmethod
    def from_payload(cls, data: dict) -> "ExperimentCellResult":
        report = (MetricReport.from_dict(data["report"])
                  if data.get("report") else None)
        return cls(
            cell_key=data["cell_key"], dataset=data["dataset"],
            architecture=data["architecture"], defense=data["defense"],
            explainer=data["explainer"], iteration=data["iteration"],
            report=report, test_accuracy=data.get("test_accuracy"),
            seeds=data.get("seeds", {}), error=data.get("error"),
        )


def _cell_key(dataset: str, iteration: int, arch: str, defense: str,
              explainer: str) -> str:
    return f"{dataset}.it{iteration}.{arch}.{defense}.{explainer}"


def iteration_setup(graph: Graph, cfg: ExperimentConfig, iteration: int):
    """Split and target set shared by every cell of one iteration."""
    split_seed = derive_seed(cfg.seed, "split", iteration)
    masks = split(graph, cfg.train_fraction, split_seed)
    test_idx = masks.test_indices
    if cfg.nodes_per_iteration > test_idx.size:
        raise ConfigError(
            f"nodes_per_iteration={cfg.nodes_per_iteration} exceeds the "
            f"test split size {test_idx.size}"
        )
    rng = np.random.default_rng(derive_seed(cfg.seed, "targets", iteration))
    targets = np.sort(rng.choice(test_idx, size=cfg.nodes_per_iteration,
                                 replace=False))
    return masks, [int(t) for t in targets], split_seed


def run_cell(graph: Graph, cfg: ExperimentConfig, dataset_name: str,
             iteration: int, arch: str, defense_id: str,
             out_dir: Path | None = None) -> ExperimentCellResult:
    """Train, explain, and score one grid cell; persists artifacts if out_dir."""
    started = time.monotonic()
    masks, targets, split_seed = iteration_setup(graph, cfg, iteration)
    key = _cell_key(dataset_name, iteration, arch, defense_id, cfg.explainer)
    # model/explainer/perturbation seeds share the (iteration, arch) scope so
    # defense columns form paired comparisons per the shared-target protocol;
    # any cell replays in isolation from (master, iteration, arch, node, run)
    scope = (cfg.seed, iteration, arch)
    seeds = {
        "master": cfg.seed, "split": split_seed,
        "init": derive_seed(*scope, "init"),
        "attach": derive_seed(*scope, "attach"),
        "train": derive_seed(*scope, "train"),
        "post": derive_seed(*scope, "post"),
    }

    defense = make_defense(defense_id, cfg.defense_options.get(defense_id))
    work = defense.transform_graph(graph)
    spec = ModelSpec(arch, work.num_features, work.num_classes)
    model = build_model(spec, seeds["init"])
    model.meta["defense"] = {"id": defense_id, "params": defense.params}
    model.meta["attack"] = cfg.attack
    defense.attach(model, work, seeds["attach"])
    train(model, work, masks, epochs=cfg.epochs, hooks=defense.hooks(),
          seed=seeds["train"], warmup=defense.warmup())
    model = defense.post_train(model, work, masks, seeds["post"],
                               epochs=cfg.epochs, lr=1e-3)
    model.meta.pop("loss_curve", None)
    test_acc = accuracy(model, work, masks.test_indices)

    explainer = make_explainer(cfg.explainer, cfg.explainer_options)
    pert = cfg.perturbation
    per_node = {"fidelity": [], "fidelity_abs": [], "sparsity": [],
                "stability": [], "consistency": []}
    mask_records = []
    for node in targets:
        run_seeds = [derive_seed(*scope, "explain", node, r)
                     for r in range(cfg.runs_per_node)]
        base_masks = [explainer.explain(model, work, node, s) for s in run_seeds]
        pspec = PerturbationSpec(
            feature_fraction=pert["feature_fraction"],
            node_removal_fraction=pert["node_removal_fraction"],
            seed=derive_seed(*scope, "perturb", node),
        )
        trials = stability_runs(model, work, explainer, node, pspec,
                                cfg.runs_per_node, base_masks=base_masks,
                                explainer_seeds=run_seeds)
        per_node["consistency"].append(consistency(base_masks))
        per_node["sparsity"].append(
            sparsity(base_masks[0], cfg.sparsity_tolerance))
        per_node["fidelity"].append(
            fidelity(model, work, [base_masks[0]], mode=cfg.fidelity_mode))
        per_node["fidelity_abs"].append(
            fidelity(model, work, [base_masks[0]], mode="abs-diff"))
        per_node["stability"].append(
            float(np.mean([t.distance for t in trials])))
        for r, (base, trial) in enumerate(zip(base_masks, trials)):
            mask_records.append((node, r, "base", base))
            mask_records.append((node, r, "pert", trial.perturbed_mask))

    report = MetricReport(
        fidelity=aggregate(per_node["fidelity"]),
        sparsity=aggregate(per_node["sparsity"]),
        stability=aggregate(per_node["stability"]),
        consistency=aggregate(per_node["consistency"]),
        extras={"fidelity_abs_diff": aggregate(per_node["fidelity_abs"]).mean},
        metadata={
            "dataset": dataset_name, "architecture": arch,
            "defense": defense_id, "defense_params": defense.params,
            "defense_stage": defense.stage, "attack": cfg.attack,
            "explainer": cfg.explainer, "iteration": iteration,
            "targets": targets, "runs_per_node": cfg.runs_per_node,
            "epochs": cfg.epochs, "fidelity_mode": cfg.fidelity_mode,
            "sparsity_tolerance": cfg.sparsity_tolerance,
            "perturbation": dict(pert),
            "feature_budget_scope": "per-node",
        },
    )
    result = ExperimentCellResult(
        cell_key=key, dataset=dataset_name, architecture=arch,
        defense=defense_id, explainer=cfg.explainer, iteration=iteration,
        report=report, test_accuracy=test_acc, seeds=seeds,
        wall_clock=time.monotonic() - started,
    )
    if out_dir is not None:
        persist_cell(result, model, mask_records, out_dir,
                     explainer_config=asdict(explainer.config))
    return result


def persist_cell(result: ExperimentCellResult, model, mask_records,
                 out_dir: Path, explainer_config: dict | None = None) -> None:
    out_dir = Path(out_dir)
    cells = out_dir / "cells"
    masks_dir = out_dir / "masks" / result.cell_key
    ckpt_dir = out_dir / "checkpoints"
    for d in (cells, masks_dir, ckpt_dir):
        d.mkdir(parents=True, exist_ok=True)
    for node, run, variant, mask in mask_records:
        save_mask(mask, masks_dir / f"node{node}_run{run}_{variant}.mask",
                  header_extra={"variant": variant, "run": run, "node": node,
                                "cell": result.cell_key,
                                "config": explainer_config or {}})
    save_checkpoint(model, ckpt_dir / f"{result.cell_key}.json")
    (cells / f"{result.cell_key}.json").write_text(
        json.dumps(result.to_payload(), sort_keys=True, indent=1) + "\n",
        encoding="utf-8")
    (cells / f"{result.cell_key}.timing.json").write_text(
        json.dumps({"wall_clock_seconds": result.wall_clock}) + "\n",
        encoding="utf-8")


def _cell_task(args) -> ExperimentCellResult:
    graph, cfg, dataset_name, iteration, arch, defense_id, out_dir = args
    return run_cell(graph, cfg, dataset_name, iteration, arch, defense_id,
                    out_dir)


def run_experiment(cfg: ExperimentConfig, resume: bool = False,
                   log=print) -> list[ExperimentCellResult]:
    cfg.validate()
    graph, dataset_name = load_dataset(cfg)
    if (cfg.explainer == "subgraphx"
            and graph.num_nodes > SUBGRAPHX_NODE_LIMIT
            and not cfg.subgraphx_allow_large):
        raise ConfigError(
            f"subgraphx on {graph.num_nodes} nodes exceeds the supported "
            f"scale ({SUBGRAPHX_NODE_LIMIT}); set subgraphx_allow_large to "
            f"override"
        )
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cells_dir = out_dir / "cells"

    tasks = []
    for iteration in range(cfg.iterations):
        iteration_setup(graph, cfg, iteration)   # validates target-set size
        for arch in cfg.architectures:
            for defense_id in cfg.defenses:
                tasks.append((iteration, arch, defense_id))

    results: list[ExperimentCellResult] = []
    pending = []
    for iteration, arch, defense_id in tasks:
        key = _cell_key(dataset_name, iteration, arch, defense_id, cfg.explainer)
        cell_file = cells_dir / f"{key}.json"
        if resume and cell_file.is_file():
            payload = json.loads(cell_file.read_text(encoding="utf-8"))
            results.append(ExperimentCellResult.from_payload(payload))
            log(f"[resume] {key}")
        else:
            pending.append((iteration, arch, defense_id, key))

    def finish(result: ExperimentCellResult) -> None:
        results.append(result)
        if result.error:
            log(f"[error]  {result.cell_key}: {result.error}")
        else:
            log(f"[done]   {result.cell_key} "
                f"acc={result.test_accuracy:.3f} "
                f"stability={result.report.stability.mean:.3f} "
                f"sparsity={result.report.sparsity.mean:.3f}")

    if cfg.workers > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            args = [(graph, cfg, dataset_name, it, arch, d, out_dir)
                    for it, arch, d, _ in pending]
            for (it, arch, d, key), outcome in zip(
                    pending, pool.map(_try_cell, args)):
                finish(outcome)
    else:
        for it, arch, d, key in pending:
            finish(_try_cell((graph, cfg, dataset_name, it, arch, d, out_dir)))

    results.sort(key=lambda r: (r.iteration, r.architecture, r.defense))
    emit_summary(results, out_dir)
    return results


def _try_cell(args) -> ExperimentCellResult:
    graph, cfg, dataset_name, iteration, arch, defense_id, out_dir = args
    key = _cell_key(dataset_name, iteration, arch, defense_id, cfg.explainer)
    try:
        return _cell_task(args)
    except Exception as exc:   # cell failures must not abort the grid
        result = ExperimentCellResult(
            cell_key=key, dataset=dataset_name, architecture=arch,
            defense=defense_id, explainer=cfg.explainer, iteration=iteration,
            report=None, test_accuracy=None,
            seeds={"master": cfg.seed}, error=f"{type(exc).__name__}: {exc}",
        )
        if out_dir is not None:
            cells = Path(out_dir) / "cells"
            cells.mkdir(parents=True, exist_ok=True)
            (cells / f"{key}.json").write_text(
                json.dumps(result.to_payload(), sort_keys=True, indent=1) + "\n",
                encoding="utf-8")
        return result


# ---------------------------------------------------------------------------
# summary emission


METRIC_NAMES = ("consistency", "fidelity", "sparsity", "stability")


def emit_summary(results: list[ExperimentCellResult], out_dir) -> None:
    """Write results.jsonl, summary.csv (metric x defense x architecture),
    and per-metric bar charts."""
    if not results:
        raise MetricError("emit_summary needs a non-empty result list")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    with (out_dir / "results.jsonl").open("w", encoding="utf-8",
                                          newline="\n") as fh:
        for result in results:
            fh.write(result.to_jsonl_line() + "\n")

    ok = [r for r in results if r.report is not None]
    defenses = sorted({r.defense for r in ok},
                      key=lambda d: list(DEFENSE_INITIALS).index(d))
    arches = sorted({r.architecture for r in ok})

    def pooled(arch: str, defense: str, metric: str):
        values = [getattr(r.report, metric).mean
                  for r in ok if r.architecture == arch and r.defense == defense]
        return aggregate(values) if values else None

    lines = ["architecture,metric," + ",".join(
        DEFENSE_INITIALS[d] for d in defenses)]
    for arch in arches:
        for metric in METRIC_NAMES:
            row = [arch, metric]
            for defense in defenses:
                stat = pooled(arch, defense, metric)
                row.append(stat.formatted() if stat else "")
            lines.append(",".join(row))
    (out_dir / "summary.csv").write_text("\n".join(lines) + "\n",
                                         encoding="utf-8")

    _plot_metrics(ok, defenses, arches, out_dir / "plots", pooled)


def _plot_metrics(ok, defenses, arches, plot_dir: Path, pooled) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plot_dir.mkdir(parents=True, exist_ok=True)
    labels = [DEFENSE_INITIALS[d] for d in defenses]
    for metric in METRIC_NAMES:
        fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(defenses), 3.2))
        width = 0.8 / max(len(arches), 1)
        xs = np.arange(len(defenses))
        for i, arch in enumerate(arches):
            stats = [pooled(arch, d, metric) for d in defenses]
            means = [s.mean if s else np.nan for s in stats]
            errs = [s.std if s else 0.0 for s in stats]
            ax.bar(xs + i * width, means, width, yerr=errs, capsize=2,
                   label=arch)
        ax.set_xticks(xs + width * (len(arches) - 1) / 2)
        ax.set_xticklabels(labels)
        ax.set_ylabel(metric)
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(plot_dir / f"{metric}.svg")
        plt.close(fig)


# ---------------------------------------------------------------------------
# metrics-only recomputation from persisted artifacts


def recompute_cell(out_dir: Path, cell_payload: dict,
                   cfg: ExperimentConfig, graph: Graph) -> ExperimentCellResult:
    """Rebuild a cell's MetricReport from its persisted masks + checkpoint."""
    out_dir = Path(out_dir)
    key = cell_payload["cell_key"]
    meta = cell_payload["report"]["metadata"]
    defense = make_defense(meta["defense"], meta.get("defense_params"))
    work = defense.transform_graph(graph)
    model = load_checkpoint(out_dir / "checkpoints" / f"{key}.json")
    masks_dir = out_dir / "masks" / key

    per_node = {"fidelity": [], "fidelity_abs": [], "sparsity": [],
                "stability": [], "consistency": []}
    for node in meta["targets"]:
        runs = meta["runs_per_node"]
        base = [load_mask(masks_dir / f"node{node}_run{r}_base.mask")[0]
                for r in range(runs)]
        pert = [load_mask(masks_dir / f"node{node}_run{r}_pert.mask")[0]
                for r in range(runs)]
        per_node["consistency"].append(consistency(base))
        per_node["sparsity"].append(sparsity(base[0], meta["sparsity_tolerance"]))
        per_node["fidelity"].append(
            fidelity(model, work, [base[0]], mode=meta["fidelity_mode"]))
        per_node["fidelity_abs"].append(
            fidelity(model, work, [base[0]], mode="abs-diff"))
        per_node["stability"].append(float(np.mean(
            [mask_l2_distance(b, p) for b, p in zip(base, pert)])))

    report = MetricReport(
        fidelity=aggregate(per_node["fidelity"]),
        sparsity=aggregate(per_node["sparsity"]),
        stability=aggregate(per_node["stability"]),
        consistency=aggregate(per_node["consistency"]),
        extras={"fidelity_abs_diff": aggregate(per_node["fidelity_abs"]).mean},
        metadata=meta,
    )
    return ExperimentCellResult(
        cell_key=key, dataset=cell_payload["dataset"],
        architecture=cell_payload["architecture"],
        defense=cell_payload["defense"], explainer=cell_payload["explainer"],
        iteration=cell_payload["iteration"], report=report,
        test_accuracy=cell_payload.get("test_accuracy"),
        seeds=cell_payload.get("seeds", {}),
    )


def metrics_only(cfg: ExperimentConfig, out_dir, log=print) -> list[ExperimentCellResult]:
    out_dir = Path(out_dir)
    graph, _ = load_dataset(cfg)
    results = []
    cell_files = sorted((out_dir / "cells").glob("*.json"))
    for path in cell_files:
        if path.name.endswith(".timing.json"):
            continue
        payload = json.loads(path.read_text(encoding="utf-8"))
        if payload.get("error") or not payload.get("report"):
            results.append(ExperimentCellResult.from_payload(payload))
            continue
        result = recompute_cell(out_dir, payload, cfg, graph)
        match = result.to_payload() == payload
        log(f"[metrics-only] {result.cell_key} "
            f"{'matches' if match else 'RECOMPUTED DIFFERENTLY'}")
        results.append(result)
    if not results:
        raise ConfigError(f"no persisted cells under {out_dir}/cells")
    results.sort(key=lambda r: (r.iteration, r.architecture, r.defense))
    emit_summary(results, out_dir)
    return results
