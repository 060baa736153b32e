"""Command-line entry point.

Every command reads an optional JSON run configuration (``--config``) whose
sections mirror the configuration dataclasses; ``--seed`` and repeated
``--set section.field=value`` flags override file values. Exit codes: 0 success,
1 failed check, 2 configuration error, 3 I/O or data-format error, 4 shape or
compatibility error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from ._config import from_mapping, require, to_mapping
from .detections import Dataset, load_dataset, save_dataset
from .exceptions import CheckpointError, ConfigError, DatasetFormatError, ShapeMismatchError
from .experiments import (
    ABLATION_MASKS, DELTA_VALUES, EPSILON_VALUES, MAX_PERTURBATION, FeatureMask, Splits, ablate_features,
    baseline_scores, export_visualization, make_trainer, model_config_for, perturbation_levels, report,
    robustness_eval, score_dataset, sweep,
)
from .graph import GraphConfig, build_graph
from .metrics import discordant_counts, mcnemar_exact
from .model import ModelConfig, forward, load_checkpoint, save_checkpoint
from .synthetic import GeneratorConfig, PerturbConfig, generate_dataset
from .testing import random_grad_checks
from .training import TrainConfig, train

log = logging.getLogger("gada")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_IO, EXIT_SHAPE = 0, 1, 2, 3, 4
SPLIT_NAMES = ("train", "val", "test")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    generator: GeneratorConfig = GeneratorConfig()
    splits: dict = field(default_factory=lambda: {"train": 400, "val": 100, "test": 100})
    graph: GraphConfig = GraphConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    noise_schedule: tuple[PerturbConfig, ...] = ()
    robustness: tuple[PerturbConfig, ...] = tuple(perturbation_levels(MAX_PERTURBATION, 5))
    paths: dict = field(default_factory=lambda: {"data": "data", "out": "runs"})

    def __post_init__(self):
        require(isinstance(self.seed, int) and self.seed >= 0, "seed must be a nonnegative integer")
        unknown = set(self.splits) - set(SPLIT_NAMES)
        require(not unknown, f"unknown split(s): {sorted(unknown)}")
        for name, n in self.splits.items():
            require(isinstance(n, int) and n >= 2, f"split {name} needs at least 2 videos")
        # the model input width always follows the graph features
        object.__setattr__(self, "model", model_config_for(self.graph, self.model))

    def component_seeds(self) -> dict[str, int]:
        """Master seed split into independent component seeds."""
        names = ("train_data", "val_data", "test_data", "training", "perturbation")
        states = np.random.SeedSequence(self.seed).generate_state(len(names))
        return dict(zip(names, (int(s) for s in states)))

    def train_config(self) -> TrainConfig:
        return replace(self.train, seed=self.component_seeds()["training"])

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "generator": to_mapping(self.generator),
            "splits": dict(self.splits),
            "graph": to_mapping(self.graph),
            "model": self.model.to_dict(),
            "train": to_mapping(self.train),
            "noise_schedule": [to_mapping(p) for p in self.noise_schedule],
            "robustness": [to_mapping(p) for p in self.robustness],
            "paths": dict(self.paths),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("run configuration must be an object")
        unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"RunConfig: unknown field(s) {', '.join(sorted(unknown))}")
        kw: dict[str, Any] = {}
        if "seed" in data:
            kw["seed"] = data["seed"]
        for name, typ in (("generator", GeneratorConfig), ("graph", GraphConfig), ("model", ModelConfig),
                          ("train", TrainConfig)):
            if name in data:
                kw[name] = from_mapping(typ, data[name])
        for name in ("noise_schedule", "robustness"):
            if name in data:
                if not isinstance(data[name], list):
                    raise ConfigError(f"{name} must be a list of perturbation levels")
                kw[name] = tuple(from_mapping(PerturbConfig, p) for p in data[name])
        for name in ("splits", "paths"):
            if name in data:
                if not isinstance(data[name], dict):
                    raise ConfigError(f"{name} must be an object")
                kw[name] = {**getattr(cls(), name), **data[name]}
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def _parse_override(text: str) -> tuple[list[str], Any]:
    if "=" not in text:
        raise ConfigError(f"--set expects section.field=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def read_config_data(path: str | None, overrides: Sequence[str] = (), seed: int | None = None) -> dict:
    """Raw configuration mapping: file contents with flag overrides applied."""
    data: dict = {}
    if path:
        text = Path(path).read_text(encoding="utf-8")
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    for item in overrides:
        keys, value = _parse_override(item)
        node = data
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set {item}: {k} is not a section")
        node[keys[-1]] = value
    if seed is not None:
        data["seed"] = seed
    return data


def load_run_config(path: str | None, overrides: Sequence[str] = (), seed: int | None = None) -> RunConfig:
    return RunConfig.from_dict(read_config_data(path, overrides, seed))


# --- helpers ------------------------------------------------------------------

def _require_path(path: str | Path) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path} does not exist")
    return path


def _load_splits(data_dir: str | Path, names: Sequence[str] = SPLIT_NAMES) -> dict[str, Dataset]:
    data_dir = _require_path(data_dir)
    return {name: load_dataset(_require_path(data_dir / f"{name}.jsonl"), name) for name in names}


def _write_json(path: str | Path, doc) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, indent=2), encoding="utf-8")


def _checkpoint_configs(path: str | Path, run: RunConfig, explicit_graph: bool):
    """Load a checkpoint and the graph settings it was trained with.

    When the run configuration sets graph options explicitly they must agree
    with the checkpoint's feature layout.
    """
    params, mcfg, graph_doc = load_checkpoint(_require_path(path), with_graph_config=True)
    ckpt_graph = from_mapping(GraphConfig, graph_doc) if graph_doc is not None else None
    gcfg = run.graph if explicit_graph or ckpt_graph is None else ckpt_graph
    if ckpt_graph is not None and (gcfg.feature_mask != ckpt_graph.feature_mask
                                   or gcfg.use_edge_features != ckpt_graph.use_edge_features):
        raise ShapeMismatchError(
            f"checkpoint {path} was trained with feature_mask={list(ckpt_graph.feature_mask)} "
            f"use_edge_features={ckpt_graph.use_edge_features}, but graphs are built with "
            f"feature_mask={list(gcfg.feature_mask)} use_edge_features={gcfg.use_edge_features}")
    if gcfg.node_in_dim != mcfg.node_in_dim:
        raise ShapeMismatchError(
            f"tensor 'embed.W' expects {mcfg.node_in_dim} node features but feature_mask "
            f"{list(gcfg.feature_mask)} gives {gcfg.node_in_dim}")
    return params, mcfg, gcfg


def _data_dir(args, run: RunConfig) -> str:
    return args.data if args.data is not None else run.paths["data"]


# --- commands -------------------------------------------------------------------

def cmd_generate(args, run: RunConfig) -> int:
    out = Path(args.out if args.out is not None else run.paths["data"])
    out.mkdir(parents=True, exist_ok=True)
    seeds = run.component_seeds()
    for name in SPLIT_NAMES:
        gen = replace(run.generator, n_videos=run.splits[name])
        if name != "train":
            gen = replace(gen, positive_fraction=0.5)  # evaluation splits are class-balanced
        ds = generate_dataset(gen, seeds[f"{name}_data"], id_prefix=f"{name}-", split=name)
        save_dataset(ds, out / f"{name}.jsonl")
        print(f"{name}: {len(ds)} videos ({sum(ds.labels)} positive) -> {out / f'{name}.jsonl'}")
    _write_json(out / "run_config.json", run.to_dict())
    return EXIT_OK


def _history_path(checkpoint: Path) -> Path:
    return checkpoint.with_name(checkpoint.stem + ".history.jsonl")


def cmd_train(args, run: RunConfig) -> int:
    splits = _load_splits(_data_dir(args, run), ("train", "val"))
    ckpt = Path(args.out_checkpoint)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    params, history = train(splits["train"], splits["val"], run.graph, run.model, run.train_config(),
                            run.noise_schedule)
    save_checkpoint(params, run.model, ckpt, graph_config=to_mapping(run.graph))
    with open(_history_path(ckpt), "w", encoding="utf-8") as fh:
        for rec in history.as_dicts():
            fh.write(json.dumps(rec) + "\n")
    print(f"trained {run.train.epochs} epochs in {time.perf_counter() - start:.1f}s; "
          f"best val AUC {history.best_val_auc} at epoch {history.best_epoch} -> {ckpt}")
    return EXIT_OK


def cmd_eval(args, run: RunConfig) -> int:
    params, mcfg, gcfg = _checkpoint_configs(args.checkpoint, run, args.explicit_graph)
    splits = _load_splits(_data_dir(args, run), ("val", "test"))
    val = score_dataset(splits["val"], params, gcfg, mcfg)
    test = score_dataset(splits["test"], params, gcfg, mcfg)
    gada = report(val, test)
    base = report(baseline_scores(splits["val"]), baseline_scores(splits["test"]))
    labels = [s.label for s in test]
    pred_gada = [int(s.score >= gada.threshold) for s in test]
    pred_base = [int(s.score >= base.threshold) for s in baseline_scores(splits["test"])]
    b, c = discordant_counts(labels, pred_gada, pred_base)
    p = mcnemar_exact(b, c)
    doc = {"gada": dataclasses.asdict(gada), "baseline_frame_avg": dataclasses.asdict(base),
           "mcnemar": {"only_gada_correct": b, "only_baseline_correct": c, "p_value": p}}
    for name, rep in (("GADA", gada), ("frame-average baseline", base)):
        print(f"{name}: AUC {rep.auc:.4f}  threshold {rep.threshold:.4f}  sensitivity {rep.sensitivity:.4f}  "
              f"specificity {rep.specificity:.4f}  accuracy {rep.accuracy:.4f}  (n_pos {rep.n_pos}, n_neg {rep.n_neg})")
    print(f"McNemar exact p = {p:.6f} (b={b}, c={c})")
    if args.out:
        _write_json(args.out, doc)
    return EXIT_OK


def cmd_gradcheck(args, run: RunConfig) -> int:
    results = random_grad_checks(run.seed, args.graphs, run.model, fd_step=args.fd_step,
                                 tolerance=args.tolerance, n_coords=args.coords)
    for i, res in enumerate(results):
        log.info("graph %d: %s", i, res)
    worst = max(results, key=lambda r: r.max_rel_error)
    passed = all(r.passed for r in results)
    print(f"{'PASS' if passed else 'FAIL'}: max relative error {worst.max_rel_error:.3e} over "
          f"{len(results)} graphs x {args.coords} coordinates (worst {worst.worst[0]}{list(worst.worst[1])})")
    return EXIT_OK if passed else EXIT_CHECK_FAILED


def _parse_values(text: str, axis: str) -> list:
    try:
        values = [int(v) if axis == "epsilon" else float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--values must be a comma-separated list of numbers, got {text!r}") from None
    require(bool(values), "--values is empty")
    return values


def cmd_sweep(args, run: RunConfig) -> int:
    splits = Splits(**_load_splits(_data_dir(args, run)))
    values = _parse_values(args.values, args.axis) if args.values else list(
        EPSILON_VALUES if args.axis == "epsilon" else DELTA_VALUES)
    params, mcfg, gcfg = None, run.model, run.graph
    if args.frozen:
        require(args.checkpoint is not None, "--frozen needs --checkpoint")
        params, mcfg, gcfg = _checkpoint_configs(args.checkpoint, run, args.explicit_graph)
    table = sweep(splits, make_trainer(run.train_config(), run.noise_schedule), args.axis, values, gcfg, mcfg,
                  retrain=not args.frozen, params=params)
    _emit_table(table, args.out)
    return EXIT_OK


def cmd_ablate(args, run: RunConfig) -> int:
    splits = Splits(**_load_splits(_data_dir(args, run)))
    masks = [FeatureMask.parse(m) for m in args.masks] if args.masks else list(ABLATION_MASKS)
    table = ablate_features(splits, make_trainer(run.train_config(), run.noise_schedule), masks, run.graph,
                            run.model)
    _emit_table(table, args.out)
    return EXIT_OK


def cmd_robustness(args, run: RunConfig) -> int:
    params, mcfg, gcfg = _checkpoint_configs(args.checkpoint, run, args.explicit_graph)
    test = _load_splits(_data_dir(args, run), ("test",))["test"]
    schedule = list(run.robustness)
    if args.levels is not None:
        top = run.robustness[-1] if run.robustness else MAX_PERTURBATION
        schedule = perturbation_levels(top, args.levels)
    table = robustness_eval(test, params, gcfg, mcfg, schedule, seed=run.component_seeds()["perturbation"])
    _emit_table(table, args.out)
    return EXIT_OK


def cmd_viz(args, run: RunConfig) -> int:
    params, mcfg, gcfg = _checkpoint_configs(args.checkpoint, run, args.explicit_graph)
    source = _require_path(args.data if args.data is not None else run.paths["data"])
    files = [source] if source.is_file() else [source / f"{n}.jsonl" for n in SPLIT_NAMES
                                                if (source / f"{n}.jsonl").exists()]
    for path in files:
        for record in load_dataset(path).records:
            if record.video_id == args.video_id:
                graph = build_graph(record, gcfg)
                export_visualization(graph, forward(graph, params, mcfg), args.out)
                print(f"{record.video_id}: {graph.n_nodes} nodes, {graph.n_edges} edges -> {args.out}")
                return EXIT_OK
    raise DatasetFormatError(f"video {args.video_id!r} not found in {source}")


def _emit_table(table, stem) -> None:
    print(table.to_tsv(), end="")
    if stem:
        Path(stem).parent.mkdir(parents=True, exist_ok=True)
        tsv, js = table.save(stem)
        print(f"wrote {tsv} and {js}")


# --- argument parsing -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gada", description="Detection-graph attention video classifier.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text, *, data=True, checkpoint=False):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="JSON run configuration file")
        p.add_argument("--seed", type=int, help="master seed (overrides the config file)")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.FIELD=VALUE",
                       help="override one configuration value (JSON literal); repeatable")
        if data:
            p.add_argument("--data", help="directory holding train/val/test .jsonl splits")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="checkpoint written by 'train'")
        return p

    p = command("generate", "write seeded synthetic train/val/test detection streams", data=False)
    p.add_argument("--out", help="output directory (default: paths.data)")
    p.set_defaults(func=cmd_generate)

    p = command("train", "train a model and write a checkpoint plus per-epoch history")
    p.add_argument("--out-checkpoint", required=True, help="checkpoint path (history goes next to it)")
    p.set_defaults(func=cmd_train)

    p = command("eval", "report test metrics at the validation-selected threshold", checkpoint=True)
    p.add_argument("--out", help="also write the report as JSON here")
    p.set_defaults(func=cmd_eval)

    p = command("gradcheck", "compare analytic gradients with finite differences on random graphs", data=False)
    p.add_argument("--graphs", type=int, default=10, help="number of random graphs (default 10)")
    p.add_argument("--coords", type=int, default=200, help="coordinates sampled per graph (default 200)")
    p.add_argument("--fd-step", type=float, default=1e-5, help="central-difference step (default 1e-5)")
    p.add_argument("--tolerance", type=float, default=1e-4, help="max relative error (default 1e-4)")
    p.set_defaults(func=cmd_gradcheck)

    p = command("sweep", "test AUC across frame windows or IoU thresholds")
    p.add_argument("--axis", choices=("epsilon", "delta"), required=True)
    p.add_argument("--values", help="comma-separated values (default: 3,5,10,60 or 0,0.1,0.3,0.5)")
    p.add_argument("--frozen", action="store_true", help="re-evaluate one checkpoint instead of retraining")
    p.add_argument("--checkpoint", help="checkpoint for --frozen")
    p.add_argument("--out", help="table path stem; writes .tsv and .json")
    p.set_defaults(func=cmd_sweep)

    p = command("ablate", "train and evaluate once per input-feature mask")
    p.add_argument("--masks", nargs="+", metavar="MASK",
                   help="masks like size+confidence+edges (default: the eight standard rows)")
    p.add_argument("--out", help="table path stem; writes .tsv and .json")
    p.set_defaults(func=cmd_ablate)

    p = command("robustness", "frozen-weight test AUC under degraded detections", checkpoint=True)
    p.add_argument("--levels", type=int,
                   help="evenly spaced levels from clean up to the config's last level (default: config list)")
    p.add_argument("--out", help="table path stem; writes .tsv and .json")
    p.set_defaults(func=cmd_robustness)

    p = command("viz", "export node scores, readout weights and attention of one video", checkpoint=True)
    p.add_argument("--video-id", required=True)
    p.add_argument("--out", required=True, help="output JSON path")
    p.set_defaults(func=cmd_viz)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        data = read_config_data(args.config, args.set, args.seed)
        run = RunConfig.from_dict(data)
        args.explicit_graph = "graph" in data
        return args.func(args, run)
    except ShapeMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, DatasetFormatError, CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
