#!/usr/bin/env python3
"""
Object-room affinity command line interface.

Subcommands read and write their artifacts under ``--out``:

    gen-synthetic      features.afm1, soft_scores.json, ground_truth.json, split.json
    build-graph        graph/graph_nodes.json, graph/graph_edges.kge1
    stats              stats.json
    train              step_<n>.gck1, train_log.jsonl
    eval               eval_report.json
    infer              rankings.csv
    tune-temp          tune_temperature.json
    export-embeddings  embeddings.tsv

Every subcommand also writes effective_config.txt. Exit codes: 0 success,
1 runtime failure, 2 usage or configuration error.
"""

import argparse
import json
import logging
import re
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from rich.console import Console
from rich.logging import RichHandler
from rich.panel import Panel
from rich.table import Table

from annotations import (GroundTruthMap, SoftScoreTable, compute_soft_scores, ground_truth_map,
                         load_annotations, load_ground_truth, load_soft_scores, save_json, top_rooms)
from features import (DatasetSplit, FeatureMatrix, SplitError, gen_synthetic, load_features,
                      parse_image_node_name, room_features, save_features, save_split, load_split,
                      split_dataset)
from gcn import GcnModel, load_checkpoint
from infer import (AffinityMatrix, EvaluationSet, aggregate_category, category_affinities, export_embeddings,
                   raw_feature_affinities, write_rankings)
from kgraph import NODES_FILE, KnowledgeGraph, build_graph, graph_stats, load_graph, save_graph
from metrics import evaluate_affinity
from run_config import ConfigError, RunConfig
from train import LOG_FILE, train, tune_temperature
from training_monitor import TrainingMonitor

logger = logging.getLogger(__name__)

SUBCOMMANDS = ("gen-synthetic", "build-graph", "stats", "train", "eval", "infer", "tune-temp",
               "export-embeddings")
CHECKPOINT_RE = re.compile(r"^step_(\d+)\.gck1$")


class UsageError(ConfigError):
    """A required input is missing or the invocation cannot be satisfied."""


@dataclass
class Inputs:
    features: FeatureMatrix
    scores: SoftScoreTable
    gt: GroundTruthMap
    split: DatasetSplit


def _dump_json(data, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")
    return path


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise UsageError(f"{what} not found: {path}")
    return path


def infer_split(features: FeatureMatrix, categories: Sequence[str], ratios: Sequence[int],
                seed: int) -> DatasetSplit:
    """Split the images named in ``features`` (``<category>/<index>`` rows)."""
    indices: Dict[str, set] = {}
    for name in features.names:
        if "/" not in name:
            continue
        cat, idx = parse_image_node_name(name)
        indices.setdefault(cat, set()).add(idx)
    missing = [c for c in categories if c not in indices]
    if missing:
        raise SplitError(f"feature file has no images for categories: {', '.join(missing[:5])}")
    for cat in categories:
        if indices[cat] != set(range(len(indices[cat]))):
            raise SplitError(f"image indices of {cat!r} are not 0..n-1")
    counts = {cat: len(indices[cat]) for cat in categories}
    return split_dataset(categories, counts, tuple(ratios), seed=seed, allow_scaling=True)


class AffinityCLI:
    def __init__(self, run: RunConfig, console: Optional[Console] = None):
        self.run = run
        self.console = console or Console()
        self.out = Path(run.out)

    def print_header(self, command: str):
        self.console.print(Panel.fit(f"[bold blue]🏠 object-room affinity[/bold blue] [yellow]{command}[/yellow]\n"
                                     f"[green]output: {self.out}[/green]", border_style="blue"))

    def ok(self, message: str):
        self.console.print(f"[green]✅ {message}[/green]")

    # ---- inputs ----

    def load_inputs(self) -> Inputs:
        run = self.run
        features = load_features(_require(run.path("features", "features.afm1"), "feature file"))
        if run.annotations:
            records = load_annotations(_require(Path(run.annotations), "annotation file"))
            scores = compute_soft_scores(records, run.min_opinions)
            gt = ground_truth_map(scores)
            save_json(scores, self.out / "soft_scores.json")
            save_json(gt, self.out / "ground_truth.json")
        else:
            scores = load_soft_scores(_require(run.path("scores", "soft_scores.json"), "soft score table"))
            gt = load_ground_truth(_require(run.path("ground_truth", "ground_truth.json"), "ground truth map"))
        split_path = run.path("split", "split.json")
        if split_path.exists():
            split = load_split(split_path)
        else:
            split = infer_split(features, gt.objects, run.split_ratios, run.seed)
            save_split(split, self.out / "split.json")
        return Inputs(features, scores, gt, split)

    def graph(self, inputs: Inputs) -> KnowledgeGraph:
        graph_dir = self.run.path("graph", "graph")
        if (graph_dir / NODES_FILE).exists():
            return load_graph(graph_dir)
        return build_graph(inputs.split, inputs.gt, inputs.scores, seed=self.run.seed)

    def room_rows(self, inputs: Inputs, rooms: Sequence[str]) -> FeatureMatrix:
        return room_features(rooms, inputs.features.dim, self.run.room_features, seed=self.run.seed,
                             source=inputs.features)

    def node_features(self, inputs: Inputs, graph: KnowledgeGraph) -> FeatureMatrix:
        images = inputs.features.select(graph.node_names[:graph.n_obj_nodes])
        return images.stack(self.room_rows(inputs, graph.rooms))

    def evaluation_set(self, inputs: Inputs, graph: KnowledgeGraph, which: str) -> EvaluationSet:
        return EvaluationSet.from_split(inputs.features, inputs.split, which, self.room_rows(inputs, graph.rooms),
                                        inputs.gt)

    def checkpoint(self) -> GcnModel:
        if self.run.checkpoint:
            return load_checkpoint(_require(Path(self.run.checkpoint), "checkpoint"))
        found = sorted((int(m.group(1)), p) for p in self.out.glob("step_*.gck1")
                       if (m := CHECKPOINT_RE.match(p.name)))
        if not found:
            raise UsageError(f"no checkpoint: pass --checkpoint or run train with --out {self.out}")
        return load_checkpoint(found[-1][1])

    def affinities(self, inputs: Inputs) -> AffinityMatrix:
        graph = self.graph(inputs)
        eval_set = self.evaluation_set(inputs, graph, self.run.eval_split)
        if self.run.untuned:
            per_image = raw_feature_affinities(eval_set.image_features, eval_set.room_features)
            return aggregate_category(per_image, eval_set.category_of)
        return category_affinities(self.checkpoint(), eval_set)

    # ---- subcommands ----

    def gen_synthetic(self):
        spec = self.run.synthetic_spec()
        features, gt, scores = gen_synthetic(spec)
        split = split_dataset(spec.categories, spec.images_per_category, self.run.split_ratios,
                              seed=self.run.seed, allow_scaling=True)
        self.out.mkdir(parents=True, exist_ok=True)
        save_features(features, self.out / "features.afm1")
        save_json(scores, self.out / "soft_scores.json")
        save_json(gt, self.out / "ground_truth.json")
        save_split(split, self.out / "split.json")
        self.ok(f"synthetic dataset: {spec.n_categories} categories x {spec.images_per_category} images, "
                f"{spec.n_rooms} rooms, dim {spec.dim}")

    def build_graph(self):
        inputs = self.load_inputs()
        graph = build_graph(inputs.split, inputs.gt, inputs.scores, seed=self.run.seed)
        nodes_path, edges_path = save_graph(graph, self.run.path("graph", "graph"))
        self.ok(f"graph: {graph.n_nodes} nodes, {graph.n_edges} edges -> {nodes_path.parent}")

    def stats(self):
        graph_dir = self.run.path("graph", "graph")
        graph = load_graph(graph_dir) if (graph_dir / NODES_FILE).exists() else self.graph(self.load_inputs())
        stats = graph_stats(graph)
        _dump_json(stats.to_json(), self.out / "stats.json")

        table = Table(title="📊 knowledge graph")
        table.add_column("edge type", style="cyan")
        table.add_column("edges", style="green", justify="right")
        table.add_column("weight range", style="yellow")
        for etype, count in sorted(stats.edges_per_type.items()):
            lo, hi = stats.weight_range.get(etype, (float("nan"), float("nan")))
            table.add_row(str(etype), str(count), f"[{lo:.4f}, {hi:.4f}]" if count else "-")
        self.console.print(table)
        self.ok(f"{stats.n_obj_nodes} image nodes + {stats.n_room_nodes} room nodes = {stats.n_nodes}, "
                f"{stats.n_edges} edges")

    def train(self):
        inputs = self.load_inputs()
        graph = self.graph(inputs)
        node_fm = self.node_features(inputs, graph)
        validation = self.evaluation_set(inputs, graph, "val") if inputs.split.names("val") else None
        monitor = TrainingMonitor()
        model, log = train(graph, node_fm, self.run.gcn_config(node_fm.dim), self.run.train_config(),
                           validation=validation, out_dir=self.out, monitor=monitor, gt=inputs.gt)
        last = log.entries[-1]
        summary = f"final loss {last.loss:.6f}"
        if last.val_map is not None:
            summary += f", val mAP {last.val_map:.4f}"
        self.ok(f"trained {self.run.steps} steps ({summary}); log -> {self.out / LOG_FILE}")

    def eval(self):
        inputs = self.load_inputs()
        affinity = self.affinities(inputs)
        relevant = top_rooms(inputs.scores, self.run.top_k_relevant) if self.run.top_k_relevant else None
        report = evaluate_affinity(affinity, inputs.gt, self.run.hit_ks, relevant)
        _dump_json(report.to_json(), self.out / "eval_report.json")

        table = Table(title=f"🎯 evaluation ({self.run.eval_split})")
        table.add_column("metric", style="cyan")
        table.add_column("value", style="green", justify="right")
        table.add_row("mAP", f"{report.map:.4f}")
        for k, value in sorted(report.hit_ratio.items()):
            table.add_row(f"top-{k} hit ratio", f"{value:.4f}")
        self.console.print(table)
        self.ok(f"report -> {self.out / 'eval_report.json'}")

    def infer(self):
        inputs = self.load_inputs()
        affinity = self.affinities(inputs)
        path = write_rankings(affinity, self.out / "rankings.csv")
        self.ok(f"rankings for {len(affinity.row_names)} categories -> {path}")

    def tune_temp(self):
        inputs = self.load_inputs()
        graph = self.graph(inputs)
        if not inputs.split.names("val"):
            raise UsageError("tune-temp needs a non-empty val split")
        node_fm = self.node_features(inputs, graph)
        search = tune_temperature(self.run.temperatures, graph, node_fm, self.run.gcn_config(node_fm.dim),
                                  self.run.train_config(), self.evaluation_set(inputs, graph, "val"))
        _dump_json(search.to_json(), self.out / "tune_temperature.json")

        table = Table(title="🌡️ temperature search")
        table.add_column("T", style="cyan", justify="right")
        table.add_column("val mAP", style="green", justify="right")
        for temp, value in sorted(search.val_map.items()):
            table.add_row(f"{temp:g}", f"{value:.4f}")
        self.console.print(table)
        self.ok(f"best temperature {search.best:g}")

    def export_embeddings(self):
        inputs = self.load_inputs()
        graph = self.graph(inputs)
        path = export_embeddings(self.checkpoint(), self.node_features(inputs, graph), self.out / "embeddings.tsv")
        self.ok(f"{graph.n_nodes} embeddings -> {path}")

    def dispatch(self, command: str):
        self.print_header(command)
        self.run.echo(self.out)
        handlers = {
            "gen-synthetic": self.gen_synthetic,
            "build-graph": self.build_graph,
            "stats": self.stats,
            "train": self.train,
            "eval": self.eval,
            "infer": self.infer,
            "tune-temp": self.tune_temp,
            "export-embeddings": self.export_embeddings,
        }
        handlers[command]()


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--verbose", "-v", action="store_true", help="debug logging")
    for key in RunConfig.keys():
        common.add_argument("--" + key.replace("_", "-"), dest=key, default=None, metavar="VALUE",
                            help=RunConfig.help_for(key))

    parser = argparse.ArgumentParser(prog="affinity_cli.py", description="Object-room affinity toolkit")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name in SUBCOMMANDS:
        sub.add_parser(name, parents=[common], help=name.replace("-", " "))
    return parser


def setup_logging(verbose: bool):
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format="%(message)s",
                        handlers=[RichHandler(console=Console(stderr=True), show_path=False)])


def main(argv: Optional[List[str]] = None) -> int:
    """Run one subcommand; returns the process exit code."""
    console = Console()
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    setup_logging(args.verbose)

    flags = {key: getattr(args, key) for key in RunConfig.keys() if getattr(args, key) is not None}
    try:
        run = RunConfig.resolve(args.config, flags)
        AffinityCLI(run, console).dispatch(args.command)
    except (ConfigError, FileNotFoundError) as e:
        console.print(f"[red]❌ {type(e).__name__}: {e}[/red]")
        return 2
    except Exception as e:
        logger.debug("command failed", exc_info=True)
        console.print(f"[red]❌ {type(e).__name__}: {e}[/red]")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
