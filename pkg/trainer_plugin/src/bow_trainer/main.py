"""Trainer protocol entry point.

Invoked as ``bow-trainer <manifest.json>``. The manifest names a pool
manifest, the dataset JSONL, hyperparams, a seed and an output path; this
trainer fits a bag-of-words classifier on the pool with labels synthesized
from keyword presence, evaluates on a held-out set, and writes
``{"metrics": {"accuracy", "macro_f1"}, "trained_samples", "wall_time_s"}``
to the output path.

Hyperparams:
  label_rule     {keyword: class} - first matching keyword (in sorted
                 keyword order) labels the sample
  default_class  class for samples matching no keyword (default "other")
  eval_set       path to a held-out JSONL file, labeled by the same rule;
                 must be disjoint from the training pool
  epochs         training epochs (default 5)
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass
from pathlib import Path

from .classifier import BowPerceptron, accuracy, macro_f1, tokenize


class PluginError(Exception):
    pass


@dataclass(frozen=True)
class PluginConfig:
    label_rule: dict[str, str]
    eval_set: str
    epochs: int
    seed: int
    default_class: str = "other"

    def __post_init__(self):
        classes = set(self.label_rule.values()) | {self.default_class}
        if len(classes) < 2:
            raise PluginError("label rule must define at least 2 classes")
        if self.epochs < 1:
            raise PluginError("epochs must be >= 1")

    @property
    def classes(self) -> list[str]:
        return sorted(set(self.label_rule.values()) | {self.default_class})

    def label(self, tokens: list[str]) -> str:
        present = set(tokens)
        for keyword in sorted(self.label_rule):
            if keyword in present:
                return self.label_rule[keyword]
        return self.default_class


def read_jsonl(path: Path) -> list[dict]:
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise PluginError(f"cannot read {path}: {exc}") from exc
    records = []
    for lineno, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise PluginError(f"{path}:{lineno + 1}: invalid JSON: {exc}") from exc
    return records


def load_pool_samples(manifest_path: Path, dataset_path: Path) -> list[dict]:
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise PluginError(f"cannot read pool manifest {manifest_path}: {exc}") from exc
    ids_file = manifest_path.parent / manifest["sample_ids_file"]
    try:
        wanted = [line for line in ids_file.read_text(encoding="utf-8").splitlines() if line]
    except OSError as exc:
        raise PluginError(f"cannot read id list {ids_file}: {exc}") from exc
    by_id = {record["id"]: record for record in read_jsonl(dataset_path)}
    missing = [sid for sid in wanted if sid not in by_id]
    if missing:
        raise PluginError(f"pool references {len(missing)} ids missing from the dataset")
    return [by_id[sid] for sid in wanted]


def run_manifest(manifest_path: Path) -> dict:
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise PluginError(f"cannot read manifest {manifest_path}: {exc}") from exc
    for key in ("pool_manifest", "dataset", "output"):
        if key not in manifest:
            raise PluginError(f"manifest lacks required key {key!r}")
    hyper = manifest.get("hyperparams") or {}
    if "label_rule" not in hyper or "eval_set" not in hyper:
        raise PluginError("hyperparams must provide label_rule and eval_set")
    config = PluginConfig(
        label_rule=dict(hyper["label_rule"]),
        eval_set=hyper["eval_set"],
        epochs=int(hyper.get("epochs", 5)),
        seed=int(manifest.get("seed", 0)),
        default_class=hyper.get("default_class", "other"),
    )

    pool = load_pool_samples(Path(manifest["pool_manifest"]), Path(manifest["dataset"]))
    if not pool:
        raise PluginError("training pool is empty")
    eval_records = read_jsonl(Path(config.eval_set))
    if not eval_records:
        raise PluginError("evaluation set is empty")
    overlap = {r["id"] for r in pool} & {r["id"] for r in eval_records}
    if overlap:
        raise PluginError(
            f"evaluation set overlaps the training pool ({len(overlap)} shared ids)"
        )

    examples = []
    for record in pool:
        tokens = tokenize(record.get("text", ""))
        examples.append((tokens, config.label(tokens)))
    model = BowPerceptron(config.classes, seed=config.seed, epochs=config.epochs)
    model.train(examples)

    gold, predicted = [], []
    for record in eval_records:
        tokens = tokenize(record.get("text", ""))
        gold.append(config.label(tokens))
        predicted.append(model.predict(tokens))

    return {
        "metrics": {
            "accuracy": accuracy(gold, predicted),
            "macro_f1": macro_f1(gold, predicted, config.classes),
        },
        "trained_samples": len(pool) * config.epochs,
        # reported as 0 so identical runs produce identical bytes
        "wall_time_s": 0.0,
    }


def main(argv: list[str]) -> int:
    if len(argv) != 1:
        print("usage: bow-trainer <manifest.json>", file=sys.stderr)
        return 2
    manifest_path = Path(argv[0])
    try:
        payload = run_manifest(manifest_path)
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        output = Path(manifest["output"])
        output.parent.mkdir(parents=True, exist_ok=True)
        output.write_text(json.dumps(payload, sort_keys=True) + "\n", encoding="utf-8")
    except PluginError as exc:
        print(f"bow-trainer: {exc}", file=sys.stderr)
        return 1
    return 0


def cli() -> None:
    raise SystemExit(main(sys.argv[1:]))
