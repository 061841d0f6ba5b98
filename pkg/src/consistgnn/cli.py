"""Command-line entry point.

    consistgnn synth   --config run.json --out data/
    consistgnn train   --config run.json --out runs/a --seed 3
    consistgnn eval    --config run.json --out runs/a --views 4
    consistgnn grid    --config run.json --out runs/g --models 3 --views 3
    consistgnn analyze --config run.json --out runs/a
    consistgnn sweep   --config run.json --out runs/s --label-keep 0.1

Every command writes ``run.json`` with the fully resolved configuration.  On
failure a file named ``INCOMPLETE`` holding the error is left in the output
directory and the exit status is non-zero.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
from pydantic import (BaseModel, ConfigDict, Field, ValidationError, ValidationInfo,
                      field_validator, model_validator)

from . import engine
from .errors import ConfigError
from .graphstore import Dataset, generate_sbm, load_dataset, save_dataset, subsample_labels
from .losses import ConsistencyConfig
from .models import ModelConfig, load_checkpoint, save_checkpoint
from .sampler import ALL, substream

log = logging.getLogger("consistgnn")

COMMANDS = ("synth", "train", "eval", "grid", "analyze", "sweep")
CHECKPOINT_NAME = "checkpoint.gnnp"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DatasetPaths(_Section):
    edges: str
    features: str
    labels: str
    split: str
    num_classes: Optional[int] = Field(default=None, ge=1)

    @field_validator("edges", "features", "labels", "split")
    @classmethod
    def _exists(cls, value: str, info: ValidationInfo) -> str:
        base = Path((info.context or {}).get("base_dir", "."))
        path = Path(value) if Path(value).is_absolute() else base / value
        if not path.is_file():
            raise ValueError(f"file not found: {path}")
        return str(path)


class SynthSpec(_Section):
    blocks: int = Field(default=5, ge=1)
    nodes_per_block: int = Field(default=200, ge=1)
    p_in: float = Field(default=0.05, ge=0.0, le=1.0)
    p_out: float = Field(default=0.005, ge=0.0, le=1.0)
    feature_dim: int = Field(default=16, ge=1)
    feature_noise: float = Field(default=0.65, ge=0.0)
    seed: int = Field(default=0, ge=0)


class ModelSection(_Section):
    arch: Literal["gcn", "gat"] = "gcn"
    num_layers: int = Field(default=2, ge=1)
    hidden_dim: int = Field(default=32, ge=1)
    heads: Union[int, list[int]] = 1
    dropout_rate: float = Field(default=0.0, ge=0.0, lt=1.0)
    leaky_slope: float = 0.2


class ConsistencySection(_Section):
    alpha: float = Field(ge=0.0)
    temperature: float = Field(default=0.4, gt=0.0, le=1.0)
    num_views: int = Field(default=2, ge=2)
    detach_teacher: bool = True
    swap_kl: bool = False


class TrainSection(_Section):
    mode: Literal["transductive", "inductive"] = "transductive"
    fanouts: list[Union[int, Literal["all"]]] = [5, 5]
    batch_size_labeled: int = Field(default=32, ge=1)
    batch_size_unlabeled: Optional[int] = Field(default=None, ge=1)
    epochs: int = Field(default=50, ge=1)
    learning_rate: float = Field(default=5e-3, gt=0.0)
    adam_beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    adam_beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(default=1e-8, gt=0.0)
    weight_decay: float = Field(default=0.0, ge=0.0)
    small_graph_mode: bool = False
    node_drop_rate: float = Field(default=0.1, ge=0.0, lt=1.0)
    use_tsa: bool = True
    eval_views: int = Field(default=1, ge=1)
    record_wall_time: bool = False

    @field_validator("fanouts")
    @classmethod
    def _fanouts(cls, value):
        if not value:
            raise ValueError("at least one fanout is required")
        if any(f != "all" and f < 1 for f in value):
            raise ValueError("fanouts must be >= 1 or 'all'")
        return value


class EnsembleSection(_Section):
    num_models: int = Field(default=1, ge=1)
    num_views: int = Field(default=1, ge=1)
    seeds: Optional[list[int]] = None
    repeats: int = Field(default=1, ge=1)


class RunConfig(_Section):
    dataset: Optional[DatasetPaths] = None
    synth: Optional[SynthSpec] = None
    model: ModelSection = ModelSection()
    train: TrainSection = TrainSection()
    consistency: Optional[ConsistencySection] = None
    ensemble: EnsembleSection = EnsembleSection()
    output_dir: str = "out"
    label_keep_fraction: float = Field(default=1.0, gt=0.0, le=1.0)
    seed: int = Field(default=0, ge=0, le=2**64 - 1)

    @model_validator(mode="after")
    def _one_source(self):
        if (self.dataset is None) == (self.synth is None):
            raise ValueError("exactly one of 'dataset' or 'synth' must be given")
        if len(self.train.fanouts) != self.model.num_layers:
            raise ValueError("train.fanouts must have one entry per model layer")
        return self

    # -- conversions ------------------------------------------------------

    def build_model_config(self, num_classes: int) -> ModelConfig:
        m = self.model
        heads = m.heads if isinstance(m.heads, int) else tuple(m.heads)
        return ModelConfig(m.arch, m.num_layers, m.hidden_dim, num_classes, heads,
                           m.dropout_rate, m.leaky_slope)

    def build_train_config(self, run_id: str = "run") -> engine.TrainConfig:
        t = self.train
        consistency = None
        if self.consistency is not None:
            consistency = ConsistencyConfig(**self.consistency.model_dump())
        fields = t.model_dump()
        fields["fanouts"] = tuple(ALL if f == "all" else f for f in t.fanouts)
        return engine.TrainConfig(**fields, seed=self.seed, consistency=consistency, run_id=run_id)

    def build_ensemble_config(self) -> engine.EnsembleConfig:
        e = self.ensemble
        return engine.EnsembleConfig(e.num_models, e.num_views,
                                     tuple(e.seeds) if e.seeds is not None else None, e.repeats)


def _format_loc(loc) -> str:
    return ".".join(str(p) for p in loc if not str(p).startswith("function-"))


def parse_and_validate(config_text: str, base_dir=None) -> RunConfig:
    """Parse JSON config text into a validated :class:`RunConfig` with defaults filled.

    Raises :class:`ConfigError` naming the dotted path of every offending key.
    """
    try:
        raw = json.loads(config_text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    try:
        return RunConfig.model_validate(raw, context={"base_dir": base_dir or "."})
    except ValidationError as exc:
        msgs = []
        for err in exc.errors():
            path = _format_loc(err["loc"]) or "<root>"
            msgs.append(f"{path}: {err['msg']}")
        raise ConfigError("; ".join(msgs)) from None


# ---------------------------------------------------------------------------
# commands


def load_run_dataset(cfg: RunConfig) -> Dataset:
    if cfg.synth is not None:
        s = cfg.synth
        ds = generate_sbm(s.blocks, s.nodes_per_block, s.p_in, s.p_out, s.feature_dim,
                          s.feature_noise, s.seed)
    else:
        d = cfg.dataset
        ds = load_dataset(d.edges, d.features, d.labels, d.split, d.num_classes)
    return subsample_labels(ds, cfg.label_keep_fraction, substream(cfg.seed, "labels"))


def _cmd_synth(cfg: RunConfig, out: Path, args) -> None:
    if cfg.synth is None:
        raise ConfigError("synth: the config needs a 'synth' section")
    s = cfg.synth
    ds = generate_sbm(s.blocks, s.nodes_per_block, s.p_in, s.p_out, s.feature_dim,
                      s.feature_noise, s.seed)
    save_dataset(out, ds)


def _cmd_train(cfg: RunConfig, out: Path, args) -> None:
    ds = load_run_dataset(cfg)
    params, records = engine.train(ds, cfg.build_model_config(ds.num_classes),
                                   cfg.build_train_config(run_id=out.name))
    save_checkpoint(out / CHECKPOINT_NAME, params)
    engine.write_metrics_jsonl(out / "metrics.jsonl", records)
    log.info("final val accuracy %.4f", records[-1].accuracy)


def _load_trained(cfg: RunConfig, out: Path):
    path = out / CHECKPOINT_NAME
    if not path.is_file():
        raise FileNotFoundError(f"{path} not found; run 'train' with the same --out first")
    m = cfg.model
    return load_checkpoint(path, leaky_slope=m.leaky_slope, dropout_rate=m.dropout_rate)


def _cmd_eval(cfg: RunConfig, out: Path, args) -> None:
    ds = load_run_dataset(cfg)
    params = _load_trained(cfg, out)
    views = args.views or cfg.train.eval_views
    fanouts = cfg.build_train_config().eval_fanouts()
    result = {"views": views, "seed": cfg.seed}
    for split in ("val", "test"):
        nodes = getattr(ds.split, split)
        result[f"{split}_accuracy"] = engine.evaluate(params, ds, nodes, fanouts, views, cfg.seed)
    (out / "eval.json").write_text(json.dumps(result, indent=2) + "\n")
    log.info("eval %s", result)


def _cmd_grid(cfg: RunConfig, out: Path, args) -> None:
    ds = load_run_dataset(cfg)
    ens = cfg.build_ensemble_config()
    num_models = args.models or ens.num_models
    num_views = args.views or ens.num_views
    seeds = ens.model_seeds(cfg.seed) if args.models is None else tuple(
        cfg.seed + i for i in range(num_models))
    tc = cfg.build_train_config(run_id=out.name)
    models = engine.train_ensemble(ds, cfg.build_model_config(ds.num_classes), tc, seeds)
    rows = engine.grid_table(models, ds, ds.split.test, tc.eval_fanouts(), num_views,
                             cfg.seed, ens.repeats)
    engine.write_grid_csv(out / "grid.csv", rows)


def _cmd_analyze(cfg: RunConfig, out: Path, args) -> None:
    ds = load_run_dataset(cfg)
    params = _load_trained(cfg, out)
    views = args.views or cfg.train.eval_views
    probs = engine.self_ensemble_predict(params, ds, ds.split.test,
                                         cfg.build_train_config().eval_fanouts(), views, cfg.seed)
    buckets = engine.accuracy_by_distance(ds, probs)
    with open(out / "distance.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["distance", "count", "accuracy"])
        for b in buckets:
            writer.writerow(["inf" if np.isinf(b.distance) else int(b.distance), b.count,
                             b.accuracy])


def _cmd_sweep(cfg: RunConfig, out: Path, args) -> None:
    ds = load_run_dataset(cfg)
    best, results = engine.sweep_alpha(ds, cfg.build_model_config(ds.num_classes),
                                       cfg.build_train_config(run_id=out.name))
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["alpha", "val_accuracy"])
        for r in results:
            writer.writerow([r.alpha, r.val_accuracy])
    (out / "sweep.json").write_text(json.dumps({"best_alpha": best}) + "\n")
    log.info("best alpha %s", best)


_HANDLERS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "grid": _cmd_grid,
    "analyze": _cmd_analyze,
    "sweep": _cmd_sweep,
}


def dispatch(command: str, cfg: RunConfig, args=None) -> int:
    """Run one command; returns the process exit status."""
    if command not in _HANDLERS:
        raise ConfigError(f"unknown command {command!r}")
    args = args or argparse.Namespace(views=None, models=None)
    out = Path(cfg.output_dir)
    marker = out / "INCOMPLETE"
    try:
        out.mkdir(parents=True, exist_ok=True)
        marker.write_text(f"{command} started\n")
        resolved = {"command": command, **cfg.model_dump(mode="json")}
        (out / "run.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
        _HANDLERS[command](cfg, out, args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        _flag(marker, exc)
        return 2
    except Exception as exc:  # noqa: BLE001 - any failure must become an exit status
        log.error("%s failed: %s", command, exc)
        _flag(marker, exc)
        return 1
    marker.unlink()
    return 0


def _flag(marker: Path, exc: Exception) -> None:
    try:
        marker.write_text(f"{type(exc).__name__}: {exc}\n")
    except OSError:
        pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="consistgnn", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="path to the JSON run config")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", help="output directory (overrides output_dir)")
    parser.add_argument("--views", type=int, help="number of sampled views (eval/grid/analyze)")
    parser.add_argument("--models", type=int, help="number of models (grid)")
    parser.add_argument("--label-keep", type=float, dest="label_keep",
                        help="fraction of training labels to keep")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    for flag in ("views", "models"):
        value = getattr(args, flag)
        if value is not None and value < 1:
            log.error("--%s must be >= 1", flag)
            return 2
    try:
        config_path = Path(args.config)
        raw = json.loads(config_path.read_text(encoding="utf-8"))
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        if args.seed is not None:
            raw["seed"] = args.seed
        if args.out is not None:
            raw["output_dir"] = args.out
        if args.label_keep is not None:
            raw["label_keep_fraction"] = args.label_keep
        cfg = parse_and_validate(json.dumps(raw), base_dir=config_path.parent)
    except (OSError, json.JSONDecodeError, ConfigError) as exc:
        log.error("%s", exc)
        print(f"consistgnn: {exc}", file=sys.stderr)
        return 2
    return dispatch(args.command, cfg, args)


if __name__ == "__main__":
    sys.exit(main())
