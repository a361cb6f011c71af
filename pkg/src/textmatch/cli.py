"""Command-line entry point: train, eval, predict, benchmark, occlusion,
attention, ablation and robustness drivers.

Configuration is layered: flat key=value config file, then TEXTMATCH_*
environment variables, then command-line flags. Unknown keys are rejected
up front. Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import analysis, checkpoint as ckpt
from .data import (
    DATASET_NAMES,
    LoadedData,
    builtin_dataset_spec,
    load_dataset,
    make_batches,
    tokenize,
)
from .model import Occlusion, ModelConfig, TextMatcher
from .training import TrainConfig, ensemble_vote, evaluate, softmax_probs, train

ENV_PREFIX = "TEXTMATCH_"
DATA_ROOT_ENV = "TEXTMATCH_DATA"


class UsageError(Exception):
    pass


_MODEL_KEYS = {f.name: f.type for f in fields(ModelConfig)}
_TRAIN_KEYS = {f.name: f.type for f in fields(TrainConfig)}
_DATA_KEYS = ("dataset", "data_root", "train_file", "dev_file", "test_file",
              "embeddings", "label_map_file", "out_dir")
_INT_KEYS = {"num_blocks", "enc_layers", "hidden_size", "kernel_size", "embed_dim",
             "num_classes", "warmup_steps", "decay_steps", "batch_size", "max_epochs",
             "patience", "seed"}
_FLOAT_KEYS = {"keep_prob", "base_lr", "decay_rate", "clip_threshold"}


class RunConfig:
    """Merged model + training + data options; every run snapshot-serializable."""

    def __init__(self):
        self.values: dict[str, str] = {}

    def set(self, key: str, value) -> None:
        if key not in _MODEL_KEYS and key not in _TRAIN_KEYS and key not in _DATA_KEYS:
            raise UsageError(f"unknown config key {key!r}")
        self.values[key] = str(value)

    def update_from_file(self, path) -> None:
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            key, value = (part.strip() for part in line.split("=", 1))
            self.set(key, value)

    def update_from_env(self, environ=os.environ) -> None:
        if DATA_ROOT_ENV in environ:
            self.values["data_root"] = environ[DATA_ROOT_ENV]
        for key, value in environ.items():
            if key.startswith(ENV_PREFIX) and key != DATA_ROOT_ENV:
                name = key[len(ENV_PREFIX):].lower()
                if name in _MODEL_KEYS or name in _TRAIN_KEYS or name in _DATA_KEYS:
                    self.values[name] = value

    def get(self, key: str, default=None) -> str | None:
        return self.values.get(key, default)

    def _typed(self, key: str, value: str):
        try:
            if key in _INT_KEYS:
                return int(value)
            if key in _FLOAT_KEYS:
                return float(value)
        except ValueError as exc:
            raise UsageError(f"config key {key}: {exc}") from exc
        return value

    def model_config(self) -> ModelConfig:
        kwargs = {k: self._typed(k, v) for k, v in self.values.items() if k in _MODEL_KEYS}
        cfg = ModelConfig(**kwargs)
        try:
            cfg.validate()
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        return cfg

    def train_config(self) -> TrainConfig:
        kwargs = {k: self._typed(k, v) for k, v in self.values.items() if k in _TRAIN_KEYS}
        cfg = TrainConfig(**kwargs)
        try:
            cfg.validate()
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        return cfg

    def to_flat(self) -> dict:
        return dict(sorted(self.values.items()))

    def snapshot(self, path) -> None:
        lines = [f"{k}={v}" for k, v in self.to_flat().items()]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _split_path(cfg: RunConfig, split: str) -> str:
    explicit = cfg.get(f"{split}_file")
    if explicit:
        return explicit
    root, dataset = cfg.get("data_root"), cfg.get("dataset")
    if not root or not dataset:
        raise UsageError(f"missing config key {split}_file (or data_root + dataset)")
    for ext in ("tsv", "txt", "jsonl"):
        candidate = Path(root) / dataset / f"{split}.{ext}"
        if candidate.exists():
            return str(candidate)
    raise UsageError(f"no {split} split found under {Path(root) / dataset}")


def _load_data(cfg: RunConfig, need_test: bool = False) -> LoadedData:
    dataset = cfg.get("dataset")
    if not dataset:
        raise UsageError("missing config key dataset")
    if dataset not in DATASET_NAMES:
        raise UsageError(f"dataset must be one of {DATASET_NAMES}, got {dataset!r}")
    spec = builtin_dataset_spec(dataset, cfg.get("label_map_file"))
    model_cfg = cfg.model_config()
    test_path = None
    if need_test or cfg.get("test_file"):
        try:
            test_path = _split_path(cfg, "test")
        except UsageError:
            if need_test:
                raise
    return load_dataset(
        spec,
        _split_path(cfg, "train"),
        _split_path(cfg, "dev"),
        test_path,
        embedding_path=cfg.get("embeddings"),
        embed_dim=model_cfg.embed_dim,
        embed_seed=int(cfg.get("seed", "0")),
    )


def _apply_flag_overrides(cfg: RunConfig, args) -> None:
    if args.config:
        cfg.update_from_file(args.config)
    cfg.update_from_env()
    for key in ("dataset", "data_root", "train_file", "dev_file", "test_file",
                "embeddings", "out_dir"):
        value = getattr(args, key.replace("-", "_"), None)
        if value is not None:
            cfg.set(key, value)
    if getattr(args, "seed", None) is not None:
        cfg.set("seed", args.seed)
    if getattr(args, "blocks", None) is not None:
        cfg.set("num_blocks", args.blocks)
    if getattr(args, "enc_layers", None) is not None:
        cfg.set("enc_layers", args.enc_layers)
    for item in getattr(args, "variant", None) or []:
        if "=" not in item:
            raise UsageError(f"--variant expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        cfg.set(key.strip(), value.strip())


def _run_dir(cfg: RunConfig) -> Path:
    base = Path(cfg.get("out_dir", "runs"))
    seed = cfg.get("seed", "0")
    stamp = time.strftime("%Y%m%d-%H%M%S")
    path = base / f"{stamp}-seed{seed}"
    suffix = 0
    while path.exists():
        suffix += 1
        path = base / f"{stamp}-seed{seed}-{suffix}"
    path.mkdir(parents=True)
    return path


def _spec_num_classes(cfg: RunConfig) -> None:
    dataset = cfg.get("dataset")
    if dataset and "num_classes" not in cfg.values:
        cfg.set("num_classes", builtin_dataset_spec(dataset, cfg.get("label_map_file")).num_classes)


def _load_model(checkpoint_path):
    if not Path(checkpoint_path).exists():
        raise UsageError(f"checkpoint not found: {checkpoint_path}")
    config, arrays = ckpt.load_checkpoint(checkpoint_path)
    run = RunConfig()
    for key, value in config.get("run", {}).items():
        run.values[key] = str(value)
    model_cfg = ModelConfig.from_dict(config["model"])
    data = _load_data(run) if run.get("dataset") else None
    if data is None:
        raise UsageError("checkpoint lacks dataset paths; pass them via config/flags")
    model = TextMatcher(model_cfg, data.embeddings, seed=int(run.get("seed", "0")))
    model.load_state_arrays(arrays)
    return model, data, run


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = RunConfig()
    _apply_flag_overrides(cfg, args)
    _spec_num_classes(cfg)
    data = _load_data(cfg)
    model_cfg = cfg.model_config()
    if model_cfg.num_classes != data.spec.num_classes:
        raise UsageError(f"num_classes {model_cfg.num_classes} does not match "
                         f"dataset {data.spec.name} ({data.spec.num_classes})")
    tcfg = cfg.train_config()
    if data.spec.ranking and tcfg.early_stop_metric == "accuracy":
        tcfg.early_stop_metric = "mrr"
    run_dir = _run_dir(cfg)
    cfg.snapshot(run_dir / "config.txt")
    model = TextMatcher(model_cfg, data.embeddings, seed=tcfg.seed)
    result = train(model, data.train, data.dev, data.vocab, tcfg,
                   out_dir=run_dir, run_config={"model": model_cfg.to_dict(),
                                                "train": tcfg.to_dict(),
                                                "run": cfg.to_flat()},
                   log=print)
    print(f"best dev {tcfg.early_stop_metric} {result.best_metric:.4f} "
          f"(epoch {result.best_epoch}, {result.steps} steps)")
    print(f"artifacts in {run_dir}")
    return 0


def cmd_eval(args) -> int:
    model, data, run = _load_model(args.checkpoint)
    split = {"train": data.train, "dev": data.dev, "test": data.test}[args.split]
    if not split:
        raise UsageError(f"split {args.split!r} is empty for this run")
    batches = make_batches(split, data.vocab, int(run.get("batch_size", "64")))
    scores = evaluate(model, batches, data.spec.metric)
    out_rows = []
    if data.spec.metric == "map_mrr":
        print(f"MAP {scores['map']:.4f}")
        print(f"MRR {scores['mrr']:.4f}")
        out_rows = [("map", scores["map"]), ("mrr", scores["mrr"])]
    else:
        print(f"accuracy {scores['accuracy']:.4f}")
        out_rows = [("accuracy", scores["accuracy"])]
    out = Path(args.out or f"eval_{args.split}.csv")
    with open(out, "w") as fh:
        fh.write("metric,value\n")
        for name, value in out_rows:
            fh.write(f"{name},{value:.6f}\n")
    return 0


def cmd_predict(args) -> int:
    model, data, _ = _load_model(args.checkpoint)
    tokens_a, tokens_b = tokenize(args.seq_a), tokenize(args.seq_b)
    if not tokens_a or not tokens_b:
        raise UsageError("input reduced to zero tokens after tokenization")
    ids_a = data.vocab.encode(tokens_a)[None, :]
    ids_b = data.vocab.encode(tokens_b)[None, :]
    logits = model.forward(ids_a, ids_b, np.ones_like(ids_a, bool), np.ones_like(ids_b, bool))
    probs = softmax_probs(logits.data)[0]
    label = int(probs.argmax())
    print(f"label {label}")
    print("probabilities " + " ".join(f"{p:.4f}" for p in probs))
    return 0


def cmd_benchmark(args) -> int:
    if args.checkpoint:
        model, _, _ = _load_model(args.checkpoint)
    else:
        cfg = RunConfig()
        _apply_flag_overrides(cfg, args)
        model_cfg = cfg.model_config()
        rng = np.random.default_rng(int(cfg.get("seed", "0")))
        table = rng.normal(0, 1, size=(args.vocab_size, model_cfg.embed_dim)).astype(np.float32)
        table[0] = 0
        model = TextMatcher(model_cfg, table, seed=int(cfg.get("seed", "0")))
    report = analysis.benchmark_inference(model, args.batch_size, args.seq_len,
                                          args.num_batches, args.warmup)
    print(f"{report.mean_seconds:.4f} +/- {report.std_seconds:.4f} s/batch "
          f"(batch {report.batch_size}, len {report.seq_len}, {report.num_batches} batches)")
    analysis.write_benchmark_csv(args.out or "benchmark.csv", report)
    return 0


def cmd_occlusion(args) -> int:
    model, data, run = _load_model(args.checkpoint)
    if args.feature == "residual" and model.config.num_blocks == 1:
        raise UsageError("residual features do not exist in a 1-block model")
    split = data.dev or data.train
    batches = make_batches(split, data.vocab, int(run.get("batch_size", "64")))
    specs = ([Occlusion(args.block, args.feature)] if args.block else
             [Occlusion(n, args.feature) for n in range(1, model.config.num_blocks + 1)])
    results = [analysis.occlusion_run(model, batches, s) for s in specs]
    for r in results:
        flag = "" if r.applicable else " (not applicable)"
        deltas = " ".join(f"{cls}:{d:+.4f}" for cls, d in sorted(r.deltas.items()))
        print(f"block {r.spec.block} {r.spec.feature}{flag}: {deltas}")
    analysis.write_occlusion_csv(args.out or "occlusion.csv", results)
    return 0


def cmd_attention(args) -> int:
    model, data, _ = _load_model(args.checkpoint)
    tokens_a, tokens_b = tokenize(args.seq_a), tokenize(args.seq_b)
    if not tokens_a or not tokens_b:
        raise UsageError("input reduced to zero tokens after tokenization")
    matrices = analysis.export_attention(model, tokens_a, tokens_b, data.vocab)
    paths = analysis.write_attention_outputs(args.out or "attention", matrices, tokens_a, tokens_b)
    print(f"wrote {len(paths)} attention matrices to {Path(paths[0]).parent}")
    return 0


def _sweep_setup(args):
    cfg = RunConfig()
    _apply_flag_overrides(cfg, args)
    _spec_num_classes(cfg)
    data = _load_data(cfg)
    tcfg = cfg.train_config()
    if data.spec.ranking and tcfg.early_stop_metric == "accuracy":
        tcfg.early_stop_metric = "mrr"
    return cfg, data, tcfg


def cmd_ablation(args) -> int:
    cfg, data, tcfg = _sweep_setup(args)
    seeds = tuple(range(tcfg.seed, tcfg.seed + args.num_seeds))
    rows = analysis.ablation_matrix(cfg.model_config(), data, tcfg, seeds)
    for row in rows:
        print(f"{row['variant']:>18}: {row['dev_metric']:.4f} ({row['params']} params)")
    analysis.write_table_csv(args.out or "ablation.csv", rows)
    return 0


def cmd_robustness(args) -> int:
    cfg, data, tcfg = _sweep_setup(args)
    seeds = tuple(range(tcfg.seed, tcfg.seed + args.num_seeds))
    rows = analysis.robustness_sweep(cfg.model_config(), data, tcfg, seeds)
    for row in rows:
        print(f"{row['axis']}={row['value']}: {row['mean']:.4f} +/- {row['std']:.4f}")
    analysis.write_table_csv(args.out or "robustness.csv", rows)
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(p):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--seed", type=int, help="master seed for all randomness")
    p.add_argument("--dataset", choices=DATASET_NAMES)
    p.add_argument("--data-root", dest="data_root")
    p.add_argument("--train-file", dest="train_file")
    p.add_argument("--dev-file", dest="dev_file")
    p.add_argument("--test-file", dest="test_file")
    p.add_argument("--embeddings", help="pretrained word-vector file")
    p.add_argument("--blocks", type=int, help="number of stacked blocks")
    p.add_argument("--enc-layers", dest="enc_layers", type=int)
    p.add_argument("--variant", action="append", metavar="KEY=VALUE",
                   help="set any config key, e.g. fusion_variant=simple")
    p.add_argument("--out-dir", dest="out_dir")


def build_parser() -> _Parser:
    parser = _Parser(prog="textmatch", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model, saving checkpoint + history")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "dev", "test"), default="dev")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="classify one pair of sentences")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seq-a", required=True)
    p.add_argument("--seq-b", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("benchmark", help="CPU inference latency on synthetic batches")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--seq-len", type=int, default=20)
    p.add_argument("--num-batches", type=int, default=100)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--vocab-size", type=int, default=5000)
    p.add_argument("--out")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("occlusion", help="accuracy deltas when masking feature groups")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--feature", choices=("embedding", "residual", "encoder_output"), required=True)
    p.add_argument("--block", type=int, help="single block index; default sweeps all")
    p.add_argument("--out")
    p.set_defaults(func=cmd_occlusion)

    p = sub.add_parser("attention", help="export per-block attention matrices")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seq-a", required=True)
    p.add_argument("--seq-b", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_attention)

    p = sub.add_parser("ablation", help="train and score the ablation variants")
    _add_common(p)
    p.add_argument("--num-seeds", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablation)

    p = sub.add_parser("robustness", help="sweep block and encoder-layer counts")
    _add_common(p)
    p.add_argument("--num-seeds", type=int, default=2)
    p.add_argument("--out")
    p.set_defaults(func=cmd_robustness)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (KeyboardInterrupt, SystemExit):
        raise
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
