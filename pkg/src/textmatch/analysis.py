"""Model-behavior probes: occlusion sensitivity, attention export, CPU
latency benchmarking, and the ablation / robustness sweep drivers.

All outputs are plain CSV (attention additionally as a text grid) so any
external plotter can pick them up.
"""

from __future__ import annotations

import copy
import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .data import Batch, LoadedData, make_batches
from .model import Occlusion, TextMatcher
from .training import TrainConfig, evaluate, predict_probs, train


# ---------------------------------------------------------------------------
# occlusion sensitivity
# ---------------------------------------------------------------------------


@dataclass
class OcclusionResult:
    spec: Occlusion
    applicable: bool
    baseline: dict[int, float]          # class -> baseline accuracy
    deltas: dict[int, float]            # class -> accuracy change under masking


def _per_class_accuracy(predictions, labels) -> dict[int, float]:
    out = {}
    for cls in np.unique(labels):
        sel = labels == cls
        out[int(cls)] = float((predictions[sel] == labels[sel]).mean())
    return out


def occlusion_run(model: TextMatcher, batches: list[Batch], spec: Occlusion) -> OcclusionResult:
    """Accuracy change per class when one feature group of one block is zeroed.

    A residual mask in block 1 is a no-op (that feature does not exist
    there); the result is flagged not-applicable and all deltas are zero.
    """
    if spec.block > model.config.num_blocks:
        raise ValueError(f"block {spec.block} exceeds num_blocks {model.config.num_blocks}")
    applicable = spec.feature in model.config.feature_slices(spec.block)
    labels = np.concatenate([b.labels for b in batches])
    base_pred = predict_probs(model, batches).argmax(axis=-1)
    baseline = _per_class_accuracy(base_pred, labels)
    masked_chunks = [
        model.forward_batch(b, training=False, occlusion=spec).data for b in batches
    ]
    masked_pred = np.concatenate(masked_chunks, axis=0).argmax(axis=-1)
    masked = _per_class_accuracy(masked_pred, labels)
    deltas = {cls: masked[cls] - baseline[cls] for cls in baseline}
    return OcclusionResult(spec, applicable, baseline, deltas)


def write_occlusion_csv(path, results: list[OcclusionResult], class_names=None) -> None:
    classes = sorted({cls for r in results for cls in r.deltas})
    names = class_names or {c: str(c) for c in classes}
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["block", "feature", "applicable"] + [f"delta_{names[c]}" for c in classes])
        for r in results:
            writer.writerow([r.spec.block, r.spec.feature, int(r.applicable)]
                            + [f"{r.deltas.get(c, 0.0):.6f}" for c in classes])


# ---------------------------------------------------------------------------
# attention export
# ---------------------------------------------------------------------------


def export_attention(model: TextMatcher, tokens_a, tokens_b, vocab) -> list[np.ndarray]:
    """Row-normalized attention over valid positions, one matrix per block."""
    ids_a = vocab.encode(tokens_a)[None, :]
    ids_b = vocab.encode(tokens_b)[None, :]
    mask = np.ones_like(ids_a, dtype=bool), np.ones_like(ids_b, dtype=bool)
    _, trace = model.forward(ids_a, ids_b, mask[0], mask[1], training=False, trace=True)
    return [blk.attn_a2b[0] for blk in trace.blocks]


def write_attention_outputs(out_dir, matrices, tokens_a, tokens_b) -> list[str]:
    """One CSV and one plain text grid per block; returns the CSV paths."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for n, mat in enumerate(matrices, start=1):
        csv_path = out / f"attention_block{n}.csv"
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([""] + list(tokens_b))
            for tok, row in zip(tokens_a, mat):
                writer.writerow([tok] + [f"{v:.6f}" for v in row])
        grid_path = out / f"attention_block{n}.txt"
        with open(grid_path, "w") as fh:
            fh.write("\t".join([""] + list(tokens_b)) + "\n")
            for tok, row in zip(tokens_a, mat):
                fh.write("\t".join([tok] + [f"{v:.4f}" for v in row]) + "\n")
        paths.append(str(csv_path))
    return paths


# ---------------------------------------------------------------------------
# inference benchmark
# ---------------------------------------------------------------------------


@dataclass
class BenchmarkReport:
    mean_seconds: float
    std_seconds: float
    batch_size: int
    seq_len: int
    num_batches: int


def benchmark_inference(model: TextMatcher, batch_size: int = 8, seq_len: int = 20,
                        num_batches: int = 100, warmup: int = 10, seed: int = 0) -> BenchmarkReport:
    """Wall-clock seconds per eval-mode batch on synthetic token streams.

    Batches are built up front so timing covers the forward pass only;
    warmup batches run first and are not timed.
    """
    vocab_size = model.embeddings.shape[0]
    rng = np.random.default_rng(seed)
    low = 1 if vocab_size > 1 else 0
    batches = [
        (rng.integers(low, vocab_size, size=(batch_size, seq_len)),
         rng.integers(low, vocab_size, size=(batch_size, seq_len)))
        for _ in range(warmup + num_batches)
    ]
    mask = np.ones((batch_size, seq_len), dtype=bool)
    for ids_a, ids_b in batches[:warmup]:
        model.forward(ids_a, ids_b, mask, mask, training=False)
    times = []
    for ids_a, ids_b in batches[warmup:]:
        t0 = time.perf_counter()
        model.forward(ids_a, ids_b, mask, mask, training=False)
        times.append(time.perf_counter() - t0)
    times = np.asarray(times)
    return BenchmarkReport(float(times.mean()), float(times.std()), batch_size, seq_len, num_batches)


def write_benchmark_csv(path, report: BenchmarkReport) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mean_seconds", "std_seconds", "batch_size", "seq_len", "num_batches"])
        writer.writerow([f"{report.mean_seconds:.6f}", f"{report.std_seconds:.6f}",
                         report.batch_size, report.seq_len, report.num_batches])


# ---------------------------------------------------------------------------
# ablation matrix and robustness sweeps
# ---------------------------------------------------------------------------

ABLATION_VARIANTS = (
    "no_enc_in",
    "vanilla_residual",
    "simple_fusion",
    "alignment_flip",
    "prediction_flip",
    "parallel_blocks",
)


def ablation_config(base, variant: str):
    """Config for one ablation row; flips flip relative to the base choice."""
    cfg = copy.deepcopy(base)
    if variant == "no_enc_in":
        cfg.connection_variant = "none"
    elif variant == "vanilla_residual":
        cfg.connection_variant = "vanilla_residual"
    elif variant == "simple_fusion":
        cfg.fusion_variant = "simple"
    elif variant == "alignment_flip":
        cfg.alignment_projection = "identity" if base.alignment_projection == "feedforward" else "feedforward"
    elif variant == "prediction_flip":
        cfg.prediction_variant = "simplified" if base.prediction_variant != "simplified" else "standard"
    elif variant == "parallel_blocks":
        cfg.block_topology = "parallel"
    else:
        raise ValueError(f"unknown ablation variant {variant!r}")
    return cfg


def _train_and_score(config, data: LoadedData, tcfg: TrainConfig, seed: int) -> float:
    model = TextMatcher(config, data.embeddings, seed=seed)
    cfg = copy.deepcopy(tcfg)
    cfg.seed = seed
    result = train(model, data.train, data.dev, data.vocab, cfg)
    return result.best_metric


def ablation_matrix(base_config, data: LoadedData, tcfg: TrainConfig, seeds=(0,)) -> list[dict]:
    """Dev metric for the base model and each of the six ablation rows.

    Every row shares the same seed list so comparisons are like for like.
    Ingested data is passed in, not reloaded per row.
    """
    rows = []
    for name in ("original",) + ABLATION_VARIANTS:
        cfg = base_config if name == "original" else ablation_config(base_config, name)
        scores = [_train_and_score(cfg, data, tcfg, s) for s in seeds]
        rows.append({"variant": name, "dev_metric": float(np.mean(scores)),
                     "std": float(np.std(scores)), "params": TextMatcher(cfg, data.embeddings).count_params()})
    return rows


def robustness_sweep(base_config, data: LoadedData, tcfg: TrainConfig, seeds=(0, 1),
                     sweep_range=range(1, 6), fixed_blocks: int = 2, fixed_layers: int = 2) -> list[dict]:
    """Two sweeps: block count with fixed encoder depth, and the reverse.

    Ten cells by default; each reports mean and std over the seed list.
    """
    cells = []
    for blocks in sweep_range:
        cfg = copy.deepcopy(base_config)
        cfg.num_blocks, cfg.enc_layers = blocks, fixed_layers
        cells.append(("blocks", blocks, cfg))
    for layers in sweep_range:
        cfg = copy.deepcopy(base_config)
        cfg.num_blocks, cfg.enc_layers = fixed_blocks, layers
        cells.append(("enc_layers", layers, cfg))
    rows = []
    for axis, value, cfg in cells:
        scores = [_train_and_score(cfg, data, tcfg, s) for s in seeds]
        rows.append({"axis": axis, "value": value,
                     "mean": float(np.mean(scores)), "std": float(np.std(scores))})
    return rows


def write_table_csv(path, rows: list[dict]) -> None:
    if not rows:
        raise ValueError("nothing to write")
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
