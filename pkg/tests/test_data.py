"""Tokenization, vocabulary, embeddings, loaders, batching, metrics."""

import json

import numpy as np
import pytest

from textmatch.data import (
    EmbeddingTable,
    Example,
    Vocabulary,
    accuracy,
    build_vocab,
    builtin_dataset_spec,
    load_dataset,
    load_embeddings,
    load_split,
    make_batches,
    map_mrr,
    tokenize,
)


class TestTokenize:
    def test_lowercase_and_punctuation(self):
        assert tokenize("A red car.") == ["a", "red", "car"]

    def test_empty(self):
        assert tokenize("") == []
        assert tokenize("!!! ... ---") == []

    def test_golden_apostrophes(self):
        # pinned behavior: internal apostrophes keep contractions together
        assert tokenize("Don't stop!") == ["don't", "stop"]
        assert tokenize("the cat's 2nd toy, obviously") == ["the", "cat's", "2nd", "toy", "obviously"]

    def test_stable(self):
        text = "It's a dog; it isn't a cat?!"
        assert tokenize(text) == tokenize(text)


class TestVocabulary:
    def test_deterministic_and_reserved_zero(self):
        v1 = Vocabulary(["b", "a", "c", "a"])
        v2 = Vocabulary(["c", "b", "a"])
        assert v1.tokens == v2.tokens
        assert v1.index("a") == v2.index("a") >= 1
        assert v1.index("zzz") == 0
        assert len(v1) == 4  # 3 tokens + reserved 0

    def test_build_vocab_embedding_intersection(self):
        train = [Example(["dog"], ["cat"], 0)]
        dev = [Example(["bird"], ["fish"], 0)]
        vocab = build_vocab(train, train + dev, embedding_tokens={"bird", "horse"})
        assert "dog" in vocab and "cat" in vocab
        assert "bird" in vocab       # in dev and in the embedding file
        assert "fish" not in vocab   # in dev but not in the embedding file
        assert "horse" not in vocab  # in the embedding file but in no split


class TestEmbeddings:
    def test_rows_copied_verbatim(self, tmp_path):
        path = tmp_path / "vecs.txt"
        path.write_text("dog 1.0 2.0 3.0\ncat 4.0 5.0 6.0\n")
        vocab = Vocabulary(["dog", "cat", "bird"])
        table = load_embeddings(path, vocab)
        np.testing.assert_allclose(table.matrix[vocab.index("dog")], [1, 2, 3])
        np.testing.assert_allclose(table.matrix[vocab.index("cat")], [4, 5, 6])

    def test_missing_token_zero_row(self, tmp_path):
        path = tmp_path / "vecs.txt"
        path.write_text("dog 1.0 2.0 3.0\n")
        vocab = Vocabulary(["dog", "bird"])
        table = load_embeddings(path, vocab)
        assert (table.matrix[vocab.index("bird")] == 0).all()
        assert (table.matrix[0] == 0).all()

    def test_dimension_mismatch_errors_with_line(self, tmp_path):
        path = tmp_path / "vecs.txt"
        path.write_text("dog 1.0 2.0 3.0\ncat 4.0 5.0\n")
        with pytest.raises(ValueError, match=":2"):
            load_embeddings(path, Vocabulary(["dog", "cat"]))

    def test_bad_float_errors_with_line(self, tmp_path):
        path = tmp_path / "vecs.txt"
        path.write_text("dog 1.0 oops 3.0\n")
        with pytest.raises(ValueError, match=":1"):
            load_embeddings(path, Vocabulary(["dog"]))

    def test_random_table_row0_zero(self):
        table = EmbeddingTable.random(10, 4, np.random.default_rng(0))
        assert (table.matrix[0] == 0).all()
        assert table.frozen


class TestLoadSplit:
    def test_snli_jsonl_skips_dash(self, tmp_path):
        path = tmp_path / "train.jsonl"
        rows = [
            {"sentence1": "A dog runs.", "sentence2": "An animal moves.", "gold_label": "entailment"},
            {"sentence1": "A dog runs.", "sentence2": "A cat sits.", "gold_label": "-"},
            {"sentence1": "A dog runs.", "sentence2": "A dog sleeps.", "gold_label": "contradiction"},
        ]
        path.write_text("\n".join(json.dumps(r) for r in rows))
        examples = load_split(path, builtin_dataset_spec("snli"))
        assert len(examples) == 2
        assert examples[0].label == 0 and examples[1].label == 2

    def test_snli_tsv_form(self, tmp_path):
        path = tmp_path / "train.tsv"
        path.write_text("A dog runs.\tAn animal moves.\tentailment\n")
        examples = load_split(path, builtin_dataset_spec("snli"))
        assert examples[0].seq_a == ["a", "dog", "runs"]

    def test_scitail_two_classes(self, tmp_path):
        spec = builtin_dataset_spec("scitail")
        assert spec.num_classes == 2
        path = tmp_path / "train.tsv"
        path.write_text("Plants use light.\tPlants need light.\tentails\n"
                        "Plants use light.\tRocks are hard.\tneutral\n")
        examples = load_split(path, spec)
        assert [e.label for e in examples] == [0, 1]

    def test_wikiqa_group_ids(self, tmp_path):
        path = tmp_path / "train.tsv"
        path.write_text("1\twho wrote it\tthe author wrote it\tQ1\n"
                        "0\twho wrote it\tunrelated sentence\tQ1\n")
        examples = load_split(path, builtin_dataset_spec("wikiqa"))
        assert all(e.group_id == "Q1" for e in examples)
        assert [e.label for e in examples] == [1, 0]

    def test_unknown_label_raises(self, tmp_path):
        path = tmp_path / "train.tsv"
        path.write_text("maybe\ta b\tc d\n")
        with pytest.raises(ValueError, match="maybe"):
            load_split(path, builtin_dataset_spec("quora"))

    def test_empty_example_skipped_with_warning(self, tmp_path, caplog):
        path = tmp_path / "train.tsv"
        path.write_text("1\t...\tc d\n1\ta b\tc d\n")
        with caplog.at_level("WARNING"):
            examples = load_split(path, builtin_dataset_spec("quora"))
        assert len(examples) == 1
        assert any("zero tokens" in r.message for r in caplog.records)

    def test_ingestion_is_reproducible(self, tmp_path):
        path = tmp_path / "train.tsv"
        path.write_text("1\ta small dog\ta tiny dog\n0\tthe sky\tan apple\n")
        spec = builtin_dataset_spec("quora")
        one = load_dataset(spec, path, path)
        two = load_dataset(spec, path, path)
        assert one.vocab.tokens == two.vocab.tokens
        np.testing.assert_array_equal(one.embeddings.matrix, two.embeddings.matrix)


class TestBatching:
    def _examples(self):
        return [
            Example(["a", "b", "c"], ["x"], 0),
            Example(["d"] * 7, ["y", "z"], 1),
            Example(["e"], ["w"] * 4, 0),
        ]

    def test_padding_to_batch_max(self):
        examples = self._examples()
        vocab = Vocabulary(t for e in examples for t in e.seq_a + e.seq_b)
        batches = make_batches(examples, vocab, batch_size=3)
        assert batches[0].ids_a.shape == (3, 7)
        assert batches[0].ids_b.shape == (3, 4)

    def test_masks_sum_to_lengths(self):
        examples = self._examples()
        vocab = Vocabulary(t for e in examples for t in e.seq_a + e.seq_b)
        batch = make_batches(examples, vocab, batch_size=3)[0]
        np.testing.assert_array_equal(batch.mask_a.sum(axis=1), [3, 7, 1])
        np.testing.assert_array_equal(batch.mask_b.sum(axis=1), [1, 2, 4])

    def test_shuffle_deterministic(self):
        examples = [Example([f"t{i}"], [f"u{i}"], i % 2) for i in range(20)]
        vocab = Vocabulary(t for e in examples for t in e.seq_a + e.seq_b)
        b1 = make_batches(examples, vocab, 4, shuffle=True, seed=5)
        b2 = make_batches(examples, vocab, 4, shuffle=True, seed=5)
        b3 = make_batches(examples, vocab, 4, shuffle=True, seed=6)
        assert all(np.array_equal(x.ids_a, y.ids_a) for x, y in zip(b1, b2))
        assert any(not np.array_equal(x.ids_a, y.ids_a) for x, y in zip(b1, b3))

    def test_batch_size_validated(self):
        with pytest.raises(ValueError):
            make_batches([], Vocabulary([]), 0)


class TestAccuracy:
    def test_all_correct(self):
        assert accuracy([1, 2, 0], [1, 2, 0]) == 1.0

    def test_half(self):
        assert accuracy([1, 0], [1, 1]) == 0.5

    def test_matches_brute_force(self):
        rng = np.random.default_rng(20)
        for _ in range(200):
            n = int(rng.integers(1, 30))
            preds = rng.integers(0, 3, size=n)
            labels = rng.integers(0, 3, size=n)
            expected = sum(1 for p, l in zip(preds, labels) if p == l) / n
            assert accuracy(preds, labels) == expected


def brute_force_map_mrr(scores, labels, group_ids):
    """Direct-from-definition oracle: enumerate ranked lists per group."""
    by_group = {}
    for i, g in enumerate(group_ids):
        by_group.setdefault(g, []).append(i)
    aps, rrs = [], []
    for members in by_group.values():
        ranked = sorted(members, key=lambda i: (-scores[i], i))
        rels = [labels[i] for i in ranked]
        if not any(rels):
            continue
        hits, precisions = 0, []
        for rank, rel in enumerate(rels, start=1):
            if rel:
                hits += 1
                precisions.append(hits / rank)
        aps.append(sum(precisions) / len(precisions))
        rrs.append(1.0 / (rels.index(1) + 1))
    return sum(aps) / len(aps), sum(rrs) / len(rrs)


class TestMapMrr:
    def test_relevant_first(self):
        m, r = map_mrr([0.9, 0.1], [1, 0], ["q", "q"])
        assert m == 1.0 and r == 1.0

    def test_relevant_second_of_two(self):
        m, r = map_mrr([0.9, 0.1], [0, 1], ["q", "q"])
        assert m == 0.5 and r == 0.5

    def test_two_relevant_of_three(self):
        m, _ = map_mrr([0.9, 0.5, 0.1], [1, 0, 1], ["q"] * 3)
        assert abs(m - (1.0 + 2.0 / 3.0) / 2.0) < 1e-12

    def test_group_without_relevant_excluded(self):
        m, r = map_mrr([0.9, 0.8, 0.7], [1, 0, 0], ["q1", "q2", "q2"])
        assert m == 1.0 and r == 1.0

    def test_ties_stable_by_original_order(self):
        _, r = map_mrr([0.5, 0.5], [0, 1], ["q", "q"])
        assert r == 0.5  # first candidate keeps rank 1 on a tie

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            map_mrr([], [], [])

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(21)
        for _ in range(300):
            n_groups = int(rng.integers(1, 6))
            scores, labels, groups = [], [], []
            for g in range(n_groups):
                size = int(rng.integers(1, 6))
                scores += list(rng.random(size))
                labels += list(rng.integers(0, 2, size=size))
                groups += [f"g{g}"] * size
            if not any(labels):
                labels[0] = 1
            ours = map_mrr(scores, labels, groups)
            oracle = brute_force_map_mrr(scores, labels, groups)
            assert abs(ours[0] - oracle[0]) < 1e-9
            assert abs(ours[1] - oracle[1]) < 1e-9
