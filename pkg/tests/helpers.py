"""Shared test utilities: finite-difference oracle and tiny model builders."""

import numpy as np

from textmatch.model import ModelConfig, TextMatcher


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function, element by element.

    Independent of the autodiff path: it only re-evaluates ``f`` on
    perturbed copies of ``x``.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def tiny_config(**overrides) -> ModelConfig:
    base = dict(num_blocks=2, enc_layers=2, hidden_size=8, kernel_size=3,
                embed_dim=12, keep_prob=1.0, num_classes=3)
    base.update(overrides)
    return ModelConfig(**base)


def tiny_model(config=None, vocab_size=30, seed=0, dtype=np.float32) -> TextMatcher:
    config = config or tiny_config()
    rng = np.random.default_rng(seed + 999)
    table = rng.normal(0, 0.5, size=(vocab_size, config.embed_dim)).astype(dtype)
    table[0] = 0
    return TextMatcher(config, table, seed=seed, dtype=dtype)


def random_pair_batch(rng, vocab_size=30, batch=2, max_len=5, dtype=None):
    """Random padded id matrices + masks with at least one valid token each."""
    len_a = rng.integers(1, max_len + 1, size=batch)
    len_b = rng.integers(1, max_len + 1, size=batch)
    la, lb = int(len_a.max()), int(len_b.max())
    ids_a = np.zeros((batch, la), dtype=np.int64)
    ids_b = np.zeros((batch, lb), dtype=np.int64)
    for i in range(batch):
        ids_a[i, : len_a[i]] = rng.integers(1, vocab_size, size=len_a[i])
        ids_b[i, : len_b[i]] = rng.integers(1, vocab_size, size=len_b[i])
    return ids_a, ids_b, ids_a > 0, ids_b > 0
