import numpy as np
import pytest

from partswap.data import DatasetSpec, bigram_cross_entropy, gen_dataset


def _all(splits):
    return [splits.train, splits.val, splits.test]


def test_patterns_class_balance():
    s = gen_dataset(DatasetSpec("translated-patterns", n_train=5000, n_test=1000, classes=10, size=16))
    y = np.concatenate([p[1] for p in _all(s)])
    assert len(y) == 6000
    counts = np.bincount(y, minlength=10)
    assert np.all(np.abs(counts - 600) <= 1)
    assert s.input_shape == (1, 16, 16)


def test_same_seed_identical():
    spec = DatasetSpec("char-stream", n_train=200, n_test=50, size=12, seed=4)
    a, b = gen_dataset(spec), gen_dataset(spec)
    for (xa, ya), (xb, yb) in zip(_all(a), _all(b)):
        np.testing.assert_array_equal(xa, xb)
        np.testing.assert_array_equal(ya, yb)
    c = gen_dataset(DatasetSpec("char-stream", n_train=200, n_test=50, size=12, seed=5))
    assert not np.array_equal(a.train[0], c.train[0])


@pytest.mark.parametrize("kind", ["translated-patterns", "gaussian-blobs", "sequence-copy", "char-stream"])
def test_splits_disjoint_and_sized(kind):
    s = gen_dataset(DatasetSpec(kind, n_train=300, n_test=100, size=8, pattern=3, seed=1))
    assert len(s.train[0]) + len(s.val[0]) == 300 and len(s.test[0]) == 100
    rows = [{r.tobytes() for r in p[0].reshape(len(p[0]), -1)} for p in _all(s)]
    if kind in ("translated-patterns", "gaussian-blobs"):  # continuous noise: collisions mean shared samples
        assert not (rows[0] & rows[1]) and not (rows[0] & rows[2]) and not (rows[1] & rows[2])


def test_patterns_contain_a_template():
    s = gen_dataset(DatasetSpec("translated-patterns", n_train=50, n_test=10, classes=4, size=10, pattern=3, noise=0.0))
    T = s.info["templates"]
    for x, y in zip(*s.train):
        img = x[0]
        hits = [(r, q) for r in range(8) for q in range(8) if np.array_equal(img[r:r + 3, q:q + 3], T[y])]
        assert hits and img.sum() == T[y].sum()


def test_copy_task_perfect_copier_vs_bigram():
    s = gen_dataset(DatasetSpec("sequence-copy", n_train=2000, n_test=500, size=12, alphabet=16))
    X, y = s.test
    # perfect copier: position L+j predicts the token at position j
    L = 12
    scored = y >= 0
    pred = np.zeros_like(y)
    pred[:, L:] = X[:, :L]
    assert np.array_equal(pred[scored], y[scored])  # cross-entropy 0 for a one-hot copier
    ce = bigram_cross_entropy(*s.train, X, y)
    # the best bigram can do no better than guessing a uniform next source token
    assert ce > 0.9 * np.log(16)


def test_bigram_oracle_fits_a_bigram_source():
    rng = np.random.default_rng(0)
    X = rng.integers(0, 4, size=(500, 10))
    y = (X + 1) % 4  # deterministic bigram
    assert bigram_cross_entropy(X, y, X, y) < 1e-2


def test_char_stream_targets_shifted():
    s = gen_dataset(DatasetSpec("char-stream", n_train=20, n_test=5, size=9, alphabet=6))
    X, y = s.train
    np.testing.assert_array_equal(X[:, 1:], y[:, :-1])
    assert X.max() < 6


@pytest.mark.parametrize("kw,match", [({"kind": "mnist"}, "unknown"), ({"n_train": 3}, "at least"),
                                      ({"val_fraction": 1.0}, "val_fraction"), ({"pattern": 20}, "pattern"),
                                      ({"classes": 1}, "2 classes")])
def test_invalid_specs(kw, match):
    with pytest.raises(ValueError, match=match):
        DatasetSpec(**kw)
