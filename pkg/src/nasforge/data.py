"""Datasets for click-through-rate training: synthetic and TSV ingestion.

Dense features are stored already log-transformed (ln(1 + max(x, 0)), the
standard recipe for count features); sparse features are integer ids
already reduced modulo the capped per-feature vocabulary.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import storage
from .tensor import Tensor


@dataclass(frozen=True)
class FeatureSpec:
    """Input geometry: dense width and per-feature sparse vocab sizes."""
    num_dense: int
    vocab_sizes: tuple

    def __post_init__(self):
        if self.num_dense < 0 or not self.vocab_sizes:
            raise ValueError("feature spec needs num_dense >= 0 and at least one sparse feature")

    @property
    def num_sparse(self) -> int:
        return len(self.vocab_sizes)


@dataclass
class Dataset:
    dense: np.ndarray        # [n, num_dense] float64, transformed
    sparse: np.ndarray       # [n, num_sparse] int64
    labels: np.ndarray       # [n] float64 in {0, 1}
    vocab_sizes: tuple

    def __len__(self):
        return self.labels.shape[0]

    @property
    def feature_spec(self) -> FeatureSpec:
        return FeatureSpec(self.dense.shape[1], tuple(self.vocab_sizes))

    def take(self, idx) -> "Dataset":
        return Dataset(self.dense[idx], self.sparse[idx], self.labels[idx], self.vocab_sizes)

    def head(self, n) -> "Dataset":
        return self.take(np.arange(min(n, len(self))))

    def checksum(self) -> str:
        h = hashlib.sha256()
        for arr in (self.dense, self.sparse, self.labels):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(repr(tuple(self.vocab_sizes)).encode())
        return h.hexdigest()


@dataclass
class FeatureBatch:
    dense: Tensor            # [B, num_dense]
    sparse_ids: np.ndarray   # [B, num_sparse]
    labels: np.ndarray       # [B]


def dense_transform(x: np.ndarray) -> np.ndarray:
    return np.log1p(np.maximum(x, 0.0))


def synth_generate(num_dense: int, num_sparse: int, vocab: int, n_rows: int, seed: int,
                   dense_scale: float = 1.2, fm_scale: float = 1.0) -> Dataset:
    """Synthetic CTR rows from a planted teacher, so learnability is known.

    The teacher scores each row with a standardized linear term on the
    transformed dense features plus a standardized second-order
    factorization-machine term over hidden per-id embeddings, then draws
    Bernoulli labels from the sigmoid of the score.  Zero scales give an
    uninformative 50% label rate.
    """
    if n_rows < 1 or num_sparse < 1:
        raise ValueError("need n_rows >= 1 and num_sparse >= 1")
    rng = np.random.default_rng(seed)
    raw_dense = np.floor(np.exp(rng.normal(1.0, 1.0, size=(n_rows, num_dense))))
    dense = dense_transform(raw_dense)
    ids = rng.integers(0, vocab, size=(n_rows, num_sparse), dtype=np.int64)

    score = np.zeros(n_rows)
    if num_dense > 0 and dense_scale != 0.0:
        w = rng.normal(size=num_dense)
        w /= np.linalg.norm(w)
        lin = dense @ w
        sd = lin.std()
        if sd > 0:
            score += dense_scale * (lin - lin.mean()) / sd
    if fm_scale != 0.0:
        dt = 4
        tables = rng.normal(size=(num_sparse, vocab, dt))
        z = tables[np.arange(num_sparse)[None, :], ids]          # [n, F, dt]
        total = z.sum(axis=1)
        fm = 0.5 * ((total * total).sum(axis=1) - (z * z).sum(axis=(1, 2)))
        sd = fm.std()
        if sd > 0:
            score += fm_scale * (fm - fm.mean()) / sd
    p = 1.0 / (1.0 + np.exp(-score))
    labels = (rng.random(n_rows) < p).astype(np.float64)
    return Dataset(dense, ids, labels, tuple([vocab] * num_sparse))


def _hash_token(token: str, modulus: int) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % modulus


def load_criteo_tsv(path, num_dense: int = 13, num_sparse: int = 26,
                    cap: int = 500_000) -> Dataset:
    """Parse label \\t dense ints \\t sparse hex tokens rows.

    Empty dense fields become 0; empty sparse fields take the reserved id 0;
    present tokens map through a stable 64-bit hash modulo the vocab cap.
    """
    dense_rows, sparse_rows, labels = [], [], []
    expected = 1 + num_dense + num_sparse
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != expected:
                raise ValueError(f"{path}:{lineno}: expected {expected} columns, got {len(cols)}")
            try:
                labels.append(float(int(cols[0])))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: bad label {cols[0]!r}") from exc
            drow = []
            for i, field in enumerate(cols[1:1 + num_dense]):
                if field == "":
                    drow.append(0.0)
                    continue
                try:
                    drow.append(float(int(field)))
                except ValueError as exc:
                    raise ValueError(f"{path}:{lineno}: bad dense field {i + 1}: {field!r}") from exc
            dense_rows.append(drow)
            sparse_rows.append([0 if tok == "" else _hash_token(tok, cap)
                                for tok in cols[1 + num_dense:]])
    dense = dense_transform(np.asarray(dense_rows, dtype=np.float64).reshape(len(labels), num_dense))
    sparse = np.asarray(sparse_rows, dtype=np.int64).reshape(len(labels), num_sparse)
    return Dataset(dense, sparse, np.asarray(labels), tuple([cap] * num_sparse))


def split(dataset: Dataset, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Deterministic disjoint exhaustive split (train, val, test)."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must sum to 1")
    n = len(dataset)
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(round(fractions[1] * n))
    n_test = int(round(fractions[2] * n))
    n_train = n - n_val - n_test
    train = dataset.take(perm[:n_train])
    val = dataset.take(perm[n_train:n_train + n_val])
    test = dataset.take(perm[n_train + n_val:])
    return train, val, test


def iter_batches(dataset: Dataset, batch_size: int, shuffle_seed: int | None = None,
                 drop_last: bool = False):
    n = len(dataset)
    order = (np.random.default_rng(shuffle_seed).permutation(n)
             if shuffle_seed is not None else np.arange(n))
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if drop_last and idx.shape[0] < batch_size:
            return
        yield FeatureBatch(
            dense=Tensor(dataset.dense[idx]),
            sparse_ids=dataset.sparse[idx],
            labels=dataset.labels[idx],
        )


def save_dataset(dataset: Dataset, path):
    storage.save_blob(path, "dataset",
                      {"rows": len(dataset),
                       "num_dense": dataset.dense.shape[1],
                       "num_sparse": dataset.sparse.shape[1],
                       "vocab_sizes": list(dataset.vocab_sizes)},
                      {"dense": dataset.dense, "sparse": dataset.sparse,
                       "labels": dataset.labels})


def load_dataset(path) -> Dataset:
    meta, arrays = storage.load_blob(path, expect_kind="dataset")
    return Dataset(arrays["dense"], arrays["sparse"], arrays["labels"],
                   tuple(meta["vocab_sizes"]))
