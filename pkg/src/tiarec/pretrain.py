"""Frozen pretrained artifacts: Skip-gram item vectors and PMF latent factors."""

import json
import logging
from pathlib import Path

import numpy as np

from .nn import stable_sigmoid
from .seeding import component_rng

logger = logging.getLogger(__name__)


class VectorTable:
    """Row-per-key float64 matrix with O(1) key lookup; order is the key list."""

    def __init__(self, keys, matrix):
        matrix = np.asarray(matrix, dtype=np.float64)
        keys = list(keys)
        if matrix.ndim != 2 or matrix.shape[0] != len(keys):
            raise ValueError(f"need a ({len(keys)}, dim) matrix, got {matrix.shape}")
        self.keys = keys
        self.matrix = matrix
        self.index = {k: i for i, k in enumerate(keys)}
        if len(self.index) != len(keys):
            raise ValueError("duplicate keys in vector table")

    @property
    def dim(self):
        return self.matrix.shape[1]

    def __len__(self):
        return len(self.keys)

    def __contains__(self, key):
        return key in self.index

    def __getitem__(self, key):
        try:
            return self.matrix[self.index[key]]
        except KeyError:
            raise KeyError(f"unknown id {key!r}") from None

    def rows(self, keys):
        try:
            return self.matrix[[self.index[k] for k in keys]]
        except KeyError as exc:
            raise KeyError(f"unknown id {exc.args[0]!r}") from None

    @property
    def vectors(self):
        return {k: self.matrix[i] for i, k in enumerate(self.keys)}


class ItemEmbeddingTable(VectorTable):
    pass


class PMFFactors:
    def __init__(self, users, items, loss_history=None):
        if users.dim != items.dim:
            raise ValueError("user and item factors must share one dimension")
        self.users = users
        self.items = items
        self.loss_history = list(loss_history or [])

    @property
    def dim(self):
        return self.users.dim

    @property
    def user_factors(self):
        return self.users.vectors

    @property
    def item_factors(self):
        return self.items.vectors


def _uniform_init(rng, n, dim):
    return rng.uniform(-0.5 / dim, 0.5 / dim, size=(n, dim))


# ------------------------------------------------------------------ skip-gram

def _training_sentences(split, index):
    return [
        np.array([index[e.item_id] for e in split.train[u].events], dtype=np.int64)
        for u in split.user_vocabulary
        if u in split.train
    ]


def pretrain_item_embeddings(split, dim=64, window=5, negatives=5, epochs=5, lr=0.025, seed=0):
    """Skip-gram with negative sampling over the training sequences.

    Items are words, each user's train sequence is a sentence.  Negatives are
    drawn from the unigram distribution raised to 0.75.  The learning rate
    decays linearly to 1e-4 of its start value.  Returns the input vectors.
    """
    if dim < 2:
        raise ValueError(f"dim must be >= 2, got {dim}")
    if window < 1 or negatives < 1:
        raise ValueError("window and negatives must be >= 1")
    vocab = split.item_vocabulary
    if len(vocab) < negatives + 1:
        raise ValueError(
            f"vocabulary of {len(vocab)} items is too small for {negatives} negatives per pair"
        )
    rng = component_rng(seed, "skipgram")
    index = {item: i for i, item in enumerate(vocab)}
    syn0 = _uniform_init(rng, len(vocab), dim)
    syn1 = np.zeros((len(vocab), dim))
    if epochs <= 0:
        return ItemEmbeddingTable(vocab, syn0)

    sentences = _training_sentences(split, index)
    counts = np.bincount(np.concatenate(sentences) if sentences else np.zeros(0, np.int64),
                         minlength=len(vocab)).astype(np.float64)
    noise = counts ** 0.75
    noise = noise / noise.sum() if noise.sum() > 0 else np.full(len(vocab), 1.0 / len(vocab))

    pairs = []
    for sent in sentences:
        n = len(sent)
        for offset in range(1, window + 1):
            if offset >= n:
                break
            pairs.append(np.stack([sent[:-offset], sent[offset:]], axis=1))
            pairs.append(np.stack([sent[offset:], sent[:-offset]], axis=1))
    if not pairs:
        logger.warning("no skip-gram pairs: every training sequence has a single event")
        return ItemEmbeddingTable(vocab, syn0)
    pairs = np.concatenate(pairs)

    batch = 256
    total_steps = epochs * int(np.ceil(len(pairs) / batch))
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(pairs))
        for start in range(0, len(pairs), batch):
            alpha = lr * max(1e-4, 1.0 - step / total_steps)
            step += 1
            chunk = pairs[order[start:start + batch]]
            center, context = chunk[:, 0], chunk[:, 1]
            neg = rng.choice(len(vocab), size=(len(chunk), negatives), p=noise)
            targets = np.concatenate([context[:, None], neg], axis=1)
            labels = np.zeros(targets.shape)
            labels[:, 0] = 1.0
            h = syn0[center]                                  # (B, d)
            out = syn1[targets]                               # (B, 1+K, d)
            score = stable_sigmoid(np.einsum("bd,bkd->bk", h, out))
            g = (labels - score) * alpha                      # ascent direction
            grad_h = np.einsum("bk,bkd->bd", g, out)
            np.add.at(syn1, targets, g[:, :, None] * h[:, None, :])
            np.add.at(syn0, center, grad_h)
        logger.debug("skip-gram epoch %d done", epoch)
    return ItemEmbeddingTable(vocab, syn0)


# ------------------------------------------------------------------------ PMF

def fit_pmf(split, dim=64, negatives_per_positive=4, epochs=20, lr=0.05, reg=1e-4, seed=0,
            batch_size=256):
    """Logistic matrix factorisation on the training interactions.

    Every logged train event is a positive; negatives are items drawn
    uniformly from those the user never interacted with in train.
    """
    if dim < 2:
        raise ValueError(f"dim must be >= 2, got {dim}")
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    if reg < 0:
        raise ValueError(f"reg must be non-negative, got {reg}")
    rng = component_rng(seed, "pmf")
    users, items = split.user_vocabulary, split.item_vocabulary
    uidx = {u: i for i, u in enumerate(users)}
    iidx = {v: i for i, v in enumerate(items)}
    U = _uniform_init(rng, len(users), dim)
    V = _uniform_init(rng, len(items), dim)
    history = []
    if epochs <= 0:
        return PMFFactors(VectorTable(users, U), ItemEmbeddingTable(items, V), history)

    pos_u, pos_i, seen = [], [], {}
    for u in users:
        if u not in split.train:
            continue
        row = seen.setdefault(uidx[u], set())
        for ev in split.train[u].events:
            pos_u.append(uidx[u])
            pos_i.append(iidx[ev.item_id])
            row.add(iidx[ev.item_id])
    pos_u = np.array(pos_u, dtype=np.int64)
    pos_i = np.array(pos_i, dtype=np.int64)
    if len(pos_u) == 0:
        raise ValueError("fit_pmf: training split has no interactions")

    n_items = len(items)

    def sample_negatives():
        nu, ni = [], []
        for u in pos_u:
            excluded = seen[u]
            if len(excluded) >= n_items:
                continue
            for _ in range(negatives_per_positive):
                j = int(rng.integers(n_items))
                while j in excluded:
                    j = int(rng.integers(n_items))
                nu.append(u)
                ni.append(j)
        return np.array(nu, dtype=np.int64), np.array(ni, dtype=np.int64)

    for epoch in range(epochs):
        nu, ni = sample_negatives()
        all_u = np.concatenate([pos_u, nu])
        all_i = np.concatenate([pos_i, ni])
        y = np.concatenate([np.ones(len(pos_u)), np.zeros(len(nu))])
        order = rng.permutation(len(y))
        total = 0.0
        for start in range(0, len(y), batch_size):
            sel = order[start:start + batch_size]
            bu, bi, by = all_u[sel], all_i[sel], y[sel]
            pu, qi = U[bu], V[bi]
            p = stable_sigmoid(np.sum(pu * qi, axis=1))
            total += float(-np.sum(by * np.log(p + 1e-12) + (1 - by) * np.log(1 - p + 1e-12)))
            err = (p - by)[:, None]
            gu = err * qi + reg * pu
            gi = err * pu + reg * qi
            np.add.at(U, bu, -lr * gu)
            np.add.at(V, bi, -lr * gi)
        history.append(total / len(y))
        logger.debug("pmf epoch %d loss %.5f", epoch, history[-1])
    return PMFFactors(VectorTable(users, U), ItemEmbeddingTable(items, V), history)


def pmf_probability(factors, user_id, item_id):
    """logistic(u . v) for one user-item pair."""
    u = factors.users[user_id]
    v = factors.items[item_id]
    return float(stable_sigmoid(np.dot(u, v)))


def pmf_probabilities(factors, user_id, item_ids):
    u = factors.users[user_id]
    return stable_sigmoid(factors.items.rows(item_ids) @ u)


# ------------------------------------------------------------------ artifacts

def save_vectors(table, path, kind="item_embeddings"):
    """``<path>.json`` manifest and ``<path>.f32`` little-endian float32 rows."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "kind": kind,
        "dim": table.dim,
        "count": len(table),
        "dtype": "float32",
        "byteorder": "little",
        "ordering": table.keys,
    }
    path.with_suffix(".f32").write_bytes(table.matrix.astype("<f4").tobytes())
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1) + "\n")
    return path


def load_vectors(path, cls=VectorTable):
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    if manifest.get("dtype") != "float32":
        raise ValueError(f"{path}: unsupported dtype {manifest.get('dtype')!r}")
    flat = np.frombuffer(path.with_suffix(".f32").read_bytes(), dtype="<f4")
    expected = manifest["count"] * manifest["dim"]
    if flat.size != expected:
        raise ValueError(f"{path}: payload has {flat.size} floats, manifest implies {expected}")
    matrix = flat.astype(np.float64).reshape(manifest["count"], manifest["dim"])
    return cls(manifest["ordering"], matrix)


def save_embeddings(table, path):
    return save_vectors(table, path, "item_embeddings")


def load_embeddings(path):
    return load_vectors(path, ItemEmbeddingTable)


def save_pmf(factors, directory):
    directory = Path(directory)
    save_vectors(factors.users, directory / "users", "pmf_users")
    save_vectors(factors.items, directory / "items", "pmf_items")
    (directory / "history.json").write_text(json.dumps({"loss": factors.loss_history}) + "\n")
    return directory


def load_pmf(directory):
    directory = Path(directory)
    history = []
    if (directory / "history.json").exists():
        history = json.loads((directory / "history.json").read_text())["loss"]
    return PMFFactors(load_vectors(directory / "users"),
                      load_vectors(directory / "items", ItemEmbeddingTable), history)
