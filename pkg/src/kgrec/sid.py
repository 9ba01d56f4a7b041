"""Item-side discrete vocabularies: per-subspace k-means codebooks,
semantic-ID assignment with collision suffixes, and the prefix trie used
for constrained decoding."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np


class ConfigurationError(ValueError):
    pass


class ContractViolation(ValueError):
    pass


@dataclass
class ItemCodebooks:
    levels: int
    books: list[np.ndarray]                  # level -> (m_l, d_l)
    subspace_slices: list[tuple[int, int]]   # contiguous [lo, hi) per level

    @property
    def content_dim(self) -> int:
        return self.subspace_slices[-1][1]


@dataclass(frozen=True, order=True)
class SemanticId:
    tokens: tuple[int, ...]
    disamb: int = 0

    def as_sequence(self) -> tuple[int, ...]:
        """Token sequence with the disambiguation suffix as a final level."""
        return self.tokens + (self.disamb,)


def _lloyd(points: np.ndarray, m: int, rng: np.random.Generator,
           max_iter: int = 50) -> np.ndarray:
    """Seeded k-means with farthest-point seeding and deterministic
    empty-cluster reseeding."""
    n = points.shape[0]
    if n < m:
        raise ConfigurationError(f"k-means needs >= {m} points, got {n}")
    centroids = np.empty((m, points.shape[1]))
    first = int(rng.integers(0, n))
    centroids[0] = points[first]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, m):
        centroids[j] = points[int(np.argmax(d2))]
        d2 = np.minimum(d2, ((points - centroids[j]) ** 2).sum(axis=1))

    for _ in range(max_iter):
        dists = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assign = dists.argmin(axis=1)
        new = centroids.copy()
        for j in range(m):
            mask = assign == j
            if mask.any():
                new[j] = points[mask].mean(axis=0)
            else:
                # deterministic rule: steal the point farthest from its centroid
                worst = int(np.argmax(dists[np.arange(n), assign]))
                new[j] = points[worst]
                assign[worst] = j
        if np.array_equal(new, centroids):
            break
        centroids = new
    return centroids


def fit_codebooks(item_vectors: np.ndarray, levels: int, m: int,
                  seed: int) -> ItemCodebooks:
    vectors = np.asarray(item_vectors, dtype=np.float64)
    n, dim = vectors.shape
    if dim % levels != 0:
        raise ConfigurationError(
            f"content dimension {dim} not divisible by {levels} levels")
    if n < m:
        raise ConfigurationError(f"need at least m={m} items, got {n}")
    width = dim // levels
    rng = np.random.default_rng(seed)
    books, slices = [], []
    for lvl in range(levels):
        lo, hi = lvl * width, (lvl + 1) * width
        books.append(_lloyd(vectors[:, lo:hi], m, rng))
        slices.append((lo, hi))
    return ItemCodebooks(levels=levels, books=books, subspace_slices=slices)


def encode_vectors(item_vectors: np.ndarray, books: ItemCodebooks) -> np.ndarray:
    """Nearest-centroid token per level; returns an (N, L) int array."""
    vectors = np.asarray(item_vectors, dtype=np.float64)
    if vectors.shape[1] != books.content_dim:
        raise ContractViolation(
            f"vectors have dim {vectors.shape[1]}, books expect {books.content_dim}")
    tokens = np.empty((vectors.shape[0], books.levels), dtype=np.int64)
    for lvl, ((lo, hi), book) in enumerate(zip(books.subspace_slices, books.books)):
        sub = vectors[:, lo:hi]
        d = ((sub[:, None, :] - book[None, :, :]) ** 2).sum(axis=2)
        tokens[:, lvl] = d.argmin(axis=1)
    return tokens


def encode_catalog(item_vectors: np.ndarray,
                   books: ItemCodebooks) -> list[SemanticId]:
    """Assign SIDs in input order; colliding token tuples get disambiguation
    suffixes 0, 1, 2, ..."""
    tokens = encode_vectors(item_vectors, books)
    seen: dict[tuple, int] = {}
    sids = []
    for row in tokens:
        key = tuple(int(t) for t in row)
        suffix = seen.get(key, 0)
        seen[key] = suffix + 1
        sids.append(SemanticId(tokens=key, disamb=suffix))
    return sids


class PrefixTrie:
    """Accepts exactly the catalog's SID token sequences (disambiguation
    suffix included as the final level)."""

    def __init__(self):
        self.root: dict = {}
        self.depth = 0

    def insert(self, sequence: tuple[int, ...]):
        node = self.root
        for tok in sequence:
            node = node.setdefault(int(tok), {})
        self.depth = max(self.depth, len(sequence))

    def valid_next(self, prefix: tuple[int, ...]) -> list[int]:
        node = self.root
        for tok in prefix:
            node = node.get(int(tok))
            if node is None:
                return []
        return sorted(node.keys())

    def accepts(self, sequence: tuple[int, ...]) -> bool:
        node = self.root
        for tok in sequence:
            node = node.get(int(tok))
            if node is None:
                return False
        return len(node) == 0 and len(sequence) == self.depth


def build_prefix_trie(sids: list[SemanticId]) -> PrefixTrie:
    if not sids:
        raise ContractViolation("cannot build a trie from an empty catalog")
    trie = PrefixTrie()
    for sid in sids:
        trie.insert(sid.as_sequence())
    return trie


@dataclass
class Catalog:
    """Fitted catalog: items, their SIDs, and decoding vocabulary sizes."""
    item_ids: list[str]
    content: np.ndarray                     # (N, D)
    text_tokens: list[list[int]]
    books: ItemCodebooks
    sids: list[SemanticId]
    sid_to_item: dict[tuple, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.sid_to_item:
            self.sid_to_item = {
                sid.as_sequence(): i for i, sid in enumerate(self.sids)}

    @property
    def size(self) -> int:
        return len(self.item_ids)

    @property
    def vocab_sizes(self) -> list[int]:
        """Per generated level, disambiguation suffix level last."""
        disamb_vocab = max(sid.disamb for sid in self.sids) + 1
        return [book.shape[0] for book in self.books.books] + [disamb_vocab]

    def trie(self) -> PrefixTrie:
        return build_prefix_trie(self.sids)


def fit_catalog(item_ids, content, text_tokens, levels: int, m: int,
                seed: int) -> Catalog:
    content = np.asarray(content, dtype=np.float64)
    books = fit_codebooks(content, levels, m, seed)
    sids = encode_catalog(content, books)
    return Catalog(item_ids=list(item_ids), content=content,
                   text_tokens=[list(t) for t in text_tokens],
                   books=books, sids=sids)


# ---------------------------------------------------------------------------
# file formats


def read_catalog_jsonl(path) -> tuple[list[str], np.ndarray, list[list[int]]]:
    """Catalog file: one JSON object per line with keys item_id, content,
    text_tokens."""
    ids, content, text = [], [], []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            ids.append(str(rec["item_id"]))
            content.append(rec["content"])
            text.append([int(t) for t in rec["text_tokens"]])
    return ids, np.asarray(content, dtype=np.float64), text


def write_catalog_jsonl(path, item_ids, content, text_tokens):
    with open(path, "w") as fh:
        for iid, vec, toks in zip(item_ids, np.asarray(content), text_tokens):
            fh.write(json.dumps({"item_id": iid,
                                 "content": [float(v) for v in vec],
                                 "text_tokens": [int(t) for t in toks]}) + "\n")


def write_sid_map_csv(path, catalog: Catalog):
    levels = catalog.books.levels
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["item_id"] + [f"token_{l}" for l in range(levels)]
                        + ["disamb"])
        for iid, sid in zip(catalog.item_ids, catalog.sids):
            writer.writerow([iid] + list(sid.tokens) + [sid.disamb])


def total_quantization_cost(vectors: np.ndarray, books: ItemCodebooks) -> float:
    """Sum over levels of within-cluster squared distance (Lloyd objective)."""
    vectors = np.asarray(vectors, dtype=np.float64)
    cost = 0.0
    for (lo, hi), book in zip(books.subspace_slices, books.books):
        sub = vectors[:, lo:hi]
        d = ((sub[:, None, :] - book[None, :, :]) ** 2).sum(axis=2)
        cost += float(d.min(axis=1).sum())
    return cost


def save_catalog_npz(path, catalog: Catalog):
    """Fitted catalog container: codebooks, content, text, item ids."""
    arrays = {"content": catalog.content}
    for lvl, book in enumerate(catalog.books.books):
        arrays[f"book_{lvl}"] = book
    header = json.dumps({
        "item_ids": catalog.item_ids,
        "text_tokens": catalog.text_tokens,
        "levels": catalog.books.levels,
        "slices": catalog.books.subspace_slices,
    })
    np.savez(path, __header__=np.frombuffer(header.encode(), dtype=np.uint8),
             **arrays)


def load_catalog_npz(path) -> Catalog:
    data = np.load(path, allow_pickle=False)
    header = json.loads(bytes(data["__header__"]).decode())
    books = ItemCodebooks(
        levels=header["levels"],
        books=[data[f"book_{lvl}"] for lvl in range(header["levels"])],
        subspace_slices=[tuple(s) for s in header["slices"]])
    content = data["content"]
    sids = encode_catalog(content, books)
    return Catalog(item_ids=header["item_ids"], content=content,
                   text_tokens=header["text_tokens"], books=books, sids=sids)
