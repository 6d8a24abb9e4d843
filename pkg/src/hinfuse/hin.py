"""Typed graph storage: entity sets, relation adjacencies and rating splits.

Edge files are UTF-8 text with one edge per line, fields separated by a
single TAB: ``head_id<TAB>tail_id[<TAB>weight]``.  Ratings files use
``user_id<TAB>item_id<TAB>rating``.  A schema document (JSON) declares the
entity types, one file-backed adjacency per relation, and the ratings file.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


class EdgeFileError(ValueError):
    """Malformed line in an edge or ratings file."""

    def __init__(self, path, lineno, message):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = str(path)
        self.lineno = lineno


class ValidationError(ValueError):
    """Data that parses but violates a declared constraint."""


@dataclass
class EntitySet:
    """Dense 0-based index over one entity type.

    Ids are assigned in order of first appearance, so re-running ingestion
    over identical files reproduces identical indices.
    """

    type_name: str
    id_map: dict = field(default_factory=dict)

    @property
    def count(self):
        return len(self.id_map)

    def index(self, external_id):
        """Return the dense index for ``external_id``, assigning on first use."""
        idx = self.id_map.get(external_id)
        if idx is None:
            idx = len(self.id_map)
            self.id_map[external_id] = idx
        return idx


@dataclass(frozen=True)
class RelationDecl:
    name: str
    head_type: str
    tail_type: str


@dataclass
class SparseAdjacency:
    """COO-style adjacency between two entity types; weights are >= 0."""

    rows: int
    cols: int
    row: np.ndarray
    col: np.ndarray
    weight: np.ndarray

    @property
    def nnz(self):
        return len(self.row)

    @property
    def entries(self):
        return list(zip(self.row.tolist(), self.col.tolist(), self.weight.tolist()))

    def to_csr(self):
        m = sp.csr_matrix(
            (self.weight.astype(np.float64), (self.row, self.col)),
            shape=(self.rows, self.cols),
        )
        m.sum_duplicates()
        return m

    def with_shape(self, rows, cols):
        """Same entries under enlarged dimensions (id maps may have grown)."""
        if rows < self.rows or cols < self.cols:
            raise ValueError("adjacency can only grow, not shrink")
        return SparseAdjacency(rows, cols, self.row, self.col, self.weight)


@dataclass
class HinStore:
    """Immutable-after-ingestion container: entity sets plus one adjacency per relation."""

    entities: dict = field(default_factory=dict)
    relations: dict = field(default_factory=dict)  # name -> (RelationDecl, SparseAdjacency)

    def entity(self, type_name):
        try:
            return self.entities[type_name]
        except KeyError:
            raise KeyError(f"undeclared entity type {type_name!r}") from None

    def decl(self, relation):
        return self.relations[relation][0]

    def adjacency(self, relation):
        return self.relations[relation][1]


@dataclass
class RatingSet:
    """Observed (user, item, rating) triples for one split role."""

    users: np.ndarray
    items: np.ndarray
    values: np.ndarray
    role: str = "all"

    def __len__(self):
        return len(self.values)

    @property
    def triples(self):
        return list(zip(self.users.tolist(), self.items.tolist(), self.values.tolist()))


@dataclass
class ValidationReport:
    errors: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.errors

    @property
    def items(self):
        return self.errors + self.warnings


def _parse_edge_line(path, lineno, line):
    parts = line.rstrip("\n").split("\t")
    if len(parts) == 2:
        head, tail = parts
        weight = 1.0
    elif len(parts) == 3:
        head, tail, raw = parts
        try:
            weight = float(raw)
        except ValueError:
            raise EdgeFileError(path, lineno, f"weight {raw!r} is not a number") from None
    else:
        raise EdgeFileError(path, lineno, f"expected 2 or 3 TAB-separated fields, got {len(parts)}")
    if not head or not tail:
        raise EdgeFileError(path, lineno, "empty entity id")
    if weight < 0:
        raise ValidationError(f"{path}:{lineno}: negative weight {weight}")
    return head, tail, weight


def load_edges(path, decl, entities):
    """Read one relation's edge file into a :class:`SparseAdjacency`.

    Duplicate (head, tail) lines have their weights summed; a missing weight
    defaults to 1.  External ids not seen before extend the entity id maps.
    """
    head_set = entities[decl.head_type]
    tail_set = entities[decl.tail_type]
    acc = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            head, tail, weight = _parse_edge_line(path, lineno, line)
            key = (head_set.index(head), tail_set.index(tail))
            acc[key] = acc.get(key, 0.0) + weight
    if acc:
        row, col = map(np.asarray, zip(*acc.keys()))
        weight = np.asarray(list(acc.values()), dtype=np.float64)
    else:
        row = col = np.zeros(0, dtype=np.int64)
        weight = np.zeros(0, dtype=np.float64)
    return SparseAdjacency(head_set.count, tail_set.count, row, col, weight)


def load_ratings(path, user_set, item_set, rating_range=(1.0, 5.0)):
    """Read a ratings file; ratings outside ``rating_range`` are rejected."""
    lo, hi = rating_range
    users, items, values = [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise EdgeFileError(path, lineno, f"expected 3 TAB-separated fields, got {len(parts)}")
            try:
                rating = float(parts[2])
            except ValueError:
                raise EdgeFileError(path, lineno, f"rating {parts[2]!r} is not a number") from None
            if not lo <= rating <= hi:
                raise ValidationError(f"{path}:{lineno}: rating {rating} outside [{lo}, {hi}]")
            users.append(user_set.index(parts[0]))
            items.append(item_set.index(parts[1]))
            values.append(rating)
    return RatingSet(
        np.asarray(users, dtype=np.int64),
        np.asarray(items, dtype=np.int64),
        np.asarray(values, dtype=np.float64),
        role="all",
    )


def rating_adjacency(ratings, n_users, n_items, binarize=True):
    """Build the user-item adjacency used for metagraph traversal.

    ``binarize`` maps every rating to weight 1 (default); otherwise raw
    rating values are kept as weights.
    """
    weight = np.ones(len(ratings)) if binarize else ratings.values.astype(np.float64)
    acc = sp.csr_matrix((weight, (ratings.users, ratings.items)), shape=(n_users, n_items))
    acc.sum_duplicates()
    coo = acc.tocoo()
    return SparseAdjacency(n_users, n_items, coo.row.astype(np.int64), coo.col.astype(np.int64), coo.data)


def attach_ratings(hin, ratings, decl, binarize=True):
    """Insert the rating adjacency for ``decl`` into ``hin`` (replacing any prior one)."""
    adj = rating_adjacency(
        ratings, hin.entity(decl.head_type).count, hin.entity(decl.tail_type).count, binarize=binarize
    )
    hin.relations[decl.name] = (decl, adj)
    return hin


def validate(hin):
    """Report dimension mismatches (errors), empty relations and orphan entity types (warnings)."""
    report = ValidationReport()
    referenced = set()
    for name, (decl, adj) in hin.relations.items():
        referenced.update((decl.head_type, decl.tail_type))
        for side, type_name, have in (("rows", decl.head_type, adj.rows), ("cols", decl.tail_type, adj.cols)):
            want = hin.entity(type_name).count
            if have != want:
                report.errors.append(
                    f"relation {name!r}: {side}={have} but entity type {type_name!r} has {want} entities"
                )
        if adj.nnz == 0:
            report.warnings.append(f"relation {name!r} has no edges")
    for type_name in hin.entities:
        if type_name not in referenced:
            report.warnings.append(f"entity type {type_name!r} is not used by any relation")
    return report


def split_ratings(ratings, fractions, seed):
    """Partition triples into (train, valid, test) by a seeded uniform shuffle.

    Sizes are floor(f * N) for valid and test, with the remainder assigned
    to train.  The same seed always produces the same partition.
    """
    f_train, f_valid, f_test = fractions
    if min(fractions) < 0:
        raise ValueError(f"fractions must be nonnegative, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    n = len(ratings)
    n_valid = int(f_valid * n)
    n_test = int(f_test * n)
    n_train = n - n_valid - n_test
    perm = np.random.default_rng(seed).permutation(n)

    def take(idx, role):
        return RatingSet(ratings.users[idx], ratings.items[idx], ratings.values[idx], role=role)

    return (
        take(perm[:n_train], "train"),
        take(perm[n_train : n_train + n_valid], "valid"),
        take(perm[n_train + n_valid :], "test"),
    )


def load_schema(path):
    with open(path, encoding="utf-8") as fh:
        schema = json.load(fh)
    for key in ("entities", "relations"):
        if key not in schema:
            raise ValidationError(f"schema is missing the {key!r} section")
    return schema


def ingest(schema, base_dir=None):
    """Load a schema document into a (HinStore, RatingSet) pair.

    The ratings file is read first (users/items get the lowest indices),
    then relation edge files in declared order.  The rating adjacency is
    *not* attached here; callers decide which split feeds it (see
    :func:`attach_ratings`), which keeps held-out pairs out of the graph.
    """
    if isinstance(schema, (str, os.PathLike)):
        base_dir = base_dir or os.path.dirname(os.path.abspath(schema))
        schema = load_schema(schema)
    base_dir = base_dir or "."

    store = HinStore()
    for type_name in schema["entities"]:
        store.entities[type_name] = EntitySet(type_name)

    ratings = None
    rating_decl = None
    rspec = schema.get("ratings")
    if rspec is not None:
        user_set = store.entity(rspec["user_type"])
        item_set = store.entity(rspec["item_type"])
        ratings = load_ratings(
            os.path.join(base_dir, rspec["file"]),
            user_set,
            item_set,
            rating_range=tuple(rspec.get("range", (1.0, 5.0))),
        )
        rating_decl = RelationDecl(rspec.get("relation", "rate"), rspec["user_type"], rspec["item_type"])

    for rel in schema["relations"]:
        decl = RelationDecl(rel["name"], rel["head"], rel["tail"])
        if decl.head_type not in store.entities or decl.tail_type not in store.entities:
            raise ValidationError(f"relation {decl.name!r} references an undeclared entity type")
        if decl.name in store.relations:
            raise ValidationError(f"duplicate relation name {decl.name!r}")
        adj = load_edges(os.path.join(base_dir, rel["file"]), decl, store.entities)
        store.relations[decl.name] = (decl, adj)

    # id maps may have grown after an adjacency was built; re-shape to final counts
    for name, (decl, adj) in store.relations.items():
        store.relations[name] = (
            decl,
            adj.with_shape(store.entity(decl.head_type).count, store.entity(decl.tail_type).count),
        )
    return store, ratings, rating_decl
