import json

import numpy as np
import pytest

from hinfuse import hin


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return str(path)


def registry(*types):
    return {t: hin.EntitySet(t) for t in types}


DECL = hin.RelationDecl("rate", "U", "B")


class TestLoadEdges:
    def test_empty_file(self, tmp_path):
        path = write(tmp_path / "e.tsv", "")
        adj = hin.load_edges(path, DECL, registry("U", "B"))
        assert adj.nnz == 0

    def test_distinct_pairs(self, tmp_path):
        path = write(tmp_path / "e.tsv", "a\tx\na\ty\nb\tx\n")
        adj = hin.load_edges(path, DECL, registry("U", "B"))
        assert adj.nnz == 3
        assert all(w == 1.0 for _, _, w in adj.entries)

    def test_duplicates_sum(self, tmp_path):
        path = write(tmp_path / "e.tsv", "a\tx\na\tx\n")
        adj = hin.load_edges(path, DECL, registry("U", "B"))
        assert adj.entries == [(0, 0, 2.0)]

    def test_explicit_weights(self, tmp_path):
        path = write(tmp_path / "e.tsv", "a\tx\t0.5\na\tx\t2\n")
        adj = hin.load_edges(path, DECL, registry("U", "B"))
        assert adj.entries == [(0, 0, 2.5)]

    def test_malformed_line_reports_position(self, tmp_path):
        path = write(tmp_path / "e.tsv", "a\tx\nbad-line\n")
        with pytest.raises(hin.EdgeFileError, match=r":2:") as err:
            hin.load_edges(path, DECL, registry("U", "B"))
        assert err.value.lineno == 2

    def test_non_numeric_weight(self, tmp_path):
        path = write(tmp_path / "e.tsv", "a\tx\theavy\n")
        with pytest.raises(hin.EdgeFileError, match="not a number"):
            hin.load_edges(path, DECL, registry("U", "B"))

    def test_negative_weight_rejected(self, tmp_path):
        path = write(tmp_path / "e.tsv", "a\tx\t-1\n")
        with pytest.raises(hin.ValidationError, match="negative"):
            hin.load_edges(path, DECL, registry("U", "B"))

    def test_ids_assigned_by_first_appearance(self, tmp_path):
        path = write(tmp_path / "e.tsv", "b\tx\na\ty\nb\ty\n")
        ents = registry("U", "B")
        hin.load_edges(path, DECL, ents)
        assert ents["U"].id_map == {"b": 0, "a": 1}
        assert ents["B"].id_map == {"x": 0, "y": 1}


class TestValidate:
    def build(self):
        store = hin.HinStore()
        ents = registry("U", "B")
        for name, n in (("U", 2), ("B", 3)):
            for i in range(n):
                ents[name].index(f"{name}{i}")
        store.entities = ents
        adj = hin.SparseAdjacency(2, 3, np.array([0]), np.array([1]), np.array([1.0]))
        store.relations["rate"] = (DECL, adj)
        return store

    def test_consistent_store_is_clean(self):
        report = hin.validate(self.build())
        assert report.ok and not report.items

    def test_dimension_mismatch_is_error(self):
        store = self.build()
        decl, adj = store.relations["rate"]
        store.relations["rate"] = (decl, hin.SparseAdjacency(1, 3, adj.row, adj.col, adj.weight))
        report = hin.validate(store)
        assert not report.ok
        assert len(report.errors) == 1 and "rows=1" in report.errors[0]

    def test_empty_relation_is_warning(self):
        store = self.build()
        empty = hin.SparseAdjacency(2, 3, np.zeros(0, int), np.zeros(0, int), np.zeros(0))
        store.relations["rate"] = (DECL, empty)
        report = hin.validate(store)
        assert report.ok and len(report.warnings) == 1

    def test_orphan_entity_type_is_warning(self):
        store = self.build()
        store.entities["C"] = hin.EntitySet("C")
        report = hin.validate(store)
        assert report.ok and any("'C'" in w for w in report.warnings)


def ratings(n):
    return hin.RatingSet(np.arange(n), np.arange(n), np.linspace(1, 5, n), role="all")


class TestSplitRatings:
    def test_all_train(self):
        train, valid, test = hin.split_ratings(ratings(7), (1.0, 0.0, 0.0), seed=1)
        assert (len(train), len(valid), len(test)) == (7, 0, 0)

    def test_floor_plus_remainder(self):
        train, valid, test = hin.split_ratings(ratings(10), (0.8, 0.1, 0.1), seed=1)
        assert (len(train), len(valid), len(test)) == (8, 1, 1)

    def test_remainder_goes_to_train(self):
        train, valid, test = hin.split_ratings(ratings(11), (0.8, 0.1, 0.1), seed=1)
        assert (len(train), len(valid), len(test)) == (9, 1, 1)

    def test_same_seed_same_split(self):
        a = hin.split_ratings(ratings(50), (0.8, 0.1, 0.1), seed=9)
        b = hin.split_ratings(ratings(50), (0.8, 0.1, 0.1), seed=9)
        for x, y in zip(a, b):
            assert np.array_equal(x.users, y.users) and np.array_equal(x.values, y.values)

    def test_disjoint_union(self):
        rs = ratings(37)
        parts = hin.split_ratings(rs, (0.6, 0.2, 0.2), seed=3)
        seen = np.concatenate([p.users for p in parts])
        assert sorted(seen.tolist()) == sorted(rs.users.tolist())
        assert sum(len(p) for p in parts) == len(rs)

    def test_roles(self):
        parts = hin.split_ratings(ratings(10), (0.8, 0.1, 0.1), seed=0)
        assert [p.role for p in parts] == ["train", "valid", "test"]

    def test_negative_fraction(self):
        with pytest.raises(ValueError, match="nonnegative"):
            hin.split_ratings(ratings(10), (1.2, -0.1, -0.1), seed=0)

    def test_fractions_must_sum_to_one(self):
        with pytest.raises(ValueError, match="sum to 1"):
            hin.split_ratings(ratings(10), (0.5, 0.2, 0.2), seed=0)


def write_dataset(tmp_path):
    write(tmp_path / "ratings.tsv", "u1\tb1\t4\nu2\tb1\t3\nu1\tb2\t5\n")
    write(tmp_path / "friend.tsv", "u1\tu2\n")
    schema = {
        "entities": ["U", "B"],
        "relations": [{"name": "friend", "head": "U", "tail": "U", "file": "friend.tsv"}],
        "ratings": {"file": "ratings.tsv", "user_type": "U", "item_type": "B", "relation": "rate"},
    }
    return write(tmp_path / "schema.json", json.dumps(schema))


class TestIngest:
    def test_roundtrip(self, tmp_path):
        store, rs, decl = hin.ingest(write_dataset(tmp_path))
        assert store.entity("U").count == 2 and store.entity("B").count == 2
        assert len(rs) == 3 and decl.name == "rate"
        assert "rate" not in store.relations  # attached explicitly, per split policy

    def test_deterministic_rerun(self, tmp_path):
        path = write_dataset(tmp_path)
        s1, r1, _ = hin.ingest(path)
        s2, r2, _ = hin.ingest(path)
        assert s1.entity("U").id_map == s2.entity("U").id_map
        assert np.array_equal(r1.values, r2.values)
        a1, a2 = s1.adjacency("friend"), s2.adjacency("friend")
        assert np.array_equal(a1.row, a2.row) and np.array_equal(a1.weight, a2.weight)

    def test_rating_out_of_range_rejected(self, tmp_path):
        write(tmp_path / "ratings.tsv", "u1\tb1\t9\n")
        write(tmp_path / "friend.tsv", "")
        schema = {
            "entities": ["U", "B"],
            "relations": [],
            "ratings": {"file": "ratings.tsv", "user_type": "U", "item_type": "B"},
        }
        path = write(tmp_path / "schema.json", json.dumps(schema))
        with pytest.raises(hin.ValidationError, match="outside"):
            hin.ingest(path)

    def test_attach_ratings_binarized_and_raw(self, tmp_path):
        store, rs, decl = hin.ingest(write_dataset(tmp_path))
        hin.attach_ratings(store, rs, decl)
        assert set(store.adjacency("rate").weight.tolist()) == {1.0}
        hin.attach_ratings(store, rs, decl, binarize=False)
        assert set(store.adjacency("rate").weight.tolist()) == {3.0, 4.0, 5.0}

    def test_adjacency_covers_rating_only_entities(self, tmp_path):
        # u3 appears only in the ratings file; friend adjacency must still span it
        write(tmp_path / "ratings.tsv", "u1\tb1\t4\nu3\tb1\t2\n")
        write(tmp_path / "friend.tsv", "u1\tu2\n")
        schema = {
            "entities": ["U", "B"],
            "relations": [{"name": "friend", "head": "U", "tail": "U", "file": "friend.tsv"}],
            "ratings": {"file": "ratings.tsv", "user_type": "U", "item_type": "B"},
        }
        store, _, _ = hin.ingest(write(tmp_path / "schema.json", json.dumps(schema)))
        assert store.entity("U").count == 3
        adj = store.adjacency("friend")
        assert (adj.rows, adj.cols) == (3, 3)
        assert hin.validate(store).ok
