import json
from dataclasses import replace
from datetime import datetime, timezone

import pytest

from companion.data import (
    Data,
    FormatError,
    InvariantError,
    PersistenceError,
    EdgeSource,
    NumericStats,
    ColumnProfile,
    ColumnSemantics,
    ColumnKnowledge,
    ForeignKeyEdge,
    SchemaKnowledge,
    Knowledge,
    render_value,
    sqlite_sort_key,
    knowledge_path,
    save_knowledge,
    load_knowledge,
)
from companion.data.knowledge import dumps_knowledge, resolve_created_at

from .helpers import CREATED_AT, column, table, retail_knowledge


class TestValues:
    def test_sqlite_order(self):
        values = ["b", 2, None, b"\x00", 1.5, "a", -3]
        expected = [None, -3, 1.5, 2, "a", "b", b"\x00"]
        assert sorted(values, key=sqlite_sort_key) == expected

    def test_render(self):
        assert render_value(52) == "52"
        assert render_value(52.0) == "52.0"
        assert render_value("DOC 52") == "DOC 52"
        assert render_value(None) == "NULL"
        assert render_value(b"\x01\xff") == "01ff"

    def test_created_at_from_environment(self, monkeypatch):
        monkeypatch.setenv("SOURCE_DATE_EPOCH", "86400")
        assert resolve_created_at() == datetime(1970, 1, 2, tzinfo=timezone.utc)

    def test_created_at_is_whole_utc_seconds(self):
        stamp = datetime(2024, 5, 6, 7, 8, 9, 123456)
        resolved = resolve_created_at(stamp)
        assert resolved == datetime(2024, 5, 6, 7, 8, 9, tzinfo=timezone.utc)


class TestInvariants:
    def _get_fake_profile(self, **kwargs) -> ColumnProfile:
        fields = dict(
            sample_size=3,
            null_fraction=0.0,
            distinct_count_in_sample=2,
            numeric_stats=None,
            top_values=[("a", 2), ("b", 1)],
            is_enumeration=True,
            sample_values=["a", "a", "b"],
        )
        fields.update(kwargs)
        return ColumnProfile(**fields)

    def test_numeric_stats_order(self):
        with pytest.raises(InvariantError):
            NumericStats(min=2, max=5, mean=3, variance=1, q25=1, q50=3, q75=4)
        with pytest.raises(InvariantError):
            NumericStats(min=1, max=5, mean=3, variance=-1, q25=2, q50=3, q75=4)

    def test_profile(self):
        assert self._get_fake_profile().observed_values == {"a", "b"}
        with pytest.raises(InvariantError):
            self._get_fake_profile(top_values=[("b", 1), ("a", 2)])
        with pytest.raises(InvariantError):
            self._get_fake_profile(null_fraction=1.5)
        with pytest.raises(InvariantError):
            self._get_fake_profile(distinct_count_in_sample=4)
        with pytest.raises(InvariantError):
            self._get_fake_profile(
                sample_size=21,
                distinct_count_in_sample=21,
                sample_values=list(range(21)),
                top_values=[],
            )

    def test_profile_ties_sort_by_value(self):
        profile = self._get_fake_profile(top_values=[("a", 1), ("b", 1)])
        assert profile.top_values == (("a", 1), ("b", 1))
        with pytest.raises(InvariantError):
            self._get_fake_profile(top_values=[("b", 1), ("a", 1)])

    def test_glossary_keys_are_observed(self):
        profile = self._get_fake_profile()
        ColumnKnowledge("c", "TEXT", profile, ColumnSemantics(enum_glossary={"a": "A"}))
        with pytest.raises(InvariantError):
            ColumnKnowledge(
                "c", "TEXT", profile, ColumnSemantics(enum_glossary={"z": "Zed"})
            )

    def test_duplicate_names(self):
        with pytest.raises(InvariantError):
            table("t", [column("Name", ["x"]), column("name", ["y"])])
        tbl = table("t", [column("x", [1])])
        with pytest.raises(InvariantError):
            SchemaKnowledge("db", [tbl, replace(tbl, name="T")], created_at=CREATED_AT)

    def test_edges(self):
        with pytest.raises(InvariantError):
            ForeignKeyEdge(("a", "x"), ("b", "x"), EdgeSource.INFERRED, 0.5)
        with pytest.raises(InvariantError):
            ForeignKeyEdge(("a", "x"), ("b", "x"), EdgeSource.DECLARED, 0.9)
        with pytest.raises(InvariantError):
            ForeignKeyEdge(("a", "x"), ("b", "x"), "guessed")
        edge = ForeignKeyEdge(["a", "x"], ["b", "x"], "inferred", 0.9)
        assert edge.source is EdgeSource.INFERRED
        assert edge.tables == ("a", "b")

    def test_edges_reference_columns(self):
        sk = retail_knowledge()
        bad = ForeignKeyEdge(
            ("orders", "nope"), ("customer", "customer_id"), "declared"
        )
        with pytest.raises(InvariantError):
            replace(sk, fk_edges=sk.fk_edges + (bad,))

    def test_lookup_ignores_case(self):
        sk = retail_knowledge()
        assert sk.table("ORDERS").name == "orders"
        assert sk.has_column("Orders", "AMOUNT")
        assert not sk.has_column("orders", "segment")
        assert sk.table("nope") is None

    def test_structure_only(self):
        sk = retail_knowledge()
        bare = sk.structure_only()
        assert [t.name for t in bare.tables] == [t.name for t in sk.tables]
        assert bare.fk_edges == sk.fk_edges
        assert bare.created_at == sk.created_at
        for (_, col), (_, bare_col) in zip(sk.columns(), bare.columns()):
            assert (bare_col.name, bare_col.declared_type) == (
                col.name,
                col.declared_type,
            )
            assert bare_col.semantics.is_empty()
            assert bare_col.profile.top_values == ()
            assert bare_col.profile.numeric_stats is None
            assert not bare_col.profile.is_enumeration
        assert all(tbl.sample_rows == () for tbl in bare.tables)


class TestKnowledge:
    def test_save_and_load(self, tmp_path):
        sk = retail_knowledge()
        path = knowledge_path(tmp_path, sk.db_id)
        assert path.name == "retail.knowledge.json"
        save_knowledge(sk, path)
        assert load_knowledge(path) == sk

    def test_bytes_are_stable(self, tmp_path):
        sk = retail_knowledge()
        first, second = tmp_path / "a.knowledge.json", tmp_path / "b.knowledge.json"
        save_knowledge(sk, first)
        save_knowledge(load_knowledge(first), second)
        assert first.read_bytes() == second.read_bytes()
        obj = json.loads(first.read_text())
        keys = ["db_id", "tool_version", "created_at", "tables", "fk_edges"]
        assert list(obj) == keys
        assert obj["created_at"] == "2024-01-01T00:00:00Z"

    def test_compressed(self, tmp_path):
        sk = retail_knowledge()
        path = tmp_path / "retail.knowledge.json.gz"
        save_knowledge(sk, path)
        with Data.hook_compressed(path, mode="r") as handle:
            assert json.load(handle)["db_id"] == "retail"
        assert load_knowledge(path) == sk

    def test_blobs(self, tmp_path):
        blob = table("files", [column("payload", [b"\x00\x01", b"\xff", None])])
        sk = SchemaKnowledge("blobs", [blob], created_at=CREATED_AT)
        path = tmp_path / "blobs.knowledge.json"
        save_knowledge(sk, path)
        assert "0001" in path.read_text()
        loaded = load_knowledge(path)
        assert loaded.tables[0].columns[0].profile.sample_values == (
            b"\x00\x01",
            b"\xff",
            None,
        )

    def test_iterate(self, tmp_path):
        path = tmp_path / "retail.knowledge.json"
        save_knowledge(retail_knowledge(), path)
        knowledge = Knowledge(path)
        assert [tbl.name for tbl in knowledge] == [
            "customer",
            "orders",
            "product",
            "warehouse",
        ]

    def test_non_finite_values(self, tmp_path):
        inf = float("inf")
        sk = SchemaKnowledge(
            "odd",
            [table("t", [column("x", [1.0, inf, -inf, inf], "REAL")])],
            created_at=CREATED_AT,
        )
        path = tmp_path / "odd.knowledge.json"
        save_knowledge(sk, path)
        text = path.read_text()
        assert '"real": "inf"' in text and '"real": "-inf"' in text

        def refuse(constant):
            raise ValueError(f"{constant} is not strict JSON")

        json.loads(text, parse_constant=refuse)
        assert load_knowledge(path) == sk

    def test_non_finite_stats(self):
        with pytest.raises(InvariantError):
            NumericStats(0, float("inf"), 1, 1, 0, 0, 0)
        with pytest.raises(InvariantError):
            NumericStats(0, 1, float("nan"), 1, 0, 0, 1)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_knowledge(tmp_path / "nope.knowledge.json")

    def test_malformed(self, tmp_path):
        path = tmp_path / "bad.knowledge.json"
        path.write_text("{not json")
        with pytest.raises(FormatError):
            load_knowledge(path)
        path.write_text(json.dumps({"db_id": "x"}))
        with pytest.raises(FormatError):
            load_knowledge(path)

    def test_violated_invariant(self, tmp_path):
        path = tmp_path / "retail.knowledge.json"
        save_knowledge(retail_knowledge(), path)
        obj = json.loads(path.read_text())
        obj["tables"][0]["row_count"] = -1
        path.write_text(json.dumps(obj))
        with pytest.raises(InvariantError):
            load_knowledge(path)
        # a glossary key that was never sampled
        obj = json.loads(dumps_knowledge(retail_knowledge()))
        obj["tables"][0]["columns"][2]["semantics"]["enum_glossary"]["Q"] = "quiet"
        path.write_text(json.dumps(obj))
        with pytest.raises(InvariantError):
            load_knowledge(path)

    def test_unwritable(self, tmp_path):
        with pytest.raises(PersistenceError) as info:
            save_knowledge(retail_knowledge(), tmp_path / "no" / "such" / "dir.json")
        assert info.value.path == tmp_path / "no" / "such" / "dir.json"
