from __future__ import annotations
import re
import sqlite3
import logging
from pathlib import Path
from logging import Logger
from collections import Counter
from dataclasses import dataclass
from datetime import datetime
from typing import Callable, Optional
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .logging import getLogger
from .prompts import load_prompt
from .gateway import Gateway, GatewayError, StructuredOutputError
from .data import (
    Value,
    DatabaseError,
    EdgeSource,
    NumericStats,
    ColumnProfile,
    ColumnSemantics,
    ColumnKnowledge,
    TableKnowledge,
    ForeignKeyEdge,
    SchemaKnowledge,
    render_value,
    sqlite_sort_key,
)
from .data.knowledge import (
    ENUMERATION_MAX_DISTINCT,
    ENUMERATION_MIN_COVERAGE,
    INFERRED_FK_THRESHOLD,
    SAMPLE_ROWS_CAP,
    TOP_VALUES_CAP,
)


FULL_COUNT_MAX_ROWS = 1_000_000
RESERVOIR_SIZE = 100_000
PROMPT_SAMPLE_VALUES = 20
SIMPLE_IDENTIFIER = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")
NUMERIC_TEXT = re.compile(r"^[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?$")
NUMERIC_AFFINITIES = {"INTEGER", "REAL", "NUMERIC"}


def quote_identifier(name: str) -> str:
    return '"' + name.replace('"', '""') + '"'


def render_identifier(name: str) -> str:
    """
    Quote an identifier for display only if it isn't a plain word
    """
    return name if SIMPLE_IDENTIFIER.match(name) else quote_identifier(name)


def type_affinity(declared_type: str) -> str:
    """
    Determine the SQLite type affinity of a declared column type

    Parameters
    ----------
    declared_type : str
        The type written in the CREATE TABLE statement (possibly empty)

    Returns
    -------
    str
        One of INTEGER, TEXT, BLOB, REAL, or NUMERIC, following the rules SQLite
        itself applies, in the same order
    """
    kind = (declared_type or "").upper()
    if "INT" in kind:
        return "INTEGER"
    if "CHAR" in kind or "CLOB" in kind or "TEXT" in kind:
        return "TEXT"
    if "BLOB" in kind or not kind:
        return "BLOB"
    if "REAL" in kind or "FLOA" in kind or "DOUB" in kind:
        return "REAL"
    return "NUMERIC"


def storage_class(value: Value) -> Optional[str]:
    if value is None:
        return None
    if isinstance(value, (int, float)):
        return "numeric"
    if isinstance(value, str):
        return "text"
    return "blob"


def as_number(value: Value) -> Optional[float]:
    """
    Interpret a sampled value as a number, if it can be parsed as one
    """
    if isinstance(value, bool) or value is None or isinstance(value, bytes):
        return None
    if isinstance(value, (int, float)):
        return None if np.isnan(value) else float(value)
    text = value.strip()
    if NUMERIC_TEXT.match(text):
        return float(text)
    return None


@dataclass(frozen=True)
class DatabaseHandle:
    """
    A SQLite database file that is only ever opened read-only

    Attributes
    ----------
    path : Path
        The path to the database file
    read_only : bool
        Always True
    """

    path: Path
    read_only: bool = True

    def __post_init__(self):
        object.__setattr__(self, "path", Path(self.path))
        if not self.read_only:
            raise ValueError("Databases can only be opened read-only")

    @property
    def db_id(self) -> str:
        return self.path.stem

    def connect(self) -> sqlite3.Connection:
        """
        Open a new read-only connection to the database

        Raises
        ------
        DatabaseError
            If the file doesn't exist or can't be opened
        """
        if not self.path.is_file():
            raise DatabaseError(f"No database file at {self.path}")
        try:
            conn = sqlite3.connect(
                self.path.resolve().as_uri() + "?mode=ro",
                uri=True,
                check_same_thread=False,
            )
            conn.execute("PRAGMA query_only = ON")
            # reads the header, so a file that isn't a database fails here
            conn.execute("PRAGMA schema_version").fetchone()
        except sqlite3.Error as e:
            raise DatabaseError(f"Unable to open {self.path}: {e}") from e
        return conn


@dataclass(frozen=True)
class SamplingSpec:
    """
    How values are sampled from each column

    Attributes
    ----------
    n : int
        The number of values to sample per column
    strategy : str
        Always "distinct-first": every distinct value is taken before any repeat
    seed : int
        Seeds the row sample drawn from very large tables
    """

    n: int = 200
    strategy: str = "distinct-first"
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"The sample size must be at least 1, not {self.n}")
        if self.strategy != "distinct-first":
            raise ValueError(f"Unknown sampling strategy '{self.strategy}'")


@dataclass(frozen=True)
class ColumnInfo:
    name: str
    declared_type: str
    primary_key: bool = False


@dataclass(frozen=True)
class TableInfo:
    name: str
    columns: tuple
    row_count: int
    simplified_ddl: str
    sample_rows: tuple


@dataclass(frozen=True)
class Structure:
    """
    The raw structure of a database: its tables and declared foreign keys
    """

    tables: tuple
    fk_edges: tuple

    def table(self, name: str) -> Optional[TableInfo]:
        name = name.casefold()
        for tbl in self.tables:
            if tbl.name.casefold() == name:
                return tbl
        return None


def simplified_ddl(table: str, columns: list[ColumnInfo], fks: list[tuple]) -> str:
    """
    Render a CREATE TABLE statement with only columns, types and keys

    Parameters
    ----------
    table : str
        The name of the table
    columns : list[ColumnInfo]
        The columns of the table
    fks : list[tuple]
        (column, parent table, parent column) triples

    Returns
    -------
    str
        The statement, one column or constraint per line
    """
    pks = [col for col in columns if col.primary_key]
    lines = []
    for col in columns:
        line = "  " + render_identifier(col.name)
        if col.declared_type:
            line += " " + col.declared_type
        if col.primary_key and len(pks) == 1:
            line += " PRIMARY KEY"
        lines.append(line)
    if len(pks) > 1:
        names = ", ".join(render_identifier(col.name) for col in pks)
        lines.append(f"  PRIMARY KEY ({names})")
    for col, parent, parent_col in fks:
        lines.append(
            f"  FOREIGN KEY ({render_identifier(col)}) REFERENCES"
            f" {render_identifier(parent)}({render_identifier(parent_col)})"
        )
    return f"CREATE TABLE {render_identifier(table)} (\n" + ",\n".join(lines) + "\n)"


def _table_columns(conn: sqlite3.Connection, table: str) -> list[ColumnInfo]:
    rows = conn.execute(f"PRAGMA table_info({quote_identifier(table)})").fetchall()
    # rows are (cid, name, type, notnull, dflt_value, pk)
    return [ColumnInfo(row[1], row[2] or "", bool(row[5])) for row in rows]


def extract_structure(db: DatabaseHandle, log: Logger = None) -> Structure:
    """
    Read the tables, columns, declared foreign keys and row counts of a database

    Parameters
    ----------
    db : DatabaseHandle
        The database
    log : Logger, optional
        A logging instance

    Returns
    -------
    Structure
        Every user table in creation order, with declared foreign keys

    Raises
    ------
    DatabaseError
        If the database is unreadable or corrupt
    """
    if log is None:
        log = getLogger(name="profiler", level="ERROR")
    conn = db.connect()
    try:
        names = [
            row[0]
            for row in conn.execute(
                "SELECT name FROM sqlite_master WHERE type = 'table' AND name NOT"
                " LIKE 'sqlite\\_%' ESCAPE '\\' ORDER BY rowid"
            )
        ]
        columns = {name: _table_columns(conn, name) for name in names}
        lookup = {name.casefold(): name for name in names}
        tables, edges, seen = [], [], set()
        for name in names:
            fks = []
            fk_rows = conn.execute(
                f"PRAGMA foreign_key_list({quote_identifier(name)})"
            ).fetchall()
            # rows are (id, seq, table, from, to, on_update, on_delete, match)
            for fk in fk_rows:
                parent = lookup.get(fk[2].casefold())
                child_col = next(
                    (
                        c.name
                        for c in columns[name]
                        if c.name.casefold() == fk[3].casefold()
                    ),
                    None,
                )
                parent_col = None
                if parent is not None:
                    if fk[4] is None:
                        # an omitted parent column refers to the parent's primary key
                        pks = [c.name for c in columns[parent] if c.primary_key]
                        parent_col = pks[fk[1]] if fk[1] < len(pks) else None
                    else:
                        parent_col = next(
                            (
                                c.name
                                for c in columns[parent]
                                if c.name.casefold() == fk[4].casefold()
                            ),
                            None,
                        )
                if child_col is None or parent_col is None:
                    log.warning(
                        f"Skipping the foreign key of {name}.{fk[3]} to"
                        f" {fk[2]}.{fk[4]}, which refers to a missing column"
                    )
                    continue
                fks.append((child_col, parent, parent_col))
                key = ((name, child_col), (parent, parent_col))
                if key not in seen:
                    seen.add(key)
                    edges.append(ForeignKeyEdge(*key, source=EdgeSource.DECLARED))
            quoted = quote_identifier(name)
            row_count = conn.execute(f"SELECT COUNT(*) FROM {quoted}").fetchone()[0]
            sample_rows = conn.execute(
                f"SELECT * FROM {quoted} LIMIT {SAMPLE_ROWS_CAP}"
            ).fetchall()
            tables.append(
                TableInfo(
                    name=name,
                    columns=tuple(columns[name]),
                    row_count=row_count,
                    simplified_ddl=simplified_ddl(name, columns[name], fks),
                    sample_rows=tuple(sample_rows),
                )
            )
            log.debug(f"Table {name} has {row_count} rows")
    except sqlite3.Error as e:
        raise DatabaseError(f"Unable to read {db.path}: {e}") from e
    finally:
        conn.close()
    log.info(f"Found {len(tables)} tables and {len(edges)} declared foreign keys")
    return Structure(tables=tuple(tables), fk_edges=tuple(edges))


def _value_counts(
    conn: sqlite3.Connection, table: str, column: str, row_count: int, seed: int
) -> list[tuple[Value, int]]:
    qtable, qcol = quote_identifier(table), quote_identifier(column)
    if row_count <= FULL_COUNT_MAX_ROWS:
        return conn.execute(
            f"SELECT {qcol}, COUNT(*) FROM {qtable} GROUP BY {qcol}"
        ).fetchall()
    # count over a seeded uniform sample of rows instead of the whole table
    rng = np.random.default_rng(seed)
    picked = np.sort(rng.choice(row_count, size=RESERVOIR_SIZE, replace=False))
    counts = Counter()
    cursor = conn.execute(f"SELECT {qcol} FROM {qtable}")
    pos = 0
    for idx, (value,) in enumerate(cursor):
        if pos == len(picked):
            break
        if idx == picked[pos]:
            counts[value] += 1
            pos += 1
    return list(counts.items())


def sample_column(
    conn: sqlite3.Connection,
    table: str,
    column: str,
    spec: SamplingSpec = SamplingSpec(),
    row_count: int = None,
) -> list[Value]:
    """
    Sample the values of a column, taking every distinct value before any repeat

    Distinct values are ordered by frequency (descending) and then by value
    (ascending, in SQLite's order). If fewer than n distinct values exist, the
    remaining slots are filled with the further occurrences of each value, in the
    same order, until the sample is full or the column is exhausted.

    Parameters
    ----------
    conn : sqlite3.Connection
        A connection to the database
    table : str
        The name of the table
    column : str
        The name of the column
    spec : SamplingSpec, optional
        The sampling parameters
    row_count : int, optional
        The number of rows in the table, if already known

    Returns
    -------
    list[Value]
        Up to spec.n values, NULLs included

    Raises
    ------
    DatabaseError
        If the table or column doesn't exist
    """
    if isinstance(conn, DatabaseHandle):
        handle = conn
        conn = handle.connect()
        try:
            return sample_column(conn, table, column, spec, row_count)
        finally:
            conn.close()
    try:
        columns = _table_columns(conn, table)
        if not columns:
            raise DatabaseError(f"Unknown table '{table}'")
        if not any(col.name.casefold() == column.casefold() for col in columns):
            raise DatabaseError(f"Unknown column '{column}' in table '{table}'")
        if row_count is None:
            row_count = conn.execute(
                f"SELECT COUNT(*) FROM {quote_identifier(table)}"
            ).fetchone()[0]
        counts = _value_counts(conn, table, column, row_count, spec.seed)
    except sqlite3.Error as e:
        raise DatabaseError(f"Unable to sample {table}.{column}: {e}") from e
    counts.sort(key=lambda vc: (-vc[1], sqlite_sort_key(vc[0])))
    sample = [value for value, _ in counts[: spec.n]]
    for value, count in counts:
        if len(sample) >= spec.n:
            break
        sample.extend([value] * min(count - 1, spec.n - len(sample)))
    return sample


def profile_column(
    samples: list[Value], declared_type: str = "", total_row_count: int = None
) -> ColumnProfile:
    """
    Compute the profile of a column from its sampled values

    NULLs only count toward the null fraction. Numeric statistics cover every
    sampled value that parses as a finite number, and quantiles use the lower
    nearest-rank method.

    Parameters
    ----------
    samples : list[Value]
        The output of :py:func:`sample_column`
    declared_type : str, optional
        The declared type of the column
    total_row_count : int, optional
        The number of rows in the table

    Returns
    -------
    ColumnProfile
        The profile of the column
    """
    log = logging.getLogger("companion.profiler")
    if total_row_count is not None and len(samples) > total_row_count:
        log.warning(
            f"A sample of {len(samples)} values cannot come from {total_row_count} rows"
        )
    non_null = [v for v in samples if v is not None]
    counts = Counter(non_null)
    ranked = sorted(counts.items(), key=lambda vc: (-vc[1], sqlite_sort_key(vc[0])))
    top_values = ranked[:TOP_VALUES_CAP]

    stats = None
    numbers = [num for num in map(as_number, non_null) if num is not None]
    arr = np.array(numbers, dtype=np.float64)
    arr = arr[np.isfinite(arr)]
    if arr.size:
        q25, q50, q75 = np.quantile(arr, [0.25, 0.5, 0.75], method="inverted_cdf")
        with np.errstate(over="ignore", invalid="ignore"):
            summary = [arr.min(), arr.max(), arr.mean(), arr.var(), q25, q50, q75]
        if np.isfinite(summary).all():
            stats = NumericStats(*map(float, summary))
        else:
            log.warning("Skipping numeric stats that overflow a double")

    covered = sum(freq for _, freq in top_values)
    is_enumeration = bool(
        non_null
        and len(counts) <= ENUMERATION_MAX_DISTINCT
        and covered >= ENUMERATION_MIN_COVERAGE * len(non_null)
    )
    classes = {storage_class(v) for v in non_null}
    log.debug(
        f"Profiled a {declared_type or 'untyped'} column: {len(counts)} distinct of"
        f" {len(samples)} sampled"
    )
    return ColumnProfile(
        sample_size=len(samples),
        null_fraction=(len(samples) - len(non_null)) / len(samples) if samples else 0.0,
        distinct_count_in_sample=len(counts),
        numeric_stats=stats,
        top_values=top_values,
        is_enumeration=is_enumeration,
        sample_values=samples,
        mixed_types=len(classes) > 1,
    )


@dataclass(frozen=True)
class ColumnContext:
    """
    What the LLM sees when inducing the semantics of a column
    """

    table: str
    column: str
    declared_type: str
    table_columns: tuple
    profile: ColumnProfile

    def render(self) -> str:
        prof = self.profile
        lines = [
            f"Table: {self.table}",
            f"Columns of the table: {', '.join(self.table_columns)}",
            f"Column: {self.column} ({self.declared_type or 'no declared type'})",
            f"Sampled values: {prof.sample_size}, null fraction:"
            f" {prof.null_fraction:.3f}, distinct: {prof.distinct_count_in_sample},"
            f" enumeration: {'yes' if prof.is_enumeration else 'no'}",
        ]
        if prof.numeric_stats is not None:
            s = prof.numeric_stats
            lines.append(
                f"Numeric range: {s.min:g} to {s.max:g}, mean {s.mean:g}, quartiles"
                f" {s.q25:g} / {s.q50:g} / {s.q75:g}"
            )
        if prof.top_values:
            lines.append(
                "Most frequent values: "
                + ", ".join(f"{render_value(v)} ({f})" for v, f in prof.top_values)
            )
        distinct = list(dict.fromkeys(render_value(v) for v in prof.sample_values))
        lines.append("Sample: " + ", ".join(distinct[:PROMPT_SAMPLE_VALUES]))
        return "\n".join(lines)


def _optional_text(value) -> Optional[str]:
    if value is None:
        return None
    if not isinstance(value, str):
        raise StructuredOutputError(f"Expected text but got {value!r}")
    return value.strip() or None


def induce_semantics(
    gateway: Optional[Gateway], context: ColumnContext, log: Logger = None
) -> ColumnSemantics:
    """
    Ask the LLM what a column means

    Parameters
    ----------
    gateway : Gateway, optional
        The LLM gateway. Without one, the semantics are left empty.
    context : ColumnContext
        The column name, its table, its profile and its sample
    log : Logger, optional
        A logging instance

    Returns
    -------
    ColumnSemantics
        The description, aliases, unit and granularity hints, and a glossary
        restricted to values that were actually sampled. Empty if the LLM fails to
        answer in the expected format.
    """
    if log is None:
        log = getLogger(name="profiler", level="ERROR")
    name = f"{context.table}.{context.column}"
    if gateway is None:
        return ColumnSemantics()
    try:
        reply = gateway.ask_json(load_prompt("semantics"), context.render())
        aliases = reply.get("aliases") or []
        glossary = reply.get("enum_glossary") or {}
        description = reply.get("description") or ""
        if not isinstance(aliases, list) or not isinstance(glossary, dict):
            raise StructuredOutputError("aliases must be a list, enum_glossary a map")
        if not isinstance(description, str):
            raise StructuredOutputError("description must be text")
        observed = context.profile.observed_values
        kept = {str(k): str(v) for k, v in glossary.items() if str(k) in observed}
        if len(kept) < len(glossary):
            log.debug(
                f"Dropped {len(glossary) - len(kept)} glossary keys of {name} that"
                " were never sampled"
            )
        return ColumnSemantics(
            description=description.strip(),
            aliases=tuple(
                dict.fromkeys(
                    a.strip() for a in aliases if isinstance(a, str) and a.strip()
                )
            ),
            unit_hint=_optional_text(reply.get("unit_hint")),
            time_granularity_hint=_optional_text(reply.get("time_granularity_hint")),
            enum_glossary=kept,
        )
    except (GatewayError, StructuredOutputError) as e:
        log.warning(f"Leaving the semantics of {name} empty: {e}")
        return ColumnSemantics()


def name_tokens(name: str) -> list[str]:
    """
    Split an identifier into lowercase tokens at underscores and camel-case humps
    """
    name = re.sub(r"([a-z0-9])([A-Z])", r"\1_\2", name)
    return [tok for tok in re.split(r"[^A-Za-z0-9]+", name.lower()) if tok]


def jaro_winkler(a: str, b: str, prefix_scale: float = 0.1) -> float:
    """
    The Jaro-Winkler similarity of two strings (common prefix capped at 4)
    """
    if a == b:
        return 1.0
    if not a or not b:
        return 0.0
    window = max(max(len(a), len(b)) // 2 - 1, 0)
    a_hit = [False] * len(a)
    b_hit = [False] * len(b)
    matches = 0
    for i, char in enumerate(a):
        for j in range(max(0, i - window), min(len(b), i + window + 1)):
            if not b_hit[j] and b[j] == char:
                a_hit[i] = b_hit[j] = True
                matches += 1
                break
    if not matches:
        return 0.0
    a_seq = [char for char, hit in zip(a, a_hit) if hit]
    b_seq = [char for char, hit in zip(b, b_hit) if hit]
    transpositions = sum(x != y for x, y in zip(a_seq, b_seq)) / 2
    jaro = (
        matches / len(a) + matches / len(b) + (matches - transpositions) / matches
    ) / 3
    prefix = 0
    for x, y in zip(a[:4], b[:4]):
        if x != y:
            break
        prefix += 1
    return jaro + prefix * prefix_scale * (1 - jaro)


def name_similarity(a: str, b: str) -> float:
    """
    How similar two column names are

    Parameters
    ----------
    a : str
        A column name
    b : str
        Another column name

    Returns
    -------
    float
        The larger of the Jaro-Winkler similarity of the lowercased names and the
        Jaccard overlap of their token sets, in [0, 1]
    """
    whole = jaro_winkler(a.lower(), b.lower())
    ta, tb = set(name_tokens(a)), set(name_tokens(b))
    overlap = len(ta & tb) / len(ta | tb) if ta | tb else 0.0
    return max(whole, overlap)


def _effective_affinity(col: ColumnInfo, profile: Optional[ColumnProfile]) -> str:
    affinity = type_affinity(col.declared_type)
    if col.declared_type or profile is None:
        return affinity
    # untyped columns take the storage class their values actually have
    classes = {storage_class(v) for v in profile.sample_values} - {None}
    if classes == {"numeric"}:
        return "NUMERIC"
    if classes == {"text"}:
        return "TEXT"
    return affinity


def types_compatible(a: str, b: str) -> bool:
    """
    Whether two type affinities can hold joinable values
    """
    if a == b or "BLOB" in (a, b):
        return True
    return a in NUMERIC_AFFINITIES and b in NUMERIC_AFFINITIES


def infer_fk_edges(
    structure: Structure,
    profiles: dict[tuple[str, str], ColumnProfile] = None,
    similarity: Callable[[str, str], float] = name_similarity,
    threshold: float = INFERRED_FK_THRESHOLD,
) -> list[ForeignKeyEdge]:
    """
    Propose join edges between similarly-named columns of different tables

    Parameters
    ----------
    structure : Structure
        The output of :py:func:`extract_structure`
    profiles : dict[tuple[str, str], ColumnProfile], optional
        The profile of each (table, column). Used to find the affinity of columns
        without a declared type.
    similarity : Callable[[str, str], float], optional
        The metric comparing two column names
    threshold : float, optional
        The minimum similarity of an inferred edge

    Returns
    -------
    list[ForeignKeyEdge]
        At most one edge per unordered pair of columns, for every pair with
        compatible types, enough similarity, and no declared edge between them.
        The edge points at the primary key side if exactly one side is a primary
        key and from the lexicographically smaller side otherwise.
    """
    profiles = profiles or {}
    declared = set()
    for edge in structure.fk_edges:
        declared.add((edge.origin, edge.target))
        declared.add((edge.target, edge.origin))
    columns = [
        (tbl.name, col, _effective_affinity(col, profiles.get((tbl.name, col.name))))
        for tbl in structure.tables
        for col in tbl.columns
    ]
    edges = []
    for i, (t1, c1, aff1) in enumerate(columns):
        for t2, c2, aff2 in columns[i + 1 :]:
            if t1 == t2 or not types_compatible(aff1, aff2):
                continue
            a, b = (t1, c1.name), (t2, c2.name)
            if (a, b) in declared:
                continue
            score = round(similarity(c1.name, c2.name), 12)
            if score < threshold:
                continue
            if c1.primary_key != c2.primary_key:
                origin, target = (b, a) if c1.primary_key else (a, b)
            else:
                origin, target = sorted([a, b])
            edges.append(
                ForeignKeyEdge(
                    origin,
                    target,
                    source=EdgeSource.INFERRED,
                    similarity=min(score, 1.0),
                )
            )
    return edges


def _mine_column(
    db: DatabaseHandle,
    table: TableInfo,
    column: ColumnInfo,
    gateway: Optional[Gateway],
    spec: SamplingSpec,
    log: Logger,
) -> ColumnKnowledge:
    conn = db.connect()
    try:
        samples = sample_column(conn, table.name, column.name, spec, table.row_count)
    finally:
        conn.close()
    profile = profile_column(samples, column.declared_type, table.row_count)
    context = ColumnContext(
        table=table.name,
        column=column.name,
        declared_type=column.declared_type,
        table_columns=tuple(col.name for col in table.columns),
        profile=profile,
    )
    semantics = induce_semantics(gateway, context, log=log)
    return ColumnKnowledge(column.name, column.declared_type, profile, semantics)


def mine_schema_knowledge(
    db: DatabaseHandle,
    gateway: Optional[Gateway] = None,
    spec: SamplingSpec = SamplingSpec(),
    created_at: datetime = None,
    workers: int = 4,
    similarity: Callable[[str, str], float] = name_similarity,
    log: Logger = None,
) -> SchemaKnowledge:
    """
    Mine the schema-knowledge of a database

    Extract the structure, then sample, profile and induce the semantics of every
    column, and finally infer join edges. Columns are processed concurrently, each
    with its own connection, but the output is assembled in schema order.

    Parameters
    ----------
    db : DatabaseHandle
        The database
    gateway : Gateway, optional
        The LLM gateway used to induce semantics
    spec : SamplingSpec, optional
        How to sample each column
    created_at : datetime, optional
        The creation stamp of the knowledge. See
        :py:func:`~.data.knowledge.resolve_created_at`
    workers : int, optional
        The number of columns to process concurrently
    similarity : Callable[[str, str], float], optional
        The metric used to infer join edges
    log : Logger, optional
        A logging instance

    Returns
    -------
    SchemaKnowledge
        The mined knowledge

    Raises
    ------
    DatabaseError
        If the database cannot be read
    """
    if log is None:
        log = getLogger(name="profiler", level="ERROR")

    log.info(f"Extracting the structure of {db.path}")
    structure = extract_structure(db, log=log)

    log.info("Sampling and profiling columns")
    with ThreadPoolExecutor(max_workers=max(workers, 1)) as pool:
        futures = [
            [
                pool.submit(_mine_column, db, tbl, col, gateway, spec, log)
                for col in tbl.columns
            ]
            for tbl in structure.tables
        ]
        mined = [[future.result() for future in cols] for cols in futures]

    profiles = {
        (tbl.name, col.name): col.profile
        for tbl, cols in zip(structure.tables, mined)
        for col in cols
    }
    log.info("Inferring join edges")
    inferred = infer_fk_edges(structure, profiles, similarity=similarity)
    log.info(f"Inferred {len(inferred)} join edges")

    tables = [
        TableKnowledge(
            name=tbl.name,
            simplified_ddl=tbl.simplified_ddl,
            row_count=tbl.row_count,
            columns=cols,
            sample_rows=tbl.sample_rows,
        )
        for tbl, cols in zip(structure.tables, mined)
    ]
    return SchemaKnowledge(
        db_id=db.db_id,
        tables=tables,
        fk_edges=list(structure.fk_edges) + inferred,
        created_at=created_at,
    )
