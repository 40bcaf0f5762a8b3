from __future__ import annotations
import re
import json
from enum import Enum
from logging import Logger
from abc import ABC, abstractmethod
from itertools import combinations
from dataclasses import dataclass
from typing import Optional

import networkx as nx

from .logging import getLogger
from .prompts import load_prompt
from .profiler import name_tokens, render_identifier
from .gateway import Gateway, GatewayError, StructuredOutputError
from .fewshot import (
    TOP_K,
    ScoredEntry,
    retrieve_similar,
    render_fewshot_block,
)
from .router import (
    DEFAULT_TAU,
    NUMERIC_CUES,
    EvidenceType,
    route,
    find_phrase,
    phrase_pattern,
    name_variants,
    mentions_column,
    mentioned_values,
    enumeration_columns,
)
from .data import (
    DataError,
    EdgeSource,
    InvariantError,
    FewShotEntry,
    FewShotLibrary,
    ForeignKeyEdge,
    SchemaKnowledge,
    ColumnKnowledge,
    render_value,
    sqlite_sort_key,
)


EVIDENCE_CHAR_CAP = 400
INSTRUCTION = "Answer the question with a single SQLite query over the database below."
SQL_FENCE = re.compile(r"```[ \t]*(?:sql|sqlite|SQL)?[ \t]*\n?(.*?)```", re.DOTALL)
SQL_START = r"\b(?:SELECT|WITH)\b.*?(?:;|$)"

TIME_OPERATORS = {
    "after": ">",
    "since": ">=",
    "from": ">=",
    "before": "<",
    "prior to": "<",
    "until": "<=",
    "by": "<=",
    "in": "=",
    "during": "=",
}
RANGE_OPERATORS = {
    "more than": ">",
    "greater than": ">",
    "higher than": ">",
    "over": ">",
    "above": ">",
    "exceeding": ">",
    "at least": ">=",
    "no less than": ">=",
    "less than": "<",
    "fewer than": "<",
    "lower than": "<",
    "below": "<",
    "under": "<",
    "at most": "<=",
    "no more than": "<=",
}
NUMBER = r"-?\d+(?:\.\d+)?"


def _alternatives(words) -> str:
    return "|".join(re.escape(w) for w in sorted(words, key=len, reverse=True))


TIME_MENTION = re.compile(
    rf"\b(?P<cue>{_alternatives(TIME_OPERATORS)})\s+(?:the\s+year\s+)?"
    r"(?P<year>(?:1[6-9]|20)\d\d)\b",
    re.IGNORECASE,
)
BETWEEN_MENTION = re.compile(
    rf"\bbetween\s+(?P<low>{NUMBER})\s+and\s+(?P<high>{NUMBER})\b", re.IGNORECASE
)
RANGE_MENTION = re.compile(
    rf"\b(?P<cue>{_alternatives(RANGE_OPERATORS)})\s+(?P<value>{NUMBER})\b",
    re.IGNORECASE,
)
TEMPORAL_NAMES = {"year", "date", "time", "day", "month", "timestamp"}

# what each arithmetic cue asks for
CUE_INTROS = {
    "average": "Compute the average with AVG over",
    "total": "Compute the total with SUM over",
    "ratio": "Compute the ratio by dividing, casting the numerator to REAL, using",
    "rate": "Compute the rate by dividing, casting the numerator to REAL, using",
    "percentage": "Compute the percentage as CAST(part AS REAL) * 100 / whole using",
    "difference": "Compute the difference by subtracting values of",
    "per": "Aggregate per group with GROUP BY over",
    "rank": "Rank rows with ORDER BY or RANK() on",
    "top": "Select the top rows with ORDER BY ... DESC LIMIT on",
}

SKELETON_PATTERNS = (
    ("( SELECT", "a subquery"),
    (" JOIN ", "joins"),
    ("CASE WHEN", "conditional aggregation with CASE WHEN"),
    ("CAST (", "a CAST to REAL before dividing"),
    ("GROUP BY", "grouping with GROUP BY"),
    ("HAVING", "a HAVING filter on groups"),
    ("ORDER BY", "ordering with ORDER BY"),
    ("LIMIT", "a LIMIT on the result"),
    ("DISTINCT", "DISTINCT values"),
    (" UNION ", "a UNION of queries"),
    (" INTERSECT ", "an INTERSECT of queries"),
    (" EXCEPT ", "an EXCEPT of queries"),
)
WINDOW_FUNCTION = re.compile(r"\b([A-Z_]+) \( [^()]*\) OVER\b")


class ExtractionError(ValueError):
    """
    A completion that doesn't contain any SQL
    """

    pass


class GenerationError(Exception):
    """
    A failure to obtain SQL from the LLM
    """

    pass


class EvidenceKind(str, Enum):
    """
    The kinds of evidence items, declared in the order they appear in a bundle
    """

    ALIAS = "AliasMapping"
    SCHEMA = "SchemaConsistency"
    ENUM = "EnumDictionary"
    NUMERIC = "NumericTemplate"
    CONSTRAINT = "SemanticConstraint"
    DOMAIN = "DomainNote"
    LOGIC = "LogicalCompletion"


KIND_ORDER = {kind: idx for idx, kind in enumerate(EvidenceKind)}


def truncate_evidence(text: str, cap: int = EVIDENCE_CHAR_CAP) -> str:
    """
    Collapse whitespace and cut text down to at most cap characters

    The cut happens after the last complete sentence that fits, else at the last
    clause separator, else at the last space
    """
    text = " ".join(text.split())
    if len(text) <= cap:
        return text
    head = text[:cap]
    ends = [m.end() for m in re.finditer(r"[.!?](?=\s|$)", head)]
    if ends:
        return head[: ends[-1]]
    for sep in ("; ", ", ", " "):
        idx = head.rfind(sep)
        if idx > 0:
            return head[:idx] + "."
    return head


@dataclass(frozen=True)
class EvidenceItem:
    """
    A single natural-language evidence sentence

    Attributes
    ----------
    kind : EvidenceKind
        The kind of evidence
    text : str
        One line of text, at most :py:data:`EVIDENCE_CHAR_CAP` characters
    referenced : tuple[tuple[str, str]]
        The (table, column) pairs the text is about
    provenance : str
        The name of the operation that produced the item
    """

    kind: EvidenceKind
    text: str
    referenced: tuple = tuple()
    provenance: str = ""

    def __post_init__(self):
        object.__setattr__(self, "kind", EvidenceKind(self.kind))
        object.__setattr__(self, "text", truncate_evidence(self.text))
        object.__setattr__(
            self, "referenced", tuple(tuple(ref) for ref in self.referenced)
        )

    def ungrounded(self, sk: SchemaKnowledge) -> list[tuple[str, str]]:
        """
        The referenced (table, column) pairs that don't exist in a database
        """
        return [ref for ref in self.referenced if not sk.has_column(*ref)]

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "text": self.text,
            "referenced": [list(ref) for ref in self.referenced],
            "provenance": self.provenance,
        }


@dataclass(frozen=True)
class EvidenceBundle:
    """
    The substitute evidence of a question

    Attributes
    ----------
    question : str
        The original question
    rewritten_question : str, optional
        The question with aliases replaced by column names, if any were found
    items : tuple[EvidenceItem]
        The evidence items, in canonical kind order
    fewshot : tuple[FewShotEntry]
        The retrieved few-shot entries, in retrieval order
    """

    question: str
    rewritten_question: Optional[str] = None
    items: tuple = tuple()
    fewshot: tuple = tuple()

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))
        object.__setattr__(
            self,
            "fewshot",
            tuple(e.entry if isinstance(e, ScoredEntry) else e for e in self.fewshot),
        )
        order = [KIND_ORDER[item.kind] for item in self.items]
        if order != sorted(order):
            raise InvariantError("Evidence items must appear in canonical kind order")

    def to_dict(self) -> dict:
        return {
            "question": self.question,
            "rewritten_question": self.rewritten_question,
            "items": [item.to_dict() for item in self.items],
            "fewshot": [entry.id for entry in self.fewshot],
        }

    def dumps(self) -> str:
        """
        Serialize the bundle as a single line of JSON
        """
        return json.dumps(self.to_dict(), ensure_ascii=False)

    @property
    def lines(self) -> list[str]:
        return [item.text for item in self.items]

    @property
    def referenced_tables(self) -> set[str]:
        return {ref[0].casefold() for item in self.items for ref in item.referenced}


@dataclass(frozen=True)
class JoinPath:
    """
    A simple path of join edges between two tables

    Attributes
    ----------
    edges : tuple[ForeignKeyEdge]
        The edges, from the first endpoint to the second. Each edge may point either
        way.
    endpoints : tuple[str, str]
        The tables at either end of the path
    """

    edges: tuple
    endpoints: tuple

    def __post_init__(self):
        object.__setattr__(self, "edges", tuple(self.edges))
        object.__setattr__(self, "endpoints", tuple(self.endpoints))
        tables = self.tables
        if not self.edges or len(set(tables)) != len(tables):
            raise InvariantError(f"A join path must be simple and non-empty: {tables}")
        if tables[-1] != self.endpoints[1]:
            raise InvariantError(f"The join path doesn't end at {self.endpoints[1]}")

    @property
    def tables(self) -> list[str]:
        """
        The tables visited by the path, in order

        Raises
        ------
        InvariantError
            If two consecutive edges don't share a table
        """
        tables = [self.endpoints[0]]
        for edge in self.edges:
            here = tables[-1]
            if edge.origin[0] == here:
                tables.append(edge.target[0])
            elif edge.target[0] == here:
                tables.append(edge.origin[0])
            else:
                raise InvariantError(f"Join edge {edge.tables} doesn't touch {here}")
        return tables


def _edge_key(edge: ForeignKeyEdge) -> tuple:
    return (edge.source is not EdgeSource.DECLARED, edge.origin, edge.target)


def join_graph(sk: SchemaKnowledge) -> nx.Graph:
    """
    Build the undirected graph of tables joined by foreign key edges

    Between two tables only the best edge is kept: a declared edge over an inferred
    one, and then the lexicographically smallest
    """
    graph = nx.Graph()
    graph.add_nodes_from(tbl.name for tbl in sk.tables)
    for edge in sorted(sk.fk_edges, key=_edge_key):
        a, b = sk.table(edge.origin[0]).name, sk.table(edge.target[0]).name
        if a == b or graph.has_edge(a, b):
            continue
        inferred = int(edge.source is EdgeSource.INFERRED)
        graph.add_edge(a, b, edge=edge, inferred=inferred)
    return graph


def find_join_paths(
    sk: SchemaKnowledge, tables: set[str]
) -> tuple[list[JoinPath], list[tuple[str, str]]]:
    """
    Find the shortest join path between every pair of tables

    Among the shortest paths of a pair, the one with the fewest inferred edges is
    chosen, and then the one whose sequence of table names comes first.

    Parameters
    ----------
    sk : SchemaKnowledge
        The knowledge of the database
    tables : set[str]
        The tables to connect

    Returns
    -------
    tuple[list[JoinPath], list[tuple[str, str]]]
        A path for each connected pair and the pairs with no path between them, both
        ordered by table name

    Raises
    ------
    ValueError
        If a table doesn't exist in the database
    """
    names = set()
    for name in tables:
        tbl = sk.table(name)
        if tbl is None:
            raise ValueError(f"Database {sk.db_id} has no table '{name}'")
        names.add(tbl.name)
    graph = join_graph(sk)
    paths, unreachable = [], []
    for source, target in combinations(sorted(names), 2):
        try:
            candidates = list(nx.all_shortest_paths(graph, source, target))
        except nx.NetworkXNoPath:
            unreachable.append((source, target))
            continue
        best = min(
            candidates,
            key=lambda nodes: (
                sum(graph.edges[a, b]["inferred"] for a, b in zip(nodes, nodes[1:])),
                tuple(nodes),
            ),
        )
        edges = [graph.edges[a, b]["edge"] for a, b in zip(best, best[1:])]
        paths.append(JoinPath(edges, (source, target)))
    return paths, unreachable


def _via(edge: ForeignKeyEdge) -> str:
    if edge.origin[1].casefold() == edge.target[1].casefold():
        return edge.origin[1]
    return f"{edge.origin[0]}.{edge.origin[1]} = {edge.target[0]}.{edge.target[1]}"


def gen_schema_consistency(paths: list[JoinPath]) -> list[EvidenceItem]:
    """
    Describe each join path in a sentence

    ex: Table customer is linked to order via customer_id, then to item via order_id.
    """
    items = []
    for path in paths:
        tables = path.tables
        text = f"Table {tables[0]} is linked to {tables[1]} via {_via(path.edges[0])}"
        for table, edge in zip(tables[2:], path.edges[1:]):
            text += f", then to {table} via {_via(edge)}"
        referenced = [end for edge in path.edges for end in (edge.origin, edge.target)]
        items.append(
            EvidenceItem(
                EvidenceKind.SCHEMA,
                text + ".",
                tuple(dict.fromkeys(referenced)),
                "find_join_paths",
            )
        )
    return items


def mentioned_tables(question: str, sk: SchemaKnowledge) -> set[str]:
    """
    The tables whose name, or the name or alias of one of whose columns, appears
    in a question
    """
    found = set()
    for tbl in sk.tables:
        if any(find_phrase(question, v) for v in name_variants(tbl.name)) or any(
            mentions_column(question, col) for col in tbl.columns
        ):
            found.add(tbl.name)
    return found


def _number(value: float) -> str:
    value = float(value)
    return str(int(value)) if value.is_integer() else f"{value:.6g}"


def _raw_value(col: ColumnKnowledge, rendered: str):
    for value in col.profile.sample_values:
        if value is not None and render_value(value) == rendered:
            return value
    return rendered


def sql_literal(col: ColumnKnowledge, rendered: str) -> str:
    """
    Write a rendered value of a column as a SQL literal of the right type
    """
    value = _raw_value(col, rendered)
    if isinstance(value, str):
        return "'" + value.replace("'", "''") + "'"
    if isinstance(value, bytes):
        return f"X'{value.hex()}'"
    return render_value(value)


def _describe(col: ColumnKnowledge, fallback: str) -> str:
    return col.semantics.description.strip().rstrip(".") or fallback


def _is_temporal(col: ColumnKnowledge) -> bool:
    if col.semantics.time_granularity_hint:
        return True
    declared = col.declared_type.upper()
    if "DATE" in declared or "TIME" in declared:
        return True
    return bool(TEMPORAL_NAMES & set(name_tokens(col.name)))


def _year_phrase(op: str, year: int) -> str:
    return {
        ">": f"{year + 1} and later",
        ">=": f"{year} and later",
        "<": f"{year - 1} and earlier",
        "<=": f"{year} and earlier",
        "=": f"the year {year}",
    }[op]


def _year_condition(col: ColumnKnowledge, op: str, year: int) -> str:
    name = render_identifier(col.name)
    granularity = (col.semantics.time_granularity_hint or "").lower()
    stats = col.profile.numeric_stats
    if granularity == "year" or (
        stats is not None and 1000 <= stats.min and stats.max <= 3000
    ):
        return f"{name} {op} {year}"
    return {
        ">": f"{name} >= '{year + 1}-01-01'",
        ">=": f"{name} >= '{year}-01-01'",
        "<": f"{name} < '{year}-01-01'",
        "<=": f"{name} < '{year + 1}-01-01'",
        "=": f"{name} LIKE '{year}%'",
    }[op]


def _pick_column(question: str, candidates: list, position: int = None):
    """
    Choose among (table, column) candidates: those mentioned in the question first,
    closest to position if given, then in schema order
    """

    def key(pair):
        tbl, col = pair
        terms = name_variants(col.name) | {a.lower() for a in col.semantics.aliases}
        hits = []
        for term in terms:
            match = find_phrase(question, term)
            if match is not None:
                hits.append(match.start())
        if hits:
            if position is None:
                return (0, 0)
            return (0, min(abs(hit - position) for hit in hits))
        if any(find_phrase(question, v) for v in name_variants(tbl.name)):
            return (1, 0)
        return (2, 0)

    return min(candidates, key=key) if candidates else None


def _phrase_constraint(
    gateway: Optional[Gateway], stub: dict, template: str, log: Logger
) -> str:
    if gateway is None:
        return template
    try:
        reply = gateway.ask(
            load_prompt("constraint"), json.dumps(stub, ensure_ascii=False)
        )
    except GatewayError as e:
        log.warning(f"Rendering a constraint from its template: {e}")
        return template
    lines = [line.strip() for line in reply.splitlines() if line.strip()]
    return lines[0] if lines else template


def gen_semantic_constraint(
    question: str,
    sk: SchemaKnowledge,
    gateway: Optional[Gateway] = None,
    log: Logger = None,
) -> list[EvidenceItem]:
    """
    Turn the time, range and category conditions of a question into constraints

    Each condition is grounded in a column: a year is matched to a temporal column
    (by granularity hint, type or name), a number with a comparison cue to a
    mentioned numeric column, and a category to a value of an enumeration column.
    The LLM phrases each constraint from a structured stub. Without a gateway, or if
    it fails, the stub is rendered with a fixed template.

    Parameters
    ----------
    question : str
        The question
    sk : SchemaKnowledge
        The knowledge of the question's database
    gateway : Gateway, optional
        The LLM gateway
    log : Logger, optional
        A logging instance

    Returns
    -------
    list[EvidenceItem]
        A SemanticConstraint item per grounded condition
    """
    if log is None:
        log = getLogger(name="evidence", level="ERROR")
    items = []

    def emit(stub: dict, template: str, ref: tuple):
        text = _phrase_constraint(gateway, stub, template, log)
        items.append(
            EvidenceItem(
                EvidenceKind.CONSTRAINT, text, (ref,), "gen_semantic_constraint"
            )
        )

    years = set()
    temporal = [(t, c) for t, c in sk.columns() if _is_temporal(c)]
    for match in TIME_MENTION.finditer(question):
        op = TIME_OPERATORS[match.group("cue").lower()]
        year = int(match.group("year"))
        years.add(match.start("year"))
        pick = _pick_column(question, temporal, match.start())
        if pick is None:
            log.warning(f"No column matches the time condition '{match.group(0)}'")
            continue
        tbl, col = pick
        granularity = col.semantics.time_granularity_hint or "time"
        desc = _describe(col, f"the {granularity} of each {tbl.name} record")
        condition = _year_condition(col, op, year)
        stub = {
            "table": tbl.name,
            "column": col.name,
            "meaning": desc,
            "condition": condition,
            "covers": _year_phrase(op, year),
        }
        emit(
            stub,
            f"Column {col.name} denotes {desc}; records with {condition}"
            f" correspond to {_year_phrase(op, year)}.",
            (tbl.name, col.name),
        )

    numeric = [
        (t, c)
        for t, c in sk.columns()
        if c.profile.numeric_stats is not None
        and not c.profile.is_enumeration
        and mentions_column(question, c)
    ]
    ranges = [
        (m, "BETWEEN", f"{m.group('low')} AND {m.group('high')}")
        for m in BETWEEN_MENTION.finditer(question)
    ] + [
        (m, RANGE_OPERATORS[m.group("cue").lower()], m.group("value"))
        for m in RANGE_MENTION.finditer(question)
        if m.start("value") not in years
    ]
    for match, op, value in sorted(ranges, key=lambda r: r[0].start()):
        pick = _pick_column(question, numeric, match.start())
        if pick is None:
            log.warning(f"No column matches the range condition '{match.group(0)}'")
            continue
        tbl, col = pick
        stats = col.profile.numeric_stats
        name = render_identifier(col.name)
        desc = _describe(col, f"numeric values of {tbl.name}")
        stub = {
            "table": tbl.name,
            "column": col.name,
            "meaning": desc,
            "condition": f"{name} {op} {value}",
            "mention": match.group(0),
            "observed_range": [stats.min, stats.max],
        }
        emit(
            stub,
            f'Column {col.name} holds {desc}; "{match.group(0)}" means {name} {op}'
            f" {value}. Observed values range from {_number(stats.min)} to"
            f" {_number(stats.max)}.",
            (tbl.name, col.name),
        )

    for tbl, col in enumeration_columns(sk):
        for _, phrase, value in mentioned_values(question, col):
            literal = sql_literal(col, value)
            name = render_identifier(col.name)
            stub = {
                "table": tbl.name,
                "column": col.name,
                "mention": phrase,
                "condition": f"{name} = {literal}",
            }
            emit(
                stub,
                f'In table {tbl.name}, "{phrase}" corresponds to {name} = {literal}.',
                (tbl.name, col.name),
            )
    return items


def _first_cue(question: str) -> Optional[str]:
    hits = []
    for cue in NUMERIC_CUES:
        match = find_phrase(question, cue)
        if match is not None:
            hits.append((match.start(), cue))
    return min(hits)[1] if hits else None


def _conditional_count(question: str, cue: str, sk: SchemaKnowledge):
    """
    Spell out a ratio or percentage of categories as conditional counts
    """
    best = None
    for tbl, col in enumeration_columns(sk):
        mentioned = mentioned_values(question, col)
        needed = 2 if cue in ("ratio", "rate") else 1
        if len(mentioned) >= needed and (best is None or len(mentioned) > len(best[2])):
            best = (tbl, col, mentioned)
    if best is None:
        return None
    tbl, col, mentioned = best
    name = render_identifier(col.name)
    literals = [sql_literal(col, value) for _, _, value in mentioned]

    def count(literal):
        return f"SUM(CASE WHEN {name} = {literal} THEN 1 ELSE 0 END)"

    if cue in ("ratio", "rate"):
        formula = f"CAST({count(literals[0])} AS REAL) / {count(literals[1])}"
        named = f"{mentioned[0][1]} over {mentioned[1][1]}"
    else:
        formula = f"CAST({count(literals[0])} AS REAL) * 100 / COUNT(*)"
        named = f"{mentioned[0][1]} among all rows"
    text = f"The {cue} of {named} in table {tbl.name} is {formula}."
    return EvidenceItem(
        EvidenceKind.NUMERIC, text, ((tbl.name, col.name),), "gen_numeric_template"
    )


def gen_numeric_template(question: str, sk: SchemaKnowledge) -> list[EvidenceItem]:
    """
    Explain how to compute the quantity a question asks for

    The first arithmetic cue of the question names the operation. A ratio or
    percentage between categories of an enumeration column becomes a
    conditional-count formula; otherwise the numeric columns mentioned by the
    question are named along with their observed range and quartiles.

    Returns
    -------
    list[EvidenceItem]
        At most one NumericTemplate item
    """
    cue = _first_cue(question)
    if cue is None:
        return []
    if cue in ("ratio", "rate", "percentage"):
        item = _conditional_count(question, cue, sk)
        if item is not None:
            return [item]
    candidates = [
        (tbl, col)
        for tbl, col in sk.columns()
        if col.profile.numeric_stats is not None
        and not col.profile.is_enumeration
        and mentions_column(question, col)
    ]
    if not candidates:
        return []
    facts = []
    for tbl, col in candidates:
        stats = col.profile.numeric_stats
        facts.append(
            f"{tbl.name}.{col.name} (observed range {_number(stats.min)} to"
            f" {_number(stats.max)}, quartiles {_number(stats.q25)}/"
            f"{_number(stats.q50)}/{_number(stats.q75)})"
        )
    return [
        EvidenceItem(
            EvidenceKind.NUMERIC,
            f"{CUE_INTROS[cue]} " + "; ".join(facts) + ".",
            tuple((tbl.name, col.name) for tbl, col in candidates),
            "gen_numeric_template",
        )
    ]


def gen_enum_dictionary(question: str, sk: SchemaKnowledge) -> list[EvidenceItem]:
    """
    List the full value dictionary of every enumeration column the question names

    Returns
    -------
    list[EvidenceItem]
        An EnumDictionary item per enumeration column whose labels or values
        overlap the question. Items map each label to its stored value, or list the
        value domain of columns without a glossary.
    """
    items = []
    for tbl, col in enumeration_columns(sk):
        if not mentioned_values(question, col):
            continue
        name = render_identifier(col.name)
        glossary = col.semantics.enum_glossary
        if glossary:
            values = sorted(glossary, key=lambda v: sqlite_sort_key(_raw_value(col, v)))
            text = f"In table {tbl.name}, " + "; ".join(
                f"{glossary[v]} refers to {name} = {sql_literal(col, v)}"
                for v in values
            )
        else:
            values = [render_value(v) for v, _ in col.profile.top_values]
            text = f"Column {name} of table {tbl.name} takes the values " + ", ".join(
                sql_literal(col, v) for v in values
            )
        items.append(
            EvidenceItem(
                EvidenceKind.ENUM,
                text + ".",
                ((tbl.name, col.name),),
                "gen_enum_dictionary",
            )
        )
    return items


def gen_alias_rewrite(
    question: str, sk: SchemaKnowledge
) -> tuple[str, list[EvidenceItem]]:
    """
    Replace the aliases in a question with the names of their columns

    Longer aliases win over the shorter aliases they overlap. An alias shared by
    several columns refers to the first of them in schema order.

    Returns
    -------
    tuple[str, list[EvidenceItem]]
        The rewritten question and an AliasMapping item per substitution
    """
    aliases = {}
    for tbl, col in sk.columns():
        for alias in col.semantics.aliases:
            alias = alias.strip()
            if alias and alias.lower() not in name_variants(col.name):
                aliases.setdefault(alias.lower(), (alias, tbl, col))
    spans = []
    for key in sorted(aliases, key=lambda a: (-len(a), a)):
        for match in re.finditer(phrase_pattern(key), question, flags=re.IGNORECASE):
            start, end = match.span()
            if all(end <= s or start >= e for s, e, _ in spans):
                spans.append((start, end, aliases[key]))
    spans.sort(key=lambda span: span[0])
    rewritten, items, last = "", [], 0
    for start, end, (alias, tbl, col) in spans:
        rewritten += question[last:start] + col.name
        last = end
        items.append(
            EvidenceItem(
                EvidenceKind.ALIAS,
                f'"{question[start:end]}" refers to column {col.name} of table'
                f" {tbl.name}.",
                ((tbl.name, col.name),),
                "gen_alias_rewrite",
            )
        )
    return rewritten + question[last:], items


def describe_skeleton(skeleton: str) -> list[str]:
    """
    Name the notable constructs of a SQL skeleton, in a fixed order
    """
    found = [desc for pattern, desc in SKELETON_PATTERNS if pattern in skeleton]
    windows = list(dict.fromkeys(WINDOW_FUNCTION.findall(skeleton)))
    if windows:
        found.insert(
            1 if "a subquery" in found else 0,
            "the window function " + ", ".join(f"{w}()" for w in windows),
        )
    return found


def gen_logical_completion(
    lib: FewShotLibrary,
    question: str,
    k: int = TOP_K,
    db_id: str = None,
    retrieved: list[ScoredEntry] = None,
) -> list[EvidenceItem]:
    """
    Summarize how the most similar solved question was answered

    Parameters
    ----------
    lib : FewShotLibrary
        The few-shot library
    question : str
        The question
    k : int, optional
        The number of entries to retrieve
    db_id : str, optional
        The database of the question
    retrieved : list[ScoredEntry], optional
        Entries already retrieved for this question

    Returns
    -------
    list[EvidenceItem]
        A LogicalCompletion item describing the solution skeleton of the best match,
        or nothing if the library is empty
    """
    if retrieved is None:
        retrieved = retrieve_similar(lib, question, k, db_id) if len(lib) else []
    if not retrieved:
        return []
    best = retrieved[0].entry
    constructs = describe_skeleton(best.sql_skeleton)
    text = f'The similar question "{best.normalized_question}" was solved with '
    if constructs:
        text += ", then ".join(constructs) + "."
    else:
        text += "a single SELECT."
    text += f" Its SQL pattern is: {best.sql_skeleton}"
    return [EvidenceItem(EvidenceKind.LOGIC, text, tuple(), "gen_logical_completion")]


class DomainProvider(ABC):
    """
    A source of domain knowledge that the database itself doesn't state
    """

    @abstractmethod
    def lookup(self, question: str, sk: SchemaKnowledge) -> list[str]:
        """
        Find notes about the domain of a question

        Returns
        -------
        list[str]
            One sentence per note
        """
        pass


class NullDomainProvider(DomainProvider):
    def lookup(self, question: str, sk: SchemaKnowledge) -> list[str]:
        return []


def gen_domain_notes(
    question: str, sk: SchemaKnowledge, provider: DomainProvider
) -> list[EvidenceItem]:
    return [
        EvidenceItem(EvidenceKind.DOMAIN, note, tuple(), type(provider).__name__)
        for note in provider.lookup(question, sk)
        if note.strip()
    ]


def build_evidence(
    question: str,
    sk: SchemaKnowledge,
    lib: FewShotLibrary = None,
    gateway: Gateway = None,
    tau: float = DEFAULT_TAU,
    k: int = TOP_K,
    routed: bool = True,
    domain: DomainProvider = None,
    content: bool = True,
    log: Logger = None,
) -> EvidenceBundle:
    """
    Construct the substitute evidence of a question

    The question is routed first and only the generators its labels license are
    run: SynonymAlias rewrites aliases, EnumValue lists value dictionaries,
    NumericReasoning adds computation templates, and NumericReasoning or
    DomainKnowledge add semantic constraints, domain notes (DomainKnowledge only)
    and a summary of the most similar solved question. Join paths are described
    whenever the question mentions at least two tables, and few-shot entries are
    attached whenever the library isn't empty.

    Parameters
    ----------
    question : str
        The question
    sk : SchemaKnowledge
        The knowledge of the question's database
    lib : FewShotLibrary, optional
        The few-shot library
    gateway : Gateway, optional
        The LLM gateway
    tau : float, optional
        The routing threshold
    k : int, optional
        The number of few-shot entries to retrieve
    routed : bool, optional
        If False, skip routing and run every generator
    domain : DomainProvider, optional
        The source of domain notes. Defaults to one that knows nothing.
    content : bool, optional
        If False, route on the full knowledge but run the generators over its
        structure only (see :py:meth:`SchemaKnowledge.structure_only`)
    log : Logger, optional
        A logging instance

    Returns
    -------
    EvidenceBundle
        The bundle. A generator that fails contributes nothing.
    """
    if log is None:
        log = getLogger(name="evidence", level="ERROR")
    domain = domain or NullDomainProvider()
    lib = lib if lib is not None else FewShotLibrary.from_entries([])

    if routed:
        labels = route(question, sk, gateway, tau, log=log).labels
    else:
        labels = frozenset(EvidenceType)
    if not content:
        sk = sk.structure_only()
    log.debug(f"Generating evidence for {sorted(label.value for label in labels)}")

    def run(generator, *args, default=None):
        try:
            return generator(*args)
        except (GatewayError, StructuredOutputError, DataError, ValueError) as e:
            log.warning(f"{generator.__name__} failed: {e}")
            return [] if default is None else default

    items, rewritten = [], question
    if EvidenceType.SYNONYM in labels:
        rewritten, aliases = run(
            gen_alias_rewrite, question, sk, default=(question, [])
        )
        items += aliases

    tables = mentioned_tables(rewritten, sk)
    if len(tables) >= 2:
        paths, _ = run(find_join_paths, sk, tables, default=([], []))
        items += run(gen_schema_consistency, paths)
    if EvidenceType.ENUM in labels:
        items += run(gen_enum_dictionary, rewritten, sk)
    if EvidenceType.NUMERIC in labels:
        items += run(gen_numeric_template, rewritten, sk)
    if labels & {EvidenceType.NUMERIC, EvidenceType.DOMAIN}:
        items += run(gen_semantic_constraint, rewritten, sk, gateway, log)
    if EvidenceType.DOMAIN in labels:
        items += run(gen_domain_notes, rewritten, sk, domain)

    retrieved = []
    if len(lib):
        retrieved = run(retrieve_similar, lib, question, k, sk.db_id)
    if labels & {EvidenceType.NUMERIC, EvidenceType.DOMAIN}:
        items += run(gen_logical_completion, lib, question, k, sk.db_id, retrieved)

    grounded = []
    for item in items:
        missing = item.ungrounded(sk)
        if missing:
            log.warning(f"Dropping {item.kind.value} evidence about unknown {missing}")
        else:
            grounded.append(item)
    grounded.sort(key=lambda item: KIND_ORDER[item.kind])
    return EvidenceBundle(
        question=question,
        rewritten_question=rewritten if rewritten != question else None,
        items=grounded,
        fewshot=retrieved,
    )


def assemble_prompt(
    question: str,
    sk: SchemaKnowledge,
    bundle: EvidenceBundle = None,
    gold_evidence: str = None,
    full_schema: bool = False,
) -> str:
    """
    Build the SQL generation prompt

    The prompt holds an instruction, the simplified DDL of the tables the evidence
    refers to (or of every table), an "Evidence:" section, and finally the question.
    The evidence section holds either the gold evidence or one line per bundle item
    followed by an "Examples:" block of the few-shot entries, so prompts built
    with gold evidence and with a bundle differ only inside it. Sections without
    content are left out.

    Parameters
    ----------
    question : str
        The question (or its rewritten form)
    sk : SchemaKnowledge
        The knowledge of the question's database
    bundle : EvidenceBundle, optional
        The substitute evidence
    gold_evidence : str, optional
        Human-written evidence. If provided, it replaces the bundle verbatim.
    full_schema : bool, optional
        Whether to include every table regardless of the evidence

    Returns
    -------
    str
        The prompt
    """
    if gold_evidence is not None:
        bundle = None
    referenced = bundle.referenced_tables if bundle is not None else set()
    tables = [
        tbl
        for tbl in sk.tables
        if full_schema or not referenced or tbl.name.casefold() in referenced
    ]
    sections = [
        INSTRUCTION,
        "Schema:\n" + "\n\n".join(tbl.simplified_ddl for tbl in tables),
    ]
    if gold_evidence is not None and gold_evidence.strip():
        sections.append("Evidence:\n" + gold_evidence.strip())
    elif bundle is not None and (bundle.items or bundle.fewshot):
        # few-shot entries live inside the evidence section
        parts = ["\n".join(bundle.lines)] if bundle.items else []
        if bundle.fewshot:
            parts.append("Examples:\n" + render_fewshot_block(bundle.fewshot))
        sections.append("Evidence:\n" + "\n\n".join(parts))
    sections.append(f"Question: {question.strip()}")
    return "\n\n".join(sections) + "\n"


def extract_sql(text: str) -> str:
    """
    Find the SQL in a completion

    The first non-empty fenced code block wins. Otherwise, the first span from
    SELECT (or WITH) up to a semicolon or the end of the text is used.

    Raises
    ------
    ExtractionError
        If the completion contains no SQL
    """
    for block in SQL_FENCE.findall(text):
        if block.strip():
            return block.strip()
    for flags in (re.DOTALL, re.DOTALL | re.IGNORECASE):
        match = re.search(SQL_START, text, flags)
        if match is not None:
            return match.group(0).strip()
    raise ExtractionError("The completion doesn't contain any SQL")


def generate_sql(gateway: Gateway, prompt: str, log: Logger = None) -> str:
    """
    Ask the LLM for the SQL that answers a prompt

    Parameters
    ----------
    gateway : Gateway
        The LLM gateway
    prompt : str
        The output of :py:func:`assemble_prompt`
    log : Logger, optional
        A logging instance

    Returns
    -------
    str
        The SQL, unvalidated

    Raises
    ------
    GenerationError
        If the gateway fails
    ExtractionError
        If the completion contains no SQL
    """
    if log is None:
        log = getLogger(name="evidence", level="ERROR")
    try:
        completion = gateway.ask(load_prompt("generate"), prompt)
    except GatewayError as e:
        raise GenerationError(f"The LLM did not answer: {e}") from e
    sql = extract_sql(completion)
    log.debug(f"Generated SQL: {sql}")
    return sql
