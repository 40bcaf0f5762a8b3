from __future__ import annotations
import re
import hashlib
from logging import Logger
from collections import Counter
from dataclasses import dataclass
from typing import Iterator, NamedTuple, Optional
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from sqlparse import lexer
from sqlparse import tokens as T

from .logging import getLogger
from .prompts import load_prompt
from .gateway import Gateway, GatewayError
from .data import FewShotEntry, FewShotLibrary, SchemaKnowledge, SimilarityConfig


TOP_K = 5
SCORE_TIE_TOLERANCE = 1e-9
PLACEHOLDER = re.compile(r"<(tab|col|str|num)>")
SENTINELS = {f"zzskel{kind}": f"<{kind}>" for kind in ("tab", "col", "str", "num")}
PUNCTUATION = re.compile(r"[^\w\s%]|_")

KEYWORDS = frozenset(
    """
    ALL AND AS ASC BETWEEN BY CASE CAST COLLATE CROSS CURRENT_DATE CURRENT_TIME
    CURRENT_TIMESTAMP DELETE DESC DISTINCT ELSE END ESCAPE EXCEPT EXISTS FROM FULL
    GLOB GROUP HAVING IN INNER INSERT INTERSECT INTO IS ISNULL JOIN LEFT LIKE LIMIT
    NATURAL NOT NOTNULL NULL NULLS OFFSET ON OR ORDER OUTER OVER PARTITION RECURSIVE
    REGEXP RIGHT SELECT SET THEN UNION UPDATE USING VALUES WHEN WHERE WITH
    """.split()
)
# words that are keywords only in a particular position
NULLS_ORDER = frozenset({"FIRST", "LAST"})
WINDOW_FRAME = frozenset(
    """
    CURRENT EXCLUDE FOLLOWING GROUPS NO OTHERS PRECEDING RANGE ROW ROWS TIES
    UNBOUNDED
    """.split()
)
TABLE_STARTERS = frozenset({"FROM", "JOIN", "UPDATE", "INTO"})
QUOTES = "'\"`["


class SkeletonError(ValueError):
    """
    SQL that cannot be tokenized, for example because of an unbalanced quote
    """


@dataclass(frozen=True)
class SqlToken:
    """
    A token of a SQL query, classified by the role it plays

    Attributes
    ----------
    role : str
        One of keyword, function, type, table, column, string, number, placeholder,
        or symbol
    text : str
        The text of the token within a skeleton
    parts : tuple[str]
        For identifiers: the unquoted parts of a (possibly qualified) name
    quote : str
        For identifiers: the opening quote character, if the name was quoted
    alias : bool
        For identifiers: whether the name introduces an alias (or a CTE)
    """

    role: str
    text: str
    parts: tuple = tuple()
    quote: str = ""
    alias: bool = False


def _unquote(name: str) -> tuple[str, str]:
    if name[:1] in "\"`" and len(name) > 1 and name[-1] == name[0]:
        return name[1:-1].replace(name[0] * 2, name[0]), name[0]
    if name[:1] == "[" and name.endswith("]"):
        return name[1:-1], "["
    return name, ""


def _lex(sql: str) -> list[tuple[str, str]]:
    """
    Split SQL into (kind, text) pairs, dropping whitespace and comments

    kind is one of word, ident, string, number, punct, or other
    """
    sql = PLACEHOLDER.sub(lambda m: f" zzskel{m.group(1)} ", sql)
    toks = []
    for ttype, value in lexer.tokenize(sql):
        if ttype in T.Whitespace or ttype in T.Comment:
            continue
        if ttype in T.Name.Placeholder:
            toks.append(("other", value))
        elif ttype in T.Keyword or ttype in T.Name:
            if value[:1] in QUOTES:
                toks.append(("ident", value))
            else:
                # multi-word keywords such as GROUP BY arrive as one token
                toks.extend(("word", word) for word in value.split())
        elif ttype in T.String.Symbol:
            toks.append(("ident", value))
        elif ttype in T.String:
            toks.append(("string", value))
        elif ttype in T.Number:
            toks.append(("number", value))
        elif ttype in T.Punctuation:
            toks.append(("punct", value))
        elif ttype is T.Error and value in QUOTES:
            raise SkeletonError(f"Unbalanced quote {value} in SQL: {sql.strip()}")
        else:
            toks.append(("other", value))
    return toks


def tokenize_sql(sql: str) -> Iterator[SqlToken]:
    """
    Classify the tokens of a SQL query with a single pass over its lexemes

    Identifiers in FROM/JOIN/UPDATE/INTO position (including their aliases) are
    tables and all other identifiers are columns. A word followed by an opening
    parenthesis that isn't a keyword is a function name.

    Parameters
    ----------
    sql : str
        The SQL query. Placeholders (<tab>, <col>, <str>, <num>) map to themselves.

    Yields
    ------
    SqlToken
        Each significant token of the query

    Raises
    ------
    SkeletonError
        If the query contains an unbalanced quote
    """
    toks = _lex(sql)
    frames = []
    in_tables, frame = False, "plain"
    pending, expect_type, after_nulls = "plain", False, False
    # within a table list: whether the next identifier is an alias
    after_table = False
    i = 0
    while i < len(toks):
        kind, value = toks[i]
        nxt = toks[i + 1] if i + 1 < len(toks) else (None, None)
        opener = "plain"
        if kind in ("word", "ident"):
            # a qualified name such as T1.col collapses into a single identifier
            j = i
            while (
                j + 2 < len(toks)
                and toks[j + 1] == ("punct", ".")
                and (toks[j + 2][0] in ("word", "ident") or toks[j + 2][1] == "*")
            ):
                j += 2
            upper = value.upper()
            if j > i:
                parts = tuple(_unquote(toks[k][1])[0] for k in range(i, j + 1, 2))
                role = "table" if in_tables else "column"
                yield SqlToken(role, f"<{role[:3]}>", parts, _unquote(value)[1])
                after_table = in_tables
                i = j + 1
                continue
            if kind == "word" and value.lower() in SENTINELS:
                yield SqlToken("placeholder", SENTINELS[value.lower()])
                after_table = in_tables
            elif kind == "word" and expect_type:
                yield SqlToken("type", upper)
                expect_type = False
            elif kind == "word" and (
                upper in KEYWORDS
                or (after_nulls and upper in NULLS_ORDER)
                or (frame == "over" and upper in WINDOW_FRAME)
            ):
                yield SqlToken("keyword", upper)
                if upper in TABLE_STARTERS:
                    in_tables, after_table = True, False
                elif upper == "AS":
                    if frame == "cast":
                        expect_type = True
                else:
                    in_tables = False
                if upper == "OVER":
                    opener = "over"
                elif upper == "CAST":
                    opener = "cast"
            elif kind == "word" and nxt == ("punct", "("):
                yield SqlToken("function", upper)
                opener = "cast" if upper == "CAST" else "plain"
            else:
                name, quote = _unquote(value)
                role = "table" if in_tables else "column"
                prev = toks[i - 1] if i else (None, None)
                alias = (in_tables and after_table) or (
                    not in_tables and prev[0] == "word" and prev[1].upper() == "AS"
                )
                # WITH name AS ( ... ) defines a common table expression
                if (
                    nxt[0] == "word"
                    and nxt[1].upper() == "AS"
                    and i + 2 < len(toks)
                    and toks[i + 2] == ("punct", "(")
                    and frame != "cast"
                ):
                    alias = True
                yield SqlToken(role, f"<{role[:3]}>", (name,), quote, alias)
                after_table = in_tables
            after_nulls = kind == "word" and upper == "NULLS"
        elif kind == "string":
            yield SqlToken("string", "<str>")
        elif kind == "number":
            yield SqlToken("number", "<num>")
        elif value == "(":
            yield SqlToken("symbol", "(")
            frames.append((in_tables, frame, after_table))
            in_tables, frame, after_table = False, pending, False
        elif value == ")":
            yield SqlToken("symbol", ")")
            if frames:
                in_tables, frame, after_table = frames.pop()
                after_table = in_tables
        elif value == ",":
            yield SqlToken("symbol", ",")
            after_table = False
        elif value == ";":
            yield SqlToken("symbol", ";")
            in_tables = False
        else:
            yield SqlToken("symbol", value)
        pending = opener
        i += 1


def skeletonize_sql(sql: str) -> str:
    """
    Abstract a SQL query into its logical skeleton

    Keywords are uppercased, table identifiers become <tab>, column identifiers
    (qualified or not) become <col>, string literals become <str> and numeric
    literals become <num>. Operators, parentheses, commas and function names are
    kept and every token is separated by a single space.

    Parameters
    ----------
    sql : str
        The SQL query

    Returns
    -------
    str
        The skeleton

    Raises
    ------
    SkeletonError
        If the query cannot be tokenized

    Examples
    --------
    >>> skeletonize_sql("SELECT name FROM users WHERE age > 30")
    'SELECT <col> FROM <tab> WHERE <col> > <num>'
    """
    return " ".join(tok.text for tok in tokenize_sql(sql))


class SqlIdentifiers(NamedTuple):
    tables: tuple
    aliases: dict
    columns: tuple


def sql_identifiers(sql: str) -> SqlIdentifiers:
    """
    Find the schema identifiers a SQL query refers to

    Returns
    -------
    SqlIdentifiers
        The referenced table names, a map from each alias (lowercased) to the table
        it stands for (None for subqueries, CTEs and column aliases), and
        (qualifier, column, quote) triples for every column reference that isn't
        itself an alias
    """
    tables, columns, aliases = [], [], {}
    last_table, after_paren, prev = None, False, None
    for tok in tokenize_sql(sql):
        if tok.role == "table":
            name = tok.parts[-1]
            if tok.alias:
                aliases[name.casefold()] = None if after_paren else last_table
            else:
                tables.append(name)
                last_table = name
        elif tok.role == "column":
            if tok.alias:
                aliases[tok.parts[-1].casefold()] = None
            elif len(tok.parts) > 1:
                columns.append((tok.parts[-2], tok.parts[-1], tok.quote))
            else:
                columns.append((None, tok.parts[0], tok.quote))
        # the alias of a subquery follows its closing parenthesis, maybe after AS
        if tok.text != "AS":
            after_paren = tok.text == ")" or (after_paren and prev == "AS")
        prev = tok.text
    # names defined by the query itself aren't schema names
    tables = [t for t in tables if aliases.get(t.casefold(), t) is not None]
    columns = [c for c in columns if c[0] is not None or c[1].casefold() not in aliases]
    return SqlIdentifiers(tuple(tables), aliases, tuple(columns))


def incompatible_identifier(sql: str, sk: SchemaKnowledge) -> Optional[str]:
    """
    Find a table or column of a query that doesn't exist in a database

    Double-quoted names that don't match any column are treated as string literals,
    as SQLite does.

    Returns
    -------
    str | None
        The first offending identifier, or None if the query is compatible
    """
    found = sql_identifiers(sql)
    known_columns = {col.name.casefold() for _, col in sk.columns()}
    for table in found.tables:
        if sk.table(table) is None:
            return table
    for qualifier, column, quote in found.columns:
        if column == "*":
            continue
        if qualifier is not None:
            table = found.aliases.get(qualifier.casefold(), qualifier)
            if table is None:
                continue
            if sk.table(table) is None:
                return qualifier
            if not sk.has_column(table, column):
                return f"{qualifier}.{column}"
        elif column.casefold() not in known_columns and quote != '"':
            return column
    return None


def normalize_text(text: str) -> str:
    """
    Lowercase text, replace punctuation (except %) with spaces, collapse whitespace
    """
    return " ".join(PUNCTUATION.sub(" ", text.lower()).split())


def question_tokens(text: str) -> list[str]:
    return normalize_text(text).split()


def normalize_question(
    gateway: Optional[Gateway], question: str, log: Logger = None
) -> str:
    """
    Denoise and normalize a question

    Parameters
    ----------
    gateway : Gateway, optional
        The LLM gateway, which rewrites the question if available
    question : str
        The question
    log : Logger, optional
        A logging instance

    Returns
    -------
    str
        The rewritten question or, without a working gateway, the question
        lowercased with punctuation (except %) stripped and whitespace collapsed
    """
    if log is None:
        log = getLogger(name="fewshot", level="ERROR")
    if gateway is not None:
        try:
            reply = gateway.ask(load_prompt("normalize"), question)
            lines = [line.strip() for line in reply.splitlines() if line.strip()]
            if lines:
                return lines[0]
            log.warning("The normalized question was empty. Falling back.")
        except GatewayError as e:
            log.warning(f"Unable to normalize the question with the LLM: {e}")
    return normalize_text(question)


def question_fingerprint(normalized_question: str) -> str:
    """
    Hash the tokens of a normalized question

    Returns
    -------
    str
        The first 16 hex digits of the SHA-256 of the space-joined tokens
    """
    text = " ".join(question_tokens(normalized_question))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def _prepare_pair(
    pair: tuple[str, str, str],
    sk_map: Optional[dict[str, SchemaKnowledge]],
    gateway: Optional[Gateway],
    log: Logger,
) -> tuple:
    question, sql, db_id = pair
    try:
        skeleton = skeletonize_sql(sql)
    except SkeletonError as e:
        log.debug(str(e))
        return None, "untokenizable-sql"
    if sk_map is not None:
        if db_id not in sk_map:
            return None, "unknown-database"
        offender = incompatible_identifier(sql, sk_map[db_id])
        if offender is not None:
            log.debug(f"{db_id} has no '{offender}' (SQL: {sql})")
            return None, "schema-incompatible"
    normalized = normalize_question(gateway, question, log=log)
    return (question, normalized, sql, skeleton, db_id), None


def build_library(
    pairs: list[tuple[str, str, str]],
    sk_map: dict[str, SchemaKnowledge] = None,
    gateway: Gateway = None,
    similarity_config: SimilarityConfig = None,
    workers: int = 4,
    log: Logger = None,
) -> FewShotLibrary:
    """
    Build a few-shot library from (question, SQL, db_id) pairs

    Each pair is normalized and skeletonized in parallel. Pairs are then reduced in
    input order: those whose SQL can't be tokenized, whose database is unknown, or
    whose SQL refers to a table or column missing from the database are dropped,
    and so is every pair that repeats the fingerprint and skeleton of an earlier
    one. Kept pairs are numbered from 0 in input order.

    Parameters
    ----------
    pairs : list[tuple[str, str, str]]
        The training pairs
    sk_map : dict[str, SchemaKnowledge], optional
        The knowledge of each database. If not provided, compatibility isn't checked.
    gateway : Gateway, optional
        The LLM gateway used to normalize questions
    similarity_config : SimilarityConfig, optional
        The retrieval settings of the library
    workers : int, optional
        The number of pairs to prepare concurrently
    log : Logger, optional
        A logging instance

    Returns
    -------
    FewShotLibrary
        The library. Its dropped attribute lists the rejected pairs.
    """
    if log is None:
        log = getLogger(name="fewshot", level="ERROR")

    log.info(f"Normalizing and skeletonizing {len(pairs)} pairs")
    with ThreadPoolExecutor(max_workers=max(workers, 1)) as pool:
        prepared = list(
            pool.map(lambda pair: _prepare_pair(pair, sk_map, gateway, log), pairs)
        )

    entries, dropped, seen = [], [], set()
    for idx, (fields, reason) in enumerate(prepared):
        if fields is not None:
            question, normalized, sql, skeleton, db_id = fields
            fingerprint = question_fingerprint(normalized)
            if (fingerprint, skeleton) in seen:
                reason = "duplicate"
            else:
                seen.add((fingerprint, skeleton))
                entries.append(
                    FewShotEntry(
                        id=len(entries),
                        db_id=db_id,
                        raw_question=question,
                        normalized_question=normalized,
                        raw_sql=sql,
                        sql_skeleton=skeleton,
                        question_fingerprint=fingerprint,
                    )
                )
        if reason is not None:
            dropped.append((idx, reason))

    if dropped:
        reasons = Counter(reason for _, reason in dropped)
        log.warning(
            f"Dropped {len(dropped)} pairs: "
            + ", ".join(
                f"{count} {reason}" for reason, count in sorted(reasons.items())
            )
        )
    log.info(f"Built a library of {len(entries)} entries")
    library = FewShotLibrary.from_entries(
        entries, log=log, similarity_config=similarity_config
    )
    library.dropped = dropped
    return library


class TfidfIndex:
    """
    TF-IDF vectors of the normalized questions of a library

    Attributes
    ----------
    vocabulary : dict[str, int]
        Maps each token to its column
    idf : np.ndarray
        The smoothed inverse document frequency of each token, ln((1+N)/(1+df)) + 1
    matrix : np.ndarray
        One L2-normalized row per entry
    """

    def __init__(self, documents: list[list[str]]):
        self.vocabulary = {}
        for doc in documents:
            for tok in doc:
                self.vocabulary.setdefault(tok, len(self.vocabulary))
        counts = np.zeros((len(documents), len(self.vocabulary)))
        for row, doc in enumerate(documents):
            for tok, count in Counter(doc).items():
                counts[row, self.vocabulary[tok]] = count
        df = (counts > 0).sum(axis=0)
        self.idf = np.log((1 + len(documents)) / (1 + df)) + 1
        self.matrix = self._normalize(counts * self.idf)

    @staticmethod
    def _normalize(matrix: np.ndarray) -> np.ndarray:
        norms = np.linalg.norm(matrix, axis=-1, keepdims=True)
        return np.divide(matrix, norms, out=np.zeros_like(matrix), where=norms > 0)

    def vector(self, tokens: list[str]) -> np.ndarray:
        vec = np.zeros(len(self.vocabulary))
        for tok, count in Counter(tokens).items():
            if tok in self.vocabulary:
                vec[self.vocabulary[tok]] = count
        return self._normalize(vec * self.idf)

    def scores(self, tokens: list[str]) -> np.ndarray:
        if not self.vocabulary:
            return np.zeros(self.matrix.shape[0])
        return self.matrix @ self.vector(tokens)


class ScoredEntry(NamedTuple):
    entry: FewShotEntry
    score: float


def _scores(lib: FewShotLibrary, question: str) -> np.ndarray:
    config = lib.similarity_config
    if config.metric == "custom":
        docs = [entry.normalized_question for entry in lib.entries]
        return np.asarray(config.scorer(docs, question), dtype=np.float64)
    if lib._index is None:
        lib._index = TfidfIndex(
            [question_tokens(entry.normalized_question) for entry in lib.entries]
        )
    return lib._index.scores(question_tokens(question))


def rank_scores(scores: np.ndarray, ids: list[int]) -> list[int]:
    """
    Order positions by score descending, with ties broken by ascending id

    Scores within :py:data:`SCORE_TIE_TOLERANCE` of the best score of their run
    count as ties.
    """
    order = sorted(range(len(ids)), key=lambda i: -scores[i])
    ranked, run = [], []
    for i in order:
        if run and scores[run[0]] - scores[i] > SCORE_TIE_TOLERANCE:
            ranked += sorted(run, key=lambda j: ids[j])
            run = []
        run.append(i)
    return ranked + sorted(run, key=lambda j: ids[j])


def retrieve_similar(
    lib: FewShotLibrary, question: str, k: int = TOP_K, db_id: str = None
) -> list[ScoredEntry]:
    """
    Find the entries of a library whose questions are most similar to a question

    Parameters
    ----------
    lib : FewShotLibrary
        The library
    question : str
        The question
    k : int, optional
        The number of entries to return
    db_id : str, optional
        The database of the question. If provided and the library prefers entries of
        the same database, those are ranked first and the rest of the library only
        fills the remaining slots.

    Returns
    -------
    list[ScoredEntry]
        min(k, len(lib)) entries sorted by similarity descending, ties broken by
        ascending id

    Raises
    ------
    ValueError
        If k < 1
    """
    if k < 1:
        raise ValueError(f"k must be at least 1, not {k}")
    entries = lib.entries
    if not entries:
        return []
    scores = _scores(lib, question)
    order = rank_scores(scores, [entry.id for entry in entries])
    if db_id is not None and lib.similarity_config.prefer_same_db:
        same = [i for i in order if entries[i].db_id == db_id]
        order = same + [i for i in order if entries[i].db_id != db_id]
    return [ScoredEntry(entries[i], round(float(scores[i]), 12)) for i in order[:k]]


def render_fewshot_block(entries: list) -> str:
    """
    Render retrieved entries as a few-shot prompt block

    Parameters
    ----------
    entries : list[FewShotEntry | ScoredEntry]
        The entries, in retrieval order

    Returns
    -------
    str
        One "Question:"/"SQL:" pair per entry, or an empty string if there are none
    """
    blocks = []
    for idx, entry in enumerate(entries, start=1):
        if isinstance(entry, ScoredEntry):
            entry = entry.entry
        blocks.append(
            f"-- Example {idx}\nQuestion: {entry.normalized_question}\n"
            f"SQL: {entry.raw_sql.strip()}"
        )
    return "\n\n".join(blocks)
