from __future__ import annotations
import os
import json
import math
from enum import Enum
from pathlib import Path
from logging import getLogger, Logger
from dataclasses import astuple, dataclass, field, replace
from datetime import datetime, timezone
from typing import Iterator, Optional, Tuple, Union

from .. import __version__
from .data import Data, FormatError, InvariantError


Value = Union[None, int, float, str, bytes]
ColumnRef = Tuple[str, str]

ENUMERATION_MAX_DISTINCT = 20
ENUMERATION_MIN_COVERAGE = 0.95
TOP_VALUES_CAP = ENUMERATION_MAX_DISTINCT
SAMPLE_ROWS_CAP = 3
INFERRED_FK_THRESHOLD = 0.85
TIMESTAMP_FORMAT = "%Y-%m-%dT%H:%M:%SZ"


def sqlite_sort_key(value: Value) -> tuple:
    """
    A sort key that orders values the way SQLite does

    NULL sorts first, then numbers (integers and reals compared by value), then text
    (binary collation), then blobs.

    Parameters
    ----------
    value : Value
        A value retrieved from a SQLite database

    Returns
    -------
    tuple
        A key usable with :py:func:`sorted`
    """
    if value is None:
        return (0, 0)
    if isinstance(value, (int, float)):
        return (1, value)
    if isinstance(value, str):
        return (2, value)
    return (3, bytes(value))


def render_value(value: Value) -> str:
    """
    Render a value as the text we use to match it against glossaries and questions

    Parameters
    ----------
    value : Value
        A value retrieved from a SQLite database

    Returns
    -------
    str
        Integers in decimal, reals via repr (ex: 52.0), text verbatim, blobs in hex,
        and NULL as "NULL"
    """
    if value is None:
        return "NULL"
    if isinstance(value, bytes):
        return value.hex()
    if isinstance(value, float):
        return repr(value)
    return str(value)


def resolve_created_at(created_at: datetime = None) -> datetime:
    """
    Decide on the creation stamp of a schema-knowledge value

    Parameters
    ----------
    created_at : datetime, optional
        An explicit timestamp. If not provided, SOURCE_DATE_EPOCH is consulted and
        then the current time is used.

    Returns
    -------
    datetime
        A timezone-aware UTC datetime with whole seconds
    """
    if created_at is None:
        epoch = os.environ.get("SOURCE_DATE_EPOCH")
        if epoch:
            created_at = datetime.fromtimestamp(int(epoch), tz=timezone.utc)
        else:
            created_at = datetime.now(tz=timezone.utc)
    if created_at.tzinfo is None:
        created_at = created_at.replace(tzinfo=timezone.utc)
    return created_at.astimezone(timezone.utc).replace(microsecond=0)


class EdgeSource(str, Enum):
    DECLARED = "declared"
    INFERRED = "inferred"


@dataclass(frozen=True)
class NumericStats:
    """
    Summary statistics over the numeric values of a column sample

    Quantiles use the lower nearest-rank method
    """

    min: float
    max: float
    mean: float
    variance: float
    q25: float
    q50: float
    q75: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in astuple(self)):
            raise InvariantError(f"Numeric stats must be finite: {self}")
        if not (self.min <= self.q25 <= self.q50 <= self.q75 <= self.max):
            raise InvariantError(
                "Numeric stats must satisfy min <= q25 <= q50 <= q75 <= max but got"
                f" {self.min}, {self.q25}, {self.q50}, {self.q75}, {self.max}"
            )
        if self.variance < 0:
            raise InvariantError(f"Variance cannot be negative: {self.variance}")


@dataclass(frozen=True)
class ColumnProfile:
    """
    A statistical portrait of a column, computed from a sample of its values

    Attributes
    ----------
    sample_size : int
        The number of values in the sample, NULLs included
    null_fraction : float
        The fraction of the sample that is NULL (0 for an empty sample)
    distinct_count_in_sample : int
        The number of distinct non-NULL values in the sample
    numeric_stats : NumericStats, optional
        Present iff at least one sampled value is a finite number
    top_values : tuple[tuple[Value, int]]
        The most frequent non-NULL values with their frequency in the sample, sorted
        by frequency descending and then by value ascending
    is_enumeration : bool
        Whether the column looks like a discrete code or category column
    sample_values : tuple[Value]
        The raw sampled values
    mixed_types : bool
        Whether the non-NULL sampled values span more than one storage class
    """

    sample_size: int
    null_fraction: float
    distinct_count_in_sample: int
    numeric_stats: Optional[NumericStats]
    top_values: tuple
    is_enumeration: bool
    sample_values: tuple
    mixed_types: bool = False

    def __post_init__(self):
        object.__setattr__(
            self, "top_values", tuple((v, int(f)) for v, f in self.top_values)
        )
        object.__setattr__(self, "sample_values", tuple(self.sample_values))
        object.__setattr__(self, "null_fraction", float(self.null_fraction))
        if self.sample_size < 0 or len(self.sample_values) > self.sample_size:
            raise InvariantError(
                f"Sample size {self.sample_size} does not cover"
                f" {len(self.sample_values)} sampled values"
            )
        if not 0 <= self.null_fraction <= 1:
            raise InvariantError(f"Null fraction {self.null_fraction} is not in [0,1]")
        if self.distinct_count_in_sample > self.sample_size:
            raise InvariantError(
                f"Distinct count {self.distinct_count_in_sample} exceeds the sample"
                f" size {self.sample_size}"
            )
        if sum(f for _, f in self.top_values) > self.sample_size:
            raise InvariantError("Top value frequencies exceed the sample size")
        keys = [(-f, sqlite_sort_key(v)) for v, f in self.top_values]
        if keys != sorted(keys):
            raise InvariantError(
                "Top values must be sorted by frequency desc and then value asc"
            )
        if (
            self.is_enumeration
            and self.distinct_count_in_sample > ENUMERATION_MAX_DISTINCT
        ):
            raise InvariantError(
                f"An enumeration column may have at most {ENUMERATION_MAX_DISTINCT}"
                f" distinct values but this one has {self.distinct_count_in_sample}"
            )

    @property
    def observed_values(self) -> set[str]:
        """
        The rendered non-NULL values of the sample (see :py:func:`render_value`)
        """
        return {render_value(v) for v in self.sample_values if v is not None}


@dataclass(frozen=True)
class ColumnSemantics:
    """
    What a column means, as induced from its name, context, profile and samples

    Attributes
    ----------
    description : str
        A short natural-language description
    aliases : tuple[str]
        Alternative names or phrases for the column
    unit_hint : str, optional
        The unit of measurement, if any
    time_granularity_hint : str, optional
        The time granularity (ex: "year") of temporal columns
    enum_glossary : dict[str, str]
        Maps rendered raw values to human-readable labels
    """

    description: str = ""
    aliases: tuple = tuple()
    unit_hint: Optional[str] = None
    time_granularity_hint: Optional[str] = None
    enum_glossary: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "aliases", tuple(self.aliases))
        object.__setattr__(
            self,
            "enum_glossary",
            {str(k): str(v) for k, v in self.enum_glossary.items()},
        )

    def is_empty(self) -> bool:
        return self == ColumnSemantics()


@dataclass(frozen=True)
class ColumnKnowledge:
    name: str
    declared_type: str
    profile: ColumnProfile
    semantics: ColumnSemantics = field(default_factory=ColumnSemantics)

    def __post_init__(self):
        if self.profile is None or self.semantics is None:
            raise InvariantError(f"Column {self.name} needs a profile and semantics")
        unseen = set(self.semantics.enum_glossary) - self.profile.observed_values
        if unseen:
            raise InvariantError(
                f"Glossary keys of column {self.name} were never observed in its"
                f" sample: {sorted(unseen)[:5]}"
            )


@dataclass(frozen=True)
class TableKnowledge:
    """
    Everything we know about a single table

    Attributes
    ----------
    name : str
        The name of the table
    simplified_ddl : str
        A CREATE TABLE statement stripped of everything but columns, types, primary
        keys, and foreign keys
    row_count : int
        The number of rows in the table
    columns : tuple[ColumnKnowledge]
        The columns, in declaration order
    sample_rows : tuple[tuple[Value]]
        A few example rows, at most :py:data:`SAMPLE_ROWS_CAP`
    """

    name: str
    simplified_ddl: str
    row_count: int
    columns: tuple
    sample_rows: tuple = tuple()

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(self.columns))
        object.__setattr__(
            self, "sample_rows", tuple(tuple(row) for row in self.sample_rows)
        )
        if self.row_count < 0:
            raise InvariantError(f"Table {self.name} has a negative row count")
        names = [col.name.casefold() for col in self.columns]
        if len(names) != len(set(names)):
            raise InvariantError(f"Table {self.name} has duplicate column names")
        if len(self.sample_rows) > SAMPLE_ROWS_CAP:
            raise InvariantError(
                f"Table {self.name} has more than {SAMPLE_ROWS_CAP} sample rows"
            )

    def column(self, name: str) -> Optional[ColumnKnowledge]:
        """
        Look up a column by name, case-insensitively like SQLite does
        """
        name = name.casefold()
        for col in self.columns:
            if col.name.casefold() == name:
                return col
        return None


@dataclass(frozen=True)
class ForeignKeyEdge:
    """
    A join edge between two columns of different tables

    Attributes
    ----------
    origin : tuple[str, str]
        The (table, column) that refers to the other side
    target : tuple[str, str]
        The (table, column) being referred to
    source : EdgeSource
        Whether the edge was declared in the schema or inferred by us
    similarity : float, optional
        The name similarity of the two columns (inferred edges only)
    """

    origin: tuple
    target: tuple
    source: EdgeSource
    similarity: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(self.origin))
        object.__setattr__(self, "target", tuple(self.target))
        try:
            object.__setattr__(self, "source", EdgeSource(self.source))
        except ValueError:
            raise InvariantError(f"Unknown edge source '{self.source}'")
        if self.source is EdgeSource.DECLARED and self.similarity is not None:
            raise InvariantError("Declared edges cannot carry a similarity")
        if self.source is EdgeSource.INFERRED:
            if self.similarity is None or not (
                INFERRED_FK_THRESHOLD <= self.similarity <= 1
            ):
                raise InvariantError(
                    f"Inferred edges need a similarity in [{INFERRED_FK_THRESHOLD}, 1]"
                    f" but got {self.similarity}"
                )

    @property
    def tables(self) -> tuple[str, str]:
        return (self.origin[0], self.target[0])


@dataclass(frozen=True)
class SchemaKnowledge:
    """
    The cached database-side knowledge of a single database

    Attributes
    ----------
    db_id : str
        The identifier of the database
    tables : tuple[TableKnowledge]
        The tables, in schema order
    fk_edges : tuple[ForeignKeyEdge]
        Declared edges followed by inferred ones
    tool_version : str
        The version of the tool that mined this knowledge
    created_at : datetime
        When the knowledge was mined (UTC, whole seconds)
    """

    db_id: str
    tables: tuple = tuple()
    fk_edges: tuple = tuple()
    tool_version: str = __version__
    created_at: datetime = field(default_factory=resolve_created_at)

    def __post_init__(self):
        object.__setattr__(self, "tables", tuple(self.tables))
        object.__setattr__(self, "fk_edges", tuple(self.fk_edges))
        object.__setattr__(self, "created_at", resolve_created_at(self.created_at))
        names = [tbl.name.casefold() for tbl in self.tables]
        if len(names) != len(set(names)):
            raise InvariantError(f"Database {self.db_id} has duplicate table names")
        for edge in self.fk_edges:
            for endpoint in (edge.origin, edge.target):
                if not self.has_column(*endpoint):
                    raise InvariantError(
                        f"Foreign key {edge.origin} -> {edge.target} references a"
                        f" column that doesn't exist: {endpoint}"
                    )

    def table(self, name: str) -> Optional[TableKnowledge]:
        name = name.casefold()
        for tbl in self.tables:
            if tbl.name.casefold() == name:
                return tbl
        return None

    def has_column(self, table: str, column: str) -> bool:
        tbl = self.table(table)
        return tbl is not None and tbl.column(column) is not None

    def columns(self) -> Iterator[tuple[TableKnowledge, ColumnKnowledge]]:
        """
        Iterate over every (table, column) pair in schema order
        """
        for tbl in self.tables:
            for col in tbl.columns:
                yield tbl, col

    def structure_only(self) -> SchemaKnowledge:
        """
        A copy that keeps tables, columns, declared types, and foreign keys

        Profiles are emptied, semantics are cleared, and sample rows are dropped,
        so none of the mined value or meaning knowledge survives.
        """
        empty = ColumnProfile(0, 0.0, 0, None, (), False, ())
        tables = [
            replace(
                tbl,
                sample_rows=(),
                columns=[
                    ColumnKnowledge(col.name, col.declared_type, empty)
                    for col in tbl.columns
                ],
            )
            for tbl in self.tables
        ]
        return replace(self, tables=tables)


NON_FINITE = {"inf": math.inf, "-inf": -math.inf, "nan": math.nan}


def encode_value(value: Value):
    if isinstance(value, bytes):
        return {"blob": value.hex()}
    if isinstance(value, float) and not math.isfinite(value):
        return {"real": repr(value)}
    return value


def decode_value(value):
    if isinstance(value, dict):
        if set(value) == {"blob"}:
            return bytes.fromhex(value["blob"])
        if set(value) == {"real"} and value["real"] in NON_FINITE:
            return NON_FINITE[value["real"]]
        raise FormatError(f"Unrecognized value encoding: {value}")
    if isinstance(value, list):
        raise FormatError(f"Unrecognized value encoding: {value}")
    return value


def knowledge_to_dict(sk: SchemaKnowledge) -> dict:
    """
    Convert a SchemaKnowledge value into plain objects, keys in canonical order
    """

    def profile(p: ColumnProfile) -> dict:
        stats = None
        if p.numeric_stats is not None:
            s = p.numeric_stats
            stats = {
                "min": float(s.min),
                "max": float(s.max),
                "mean": float(s.mean),
                "variance": float(s.variance),
                "q25": float(s.q25),
                "q50": float(s.q50),
                "q75": float(s.q75),
            }
        return {
            "sample_size": p.sample_size,
            "null_fraction": p.null_fraction,
            "distinct_count_in_sample": p.distinct_count_in_sample,
            "numeric_stats": stats,
            "top_values": [[encode_value(v), f] for v, f in p.top_values],
            "is_enumeration": p.is_enumeration,
            "sample_values": [encode_value(v) for v in p.sample_values],
            "mixed_types": p.mixed_types,
        }

    def semantics(s: ColumnSemantics) -> dict:
        return {
            "description": s.description,
            "aliases": list(s.aliases),
            "unit_hint": s.unit_hint,
            "time_granularity_hint": s.time_granularity_hint,
            "enum_glossary": dict(s.enum_glossary),
        }

    return {
        "db_id": sk.db_id,
        "tool_version": sk.tool_version,
        "created_at": sk.created_at.strftime(TIMESTAMP_FORMAT),
        "tables": [
            {
                "name": tbl.name,
                "simplified_ddl": tbl.simplified_ddl,
                "row_count": tbl.row_count,
                "columns": [
                    {
                        "name": col.name,
                        "declared_type": col.declared_type,
                        "profile": profile(col.profile),
                        "semantics": semantics(col.semantics),
                    }
                    for col in tbl.columns
                ],
                "sample_rows": [
                    [encode_value(v) for v in row] for row in tbl.sample_rows
                ],
            }
            for tbl in sk.tables
        ],
        "fk_edges": [
            {
                "from": list(edge.origin),
                "to": list(edge.target),
                "source": edge.source.value,
                "similarity": edge.similarity,
            }
            for edge in sk.fk_edges
        ],
    }


def knowledge_from_dict(obj: dict) -> SchemaKnowledge:
    """
    Rebuild a SchemaKnowledge value from the output of :py:func:`knowledge_to_dict`

    Raises
    ------
    FormatError
        If a required key is missing or has the wrong shape
    InvariantError
        If the rebuilt value violates one of its invariants
    """
    try:
        tables = []
        for tbl in obj["tables"]:
            columns = []
            for col in tbl["columns"]:
                prof = col["profile"]
                stats = prof["numeric_stats"]
                sem = col["semantics"]
                columns.append(
                    ColumnKnowledge(
                        name=col["name"],
                        declared_type=col["declared_type"],
                        profile=ColumnProfile(
                            sample_size=prof["sample_size"],
                            null_fraction=prof["null_fraction"],
                            distinct_count_in_sample=prof["distinct_count_in_sample"],
                            numeric_stats=(
                                None if stats is None else NumericStats(**stats)
                            ),
                            top_values=[
                                (decode_value(v), f) for v, f in prof["top_values"]
                            ],
                            is_enumeration=prof["is_enumeration"],
                            sample_values=[
                                decode_value(v) for v in prof["sample_values"]
                            ],
                            mixed_types=prof.get("mixed_types", False),
                        ),
                        semantics=ColumnSemantics(
                            description=sem["description"],
                            aliases=sem["aliases"],
                            unit_hint=sem["unit_hint"],
                            time_granularity_hint=sem["time_granularity_hint"],
                            enum_glossary=sem["enum_glossary"],
                        ),
                    )
                )
            tables.append(
                TableKnowledge(
                    name=tbl["name"],
                    simplified_ddl=tbl["simplified_ddl"],
                    row_count=tbl["row_count"],
                    columns=columns,
                    sample_rows=[
                        [decode_value(v) for v in row] for row in tbl["sample_rows"]
                    ],
                )
            )
        edges = [
            ForeignKeyEdge(
                origin=edge["from"],
                target=edge["to"],
                source=edge["source"],
                similarity=edge["similarity"],
            )
            for edge in obj["fk_edges"]
        ]
        created_at = datetime.strptime(obj["created_at"], TIMESTAMP_FORMAT)
        return SchemaKnowledge(
            db_id=obj["db_id"],
            tables=tables,
            fk_edges=edges,
            tool_version=obj["tool_version"],
            created_at=created_at.replace(tzinfo=timezone.utc),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"Malformed schema-knowledge file: {e!r}") from e


def dumps_knowledge(sk: SchemaKnowledge) -> str:
    """
    Serialize a SchemaKnowledge value into its canonical text

    Non-finite sampled values are encoded as {"real": "inf"} and the like, so the
    text is always strict JSON.

    Raises
    ------
    InvariantError
        If some other field holds a non-finite number
    """
    obj = knowledge_to_dict(sk)
    try:
        return json.dumps(obj, indent=2, ensure_ascii=False, allow_nan=False) + "\n"
    except ValueError as e:
        raise InvariantError(f"Knowledge of {sk.db_id} is not finite: {e}") from e


class Knowledge(Data):
    """
    A class for reading and writing schema-knowledge files

    Attributes
    ----------
    data : SchemaKnowledge
        The knowledge contained in the file, once loaded
    fname : Path | str
        The path to the file (named <db_id>.knowledge.json by convention)
    log: Logger
        A logging instance for recording debug statements.

    Examples
    --------
    >>> knowledge = Knowledge.load('california_schools.knowledge.json')
    >>> tables = [table.name for table in knowledge]
    """

    def __init__(self, fname: Path | str, log: Logger = None):
        super().__init__(fname, log)

    @classmethod
    def load(cls: Knowledge, fname: Path | str, log: Logger = None) -> Knowledge:
        """
        Load schema-knowledge from a file

        Parameters
        ----------
        fname
            See documentation for :py:attr:`~.Data.fname`
        log : Logger, optional
            A logging instance

        Returns
        -------
        Knowledge
            A Knowledge object with the data loaded into its properties
        """
        knowledge = cls(fname, log=log)
        knowledge.read()
        return knowledge

    def read(self):
        """
        Read the file into :py:attr:`~.Knowledge.data`

        Raises
        ------
        FileNotFoundError
            If the file does not exist
        FormatError
            If the file isn't valid JSON or lacks a required key
        InvariantError
            If the stored knowledge violates an invariant
        """
        super().read()
        with self.hook_compressed(self.fname, mode="r") as handle:
            try:
                obj = json.load(handle)
            except json.JSONDecodeError as e:
                raise FormatError(f"{self.fname} is not valid JSON: {e}") from e
        if not isinstance(obj, dict):
            raise FormatError(f"{self.fname} must contain a JSON object")
        self.data = knowledge_from_dict(obj)
        self.log.info(
            f"Loaded knowledge of {len(self.data.tables)} tables for database"
            f" {self.data.db_id}"
        )

    def __iter__(self) -> Iterator[TableKnowledge]:
        """
        Iterate over the tables of the knowledge, loading the file if needed
        """
        if self.unset():
            self.read()
        return iter(self.data.tables)

    def write(self):
        """
        Write :py:attr:`~.Knowledge.data` to :py:attr:`~.Data.fname`

        The output is a pure function of the value: keys are emitted in a fixed
        order and floats use their shortest round-trip representation

        Raises
        ------
        PersistenceError
            If the file could not be written
        InvariantError
            If a field other than a sampled value is not finite
        """
        self._write_text(dumps_knowledge(self.data))


def knowledge_path(directory: Path | str, db_id: str) -> Path:
    """
    Where the knowledge of a database lives within a directory
    """
    return Path(directory) / f"{db_id}.knowledge.json"


def save_knowledge(sk: SchemaKnowledge, path: Path | str, log: Logger = None):
    """
    Persist schema-knowledge to a file

    Parameters
    ----------
    sk : SchemaKnowledge
        The value to save
    path : Path | str
        The destination file
    log : Logger, optional
        A logging instance

    Raises
    ------
    PersistenceError
        If the file could not be written
    """
    knowledge = Knowledge(path, log=log)
    knowledge.data = sk
    knowledge.write()


def load_knowledge(path: Path | str, log: Logger = None) -> SchemaKnowledge:
    """
    Load schema-knowledge from a file

    Raises
    ------
    FileNotFoundError
        If the file does not exist
    FormatError
        If the file is malformed
    InvariantError
        If the stored value violates an invariant
    """
    return Knowledge.load(path, log=log).data
