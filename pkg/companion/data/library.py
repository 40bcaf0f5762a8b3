from __future__ import annotations
import json
from pathlib import Path
from logging import Logger
from dataclasses import dataclass, asdict, fields
from typing import Callable, Iterator, Optional

from .data import Data, FormatError, InvariantError


@dataclass(frozen=True)
class FewShotEntry:
    """
    A normalized question paired with the logical skeleton of its SQL

    Attributes
    ----------
    id : int
        A stable identifier, assigned in input order
    db_id : str
        The database the SQL runs against
    raw_question : str
        The question as it was written
    normalized_question : str
        The denoised question used for retrieval
    raw_sql : str
        The SQL as it was written
    sql_skeleton : str
        The SQL with literals and schema identifiers replaced by placeholders
    question_fingerprint : str
        A hash of the normalized question's tokens
    """

    id: int
    db_id: str
    raw_question: str
    normalized_question: str
    raw_sql: str
    sql_skeleton: str
    question_fingerprint: str


@dataclass(frozen=True)
class SimilarityConfig:
    """
    How questions are compared during retrieval

    Attributes
    ----------
    metric : str
        "tfidf" for TF-IDF weighted cosine over normalized question tokens, or
        "custom" to use :py:attr:`scorer`
    prefer_same_db : bool
        Rank entries of the question's own database first, falling back to the rest
        of the library when fewer than k exist
    scorer : Callable[[list[str], str], list[float]], optional
        For the "custom" metric: scores every library question against a query
    """

    metric: str = "tfidf"
    prefer_same_db: bool = True
    scorer: Optional[Callable] = None

    def __post_init__(self):
        if self.metric not in ("tfidf", "custom"):
            raise ValueError(f"Unknown similarity metric '{self.metric}'")
        if self.metric == "custom" and self.scorer is None:
            raise ValueError("The custom similarity metric needs a scorer")


class FewShotLibrary(Data):
    """
    A deduplicated collection of few-shot entries, stored one JSON object per line

    Attributes
    ----------
    data : tuple[FewShotEntry]
        The entries, sorted by id
    fname : Path | str
        The path to the file (named <name>.fewshot.jsonl by convention)
    similarity_config : SimilarityConfig
        How retrieval compares questions. This is a runtime setting and is not
        stored in the file.
    dropped : list[tuple[int, str]]
        The input index and reason of each pair rejected while building the library
    log: Logger
        A logging instance for recording debug statements.

    Examples
    --------
    >>> library = FewShotLibrary.load('train.fewshot.jsonl')
    >>> len(library)
    """

    def __init__(
        self,
        fname: Path | str = None,
        log: Logger = None,
        similarity_config: SimilarityConfig = None,
    ):
        super().__init__(fname, log)
        self.similarity_config = similarity_config or SimilarityConfig()
        self.dropped = []
        self._index = None

    @classmethod
    def load(
        cls: FewShotLibrary,
        fname: Path | str,
        log: Logger = None,
        similarity_config: SimilarityConfig = None,
    ) -> FewShotLibrary:
        """
        Load a few-shot library from a .fewshot.jsonl file

        Parameters
        ----------
        fname
            See documentation for :py:attr:`~.Data.fname`
        log : Logger, optional
            A logging instance
        similarity_config : SimilarityConfig, optional
            See documentation for :py:attr:`~.FewShotLibrary.similarity_config`

        Returns
        -------
        FewShotLibrary
            A library with the entries loaded into its properties
        """
        library = cls(fname, log=log, similarity_config=similarity_config)
        library.read()
        return library

    @classmethod
    def from_entries(
        cls: FewShotLibrary,
        entries: list[FewShotEntry],
        fname: Path | str = None,
        log: Logger = None,
        similarity_config: SimilarityConfig = None,
    ) -> FewShotLibrary:
        """
        Create a library from entries already in memory

        Raises
        ------
        InvariantError
            If the entries are not sorted by id or contain a duplicate
        """
        library = cls(fname, log=log, similarity_config=similarity_config)
        library.data = tuple(entries)
        library.check()
        return library

    def check(self):
        """
        Verify that entries are sorted by id and that no two entries share a
        (question_fingerprint, sql_skeleton) pair

        Raises
        ------
        InvariantError
            If either condition is violated
        """
        seen = set()
        last_id = None
        for entry in self.data:
            if last_id is not None and entry.id <= last_id:
                raise InvariantError(
                    f"Few-shot entries must be sorted by unique id but {entry.id}"
                    f" follows {last_id}"
                )
            last_id = entry.id
            key = (entry.question_fingerprint, entry.sql_skeleton)
            if key in seen:
                raise InvariantError(f"Few-shot entry {entry.id} is a duplicate")
            seen.add(key)

    def read(self):
        """
        Read the entries of the file into :py:attr:`~.FewShotLibrary.data`

        Raises
        ------
        FileNotFoundError
            If the file does not exist
        FormatError
            If a line isn't a JSON object with the expected fields
        InvariantError
            If the entries violate the library invariants
        """
        super().read()
        self.data = tuple(self.__iter__())
        self._index = None
        self.check()
        self.log.info(f"Loaded {len(self.data)} few-shot entries from {self.fname}")

    def __iter__(self) -> Iterator[FewShotEntry]:
        """
        Read entries from the file line by line without storing anything

        Yields
        ------
        FewShotEntry
            Each entry in the file
        """
        names = [f.name for f in fields(FewShotEntry)]
        with self.hook_compressed(self.fname, mode="r") as lines:
            for lineno, line in enumerate(lines, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    yield FewShotEntry(**{name: obj[name] for name in names})
                except (json.JSONDecodeError, KeyError, TypeError) as e:
                    raise FormatError(
                        f"Line {lineno} of {self.fname} is not a valid few-shot entry"
                    ) from e

    def __len__(self) -> int:
        return 0 if self.unset() else len(self.data)

    @property
    def entries(self) -> tuple[FewShotEntry]:
        return tuple() if self.unset() else self.data

    def dumps(self) -> str:
        """
        Render the entries as line-delimited JSON with fields in declaration order
        """
        return "".join(
            json.dumps(asdict(entry), ensure_ascii=False) + "\n"
            for entry in self.entries
        )

    def write(self):
        """
        Write the entries to :py:attr:`~.Data.fname`

        Raises
        ------
        PersistenceError
            If the file could not be written
        """
        self._write_text(self.dumps())
