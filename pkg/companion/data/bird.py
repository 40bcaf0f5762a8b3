from __future__ import annotations
import json
from enum import Enum
from pathlib import Path
from logging import Logger
from dataclasses import dataclass, replace
from typing import Iterator, Optional

from .data import Data, FormatError


QUESTION_FILES = ("dev.json", "train.json")
DATABASE_DIRS = ("dev_databases", "train_databases", "databases")


class Difficulty(str, Enum):
    SIMPLE = "simple"
    MODERATE = "moderate"
    CHALLENGING = "challenging"


@dataclass(frozen=True)
class BenchExample:
    """
    A single BIRD question record

    Attributes
    ----------
    question_id : int
        The identifier of the question within the dataset
    db_id : str
        The database the question is asked against
    question : str
        The natural-language question
    gold_evidence : str, optional
        The human-written evidence, if any
    gold_sql : str
        The reference SQL
    difficulty : Difficulty
        The difficulty label given by the dataset
    """

    question_id: int
    db_id: str
    question: str
    gold_evidence: Optional[str]
    gold_sql: str
    difficulty: Difficulty

    def without_evidence(self) -> BenchExample:
        return replace(self, gold_evidence=None)


class BirdDataset(Data):
    """
    A BIRD-format question file, along with the databases it refers to

    This class is read-only and :py:meth:`~.BirdDataset.write` always raises.
    Predictions are written with :py:class:`companion.bench.Predictions`.

    Attributes
    ----------
    data : list[BenchExample]
        The question records, once loaded
    fname : Path | str
        The path to the question file (ex: dev.json)
    registry : dict[str, Path]
        Maps each db_id to the path of its SQLite file
    rejected : list[int]
        The question_id of each record whose db_id is not in the registry
    log: Logger
        A logging instance for recording debug statements.

    Examples
    --------
    >>> dataset = BirdDataset.load('bird/dev.json', registry)
    """

    def __init__(
        self, fname: Path | str, registry: dict[str, Path] = None, log: Logger = None
    ):
        super().__init__(fname, log)
        self.registry = registry
        self.rejected = []

    @classmethod
    def load(
        cls: BirdDataset,
        fname: Path | str,
        registry: dict[str, Path] = None,
        log: Logger = None,
    ) -> BirdDataset:
        """
        Load question records from a BIRD question file

        Parameters
        ----------
        fname
            See documentation for :py:attr:`~.Data.fname`
        registry : dict[str, Path], optional
            See documentation for :py:attr:`~.BirdDataset.registry`. If not provided,
            no record is rejected for its db_id.
        log : Logger, optional
            A logging instance

        Returns
        -------
        BirdDataset
            A dataset with the records loaded into its properties
        """
        dataset = cls(fname, registry, log=log)
        dataset.read()
        return dataset

    def read(self):
        """
        Read the records of the file into :py:attr:`~.BirdDataset.data`

        Records whose db_id has no database are dropped and listed in a warning

        Raises
        ------
        FileNotFoundError
            If the question file does not exist
        FormatError
            If the file isn't a JSON list or a record is malformed
        """
        super().read()
        self.data = []
        self.rejected = []
        for example in self.__iter__():
            if self.registry is not None and example.db_id not in self.registry:
                self.rejected.append(example.question_id)
                continue
            self.data.append(example)
        if self.rejected:
            first_few = 5 if len(self.rejected) > 5 else len(self.rejected)
            self.log.warning(
                f"{len(self.rejected)} records refer to an unknown database and were"
                f" rejected. Here are the first few: {self.rejected[:first_few]}"
            )
        self.log.info(f"Loaded {len(self.data)} questions from {self.fname}")

    def __iter__(self) -> Iterator[BenchExample]:
        """
        Parse the records of the file without storing anything

        Yields
        ------
        BenchExample
            Each record in the file, in file order
        """
        for idx, record in enumerate(self._records()):
            try:
                evidence = record.get("evidence") or None
                yield BenchExample(
                    question_id=int(record["question_id"]),
                    db_id=str(record["db_id"]),
                    question=str(record["question"]),
                    gold_evidence=evidence,
                    gold_sql=str(record["SQL"]),
                    difficulty=Difficulty(record["difficulty"]),
                )
            except KeyError as e:
                raise FormatError(
                    f"Record {idx} of {self.fname} is missing the field {e}"
                ) from e
            except (AttributeError, TypeError, ValueError) as e:
                raise FormatError(
                    f"Record {idx} of {self.fname} is malformed: {e}"
                ) from e

    def _records(self) -> list[dict]:
        with self.hook_compressed(self.fname, mode="r") as handle:
            try:
                records = json.load(handle)
            except json.JSONDecodeError as e:
                raise FormatError(f"{self.fname} is not valid JSON: {e}") from e
        if not isinstance(records, list):
            raise FormatError(f"{self.fname} must contain a JSON list of records")
        return records

    def write(self):
        """
        Refuse to write: BIRD question files are read-only

        Raises
        ------
        NotImplementedError
            Always
        """
        raise NotImplementedError("BIRD question files are read-only")


def find_databases(root: Path | str) -> dict[str, Path]:
    """
    Find the SQLite file of every database below a BIRD root directory

    Each database lives at <root>/<dbdir>/<db_id>/<db_id>.sqlite where dbdir is
    the first of dev_databases, train_databases, and databases that exists

    Parameters
    ----------
    root : Path | str
        The root of a BIRD-layout directory

    Returns
    -------
    dict[str, Path]
        Maps each db_id to its SQLite file, sorted by db_id
    """
    root = Path(root)
    for name in DATABASE_DIRS:
        dbdir = root / name
        if dbdir.is_dir():
            break
    else:
        return {}
    registry = {}
    for subdir in sorted(dbdir.iterdir()):
        path = subdir / f"{subdir.name}.sqlite"
        if subdir.is_dir() and path.exists():
            registry[subdir.name] = path
    return registry


def load_bird(
    root: Path | str, log: Logger = None
) -> tuple[list[BenchExample], dict[str, Path]]:
    """
    Load the questions and database registry of a BIRD-layout directory

    Parameters
    ----------
    root : Path | str
        A directory containing dev.json (or train.json) and a directory of
        per-database subdirectories
    log : Logger, optional
        A logging instance

    Returns
    -------
    tuple[list[BenchExample], dict[str, Path]]
        The question records and a map from db_id to SQLite file

    Raises
    ------
    FileNotFoundError
        If no question file can be found
    FormatError
        If a record is malformed
    """
    root = Path(root)
    for name in QUESTION_FILES:
        qfile = root / name
        if qfile.exists():
            break
    else:
        raise FileNotFoundError(
            f"No question file ({', '.join(QUESTION_FILES)}) found in {root}"
        )
    registry = find_databases(root)
    dataset = BirdDataset.load(qfile, registry, log=log)
    return dataset.data, registry


def read_training_pairs(
    fname: Path | str, log: Logger = None
) -> list[tuple[str, str, str]]:
    """
    Read (question, SQL, db_id) pairs from a BIRD train.json file

    Raises
    ------
    FileNotFoundError
        If the file does not exist
    FormatError
        If a record lacks one of the three fields
    """
    dataset = BirdDataset(fname, log=log)
    if not Path(fname).exists():
        raise FileNotFoundError(f"No such file: {fname}")
    pairs = []
    for idx, record in enumerate(dataset._records()):
        try:
            pairs.append((record["question"], record["SQL"], record["db_id"]))
        except (KeyError, TypeError) as e:
            raise FormatError(f"Record {idx} of {fname} is missing the field {e}")
    dataset.log.info(f"Read {len(pairs)} training pairs from {fname}")
    return pairs
