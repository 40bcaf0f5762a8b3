from __future__ import annotations
import os
import gzip
from pathlib import Path
from typing import Iterator, IO
from abc import ABC, abstractmethod
from logging import getLogger, Logger


class DataError(Exception):
    """
    Base class for every failure involving one of our data files or databases
    """


class FormatError(DataError):
    """
    A file could not be parsed or is missing a required field
    """


class InvariantError(DataError):
    """
    A value violates one of the invariants of its type
    """


class DatabaseError(DataError):
    """
    A database file is unreadable or corrupt, or a table/column is unknown
    """


class PersistenceError(DataError):
    """
    An I/O failure while writing a file

    Attributes
    ----------
    path : Path
        The file that could not be written
    """

    def __init__(self, path: Path | str, message: str):
        self.path = Path(path)
        super().__init__(f"{message}: {self.path}")


class Data(ABC):
    """
    Abstract class for accessing data files

    Attributes
    ----------
    fname : Path | str
        The path to the file containing the data
    data : object
        The contents of the data file, once loaded
    log: Logger
        A logging instance for recording debug statements.
    """

    def __init__(self, fname: Path | str, log: Logger = None):
        if isinstance(fname, str):
            fname = Path(fname)
        self.fname = fname
        self.data = None
        self.log = log or getLogger(self.__class__.__name__)
        super().__init__()

    def __repr__(self):
        return str(self.fname)

    @classmethod
    @abstractmethod
    def load(cls: Data, fname: Path):
        """
        Read the file contents and perform any recommended pre-processing

        Parameters
        ----------
        fname : Path
            See documentation for :py:attr:`~.Data.fname`
        """
        pass

    def unset(self) -> bool:
        """
        Whether the data has been loaded into the object yet

        Returns
        -------
        bool
            True if :py:attr:`~.Data.data` is None else False
        """
        return self.data is None

    @abstractmethod
    def read(self):
        """
        Read the raw file contents into the class properties

        Raises
        ------
        FileNotFoundError
            If :py:attr:`~.Data.fname` does not exist
        """
        if not self.unset():
            self.log.warning("The data has already been loaded. Overriding.")
        if not Path(self.fname).exists():
            raise FileNotFoundError(f"No such file: {self.fname}")

    @abstractmethod
    def __iter__(self) -> Iterator:
        """
        Return an iterator over the raw file contents

        Yields
        ------
        Iterator
            An iterator over each record in the file
        """
        pass

    def _write_text(self, text: str):
        """
        Write text to :py:attr:`~.Data.fname`, compressing if it ends with .gz

        Parameters
        ----------
        text : str
            The full contents of the file

        Raises
        ------
        PersistenceError
            If the file could not be written
        """
        try:
            with self.hook_compressed(self.fname, mode="wb") as out:
                out.write(text.encode("utf-8"))
        except OSError as e:
            raise PersistenceError(self.fname, f"Unable to write ({e})") from e
        self.log.debug(f"Wrote {len(text)} characters to {self.fname}")

    @staticmethod
    def hook_compressed(filename: str, mode: str) -> IO:
        """
        A utility to help open files regardless of their compression

        Based off of python's fileinput.hook_compressed and copied from
        https://stackoverflow.com/a/64106815/16815703

        Parameters
        ----------
        filename : str
            The path to the file
        mode : str
            Either 'r' for read or 'w' for write

        Returns
        -------
        IO
            The resolved file object
        """
        if "b" not in mode:
            mode += "t"
        ext = os.path.splitext(filename)[1]
        if ext == ".gz":
            if "b" in mode:
                # fixed mtime keeps compressed output byte-stable
                return gzip.GzipFile(filename, mode, mtime=0)
            return gzip.open(filename, mode, encoding="utf-8")
        elif "b" in mode:
            return open(filename, mode)
        else:
            return open(filename, mode, encoding="utf-8")
