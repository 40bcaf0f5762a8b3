from __future__ import annotations
from pathlib import Path
from functools import lru_cache


PROMPT_DIR = Path(__file__).parent


@lru_cache(maxsize=None)
def load_prompt(name: str, version: int = 1) -> str:
    """
    Read a versioned prompt template shipped with the package

    Parameters
    ----------
    name : str
        The purpose of the prompt (ex: "route")
    version : int, optional
        The version of the template

    Returns
    -------
    str
        The contents of <name>.v<version>.txt
    """
    return (PROMPT_DIR / f"{name}.v{version}.txt").read_text(encoding="utf-8")
