from __future__ import annotations
import sys
from pathlib import Path

import click

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


def _key(name: str) -> str:
    return name.replace("-", "_")


def _param_names(command: click.Command) -> dict[str, str]:
    """
    Map the long option names of a command (and its parameter names) to the
    parameter each one sets
    """
    names = {}
    for param in command.params:
        names[param.name] = param.name
        for opt in param.opts:
            if opt.startswith("--"):
                names[_key(opt[2:])] = param.name
    return names


def read_config(path: Path | str) -> dict:
    """
    Read a TOML config file

    Raises
    ------
    click.BadParameter
        If the file can't be read or isn't valid TOML
    """
    try:
        with open(path, "rb") as handle:
            return tomllib.load(handle)
    except (OSError, tomllib.TOMLDecodeError) as e:
        raise click.BadParameter(f"Unable to read config file {path}: {e}")


def default_map(config: dict, group: click.Group) -> dict:
    """
    Turn a config into the default_map of a click group

    Top-level keys apply to every subcommand with an option of the same name. A
    table named after a subcommand applies to that subcommand only and takes
    precedence. Nested groups are configured by nested tables (ex: [fewshot.build]).
    Keys may be written with dashes or underscores.

    Parameters
    ----------
    config : dict
        The parsed config file
    group : click.Group
        The group whose subcommands are configured

    Returns
    -------
    dict
        The default_map, keyed by subcommand name

    Raises
    ------
    click.BadParameter
        If a table names an unknown subcommand or option
    """
    shared = {_key(k): v for k, v in config.items() if not isinstance(v, dict)}
    tables = {k: v for k, v in config.items() if isinstance(v, dict)}
    unknown = set(tables) - set(group.commands)
    if unknown:
        raise click.BadParameter(f"Unknown config section(s): {sorted(unknown)}")
    defaults = {}
    for name, command in group.commands.items():
        table = tables.get(name, {})
        if isinstance(command, click.Group):
            defaults[name] = default_map({**shared, **table}, command)
            continue
        params = _param_names(command)
        entry = {params[k]: v for k, v in shared.items() if k in params}
        for key, value in table.items():
            if _key(key) not in params:
                raise click.BadParameter(
                    f"'{key}' is not an option of {command.name}"
                )
            entry[params[_key(key)]] = value
        defaults[name] = entry
    return defaults


def load_config(ctx: click.Context, param: click.Parameter, value: Path):
    """
    A click callback that installs a config file as the default_map of the group
    """
    if value is None:
        return
    ctx.default_map = default_map(read_config(value), ctx.command)
