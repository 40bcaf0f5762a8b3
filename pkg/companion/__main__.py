#!/usr/bin/env python

from __future__ import annotations
from pathlib import Path

import click

from .config import load_config

# AVOID IMPORTING ANYTHING ABOVE
# any imports we put here will make it slower to use the command line client
# a basic "ca --help" should be quick and require very few imports, for example


class DataFailure(click.ClickException):
    """
    A data error that escaped a command
    """

    exit_code = 2


class CompanionGroup(click.Group):
    """
    A group that exits with 1 on usage errors and with 2 on data errors
    """

    def make_context(self, *args, **kwargs):
        try:
            return super().make_context(*args, **kwargs)
        except click.UsageError as e:
            e.exit_code = 1
            raise

    def invoke(self, ctx: click.Context):
        from .data import DataError

        try:
            return super().invoke(ctx)
        except click.UsageError as e:
            e.exit_code = 1
            raise
        except (DataError, OSError) as e:
            raise DataFailure(str(e)) from e


def gateway_options(command):
    """
    Add the options that configure the LLM gateway
    """
    options = (
        click.option(
            "--mock-script",
            type=click.Path(exists=True, dir_okay=False, path_type=Path),
            default=None,
            help="A .mockscript.json file of scripted LLM responses",
        ),
        click.option(
            "--base-url",
            type=str,
            default=None,
            envvar="CA_LLM_BASE_URL",
            help="The base URL of a chat-completion endpoint",
        ),
        click.option(
            "--model",
            type=str,
            default=None,
            envvar="CA_LLM_MODEL",
            help="The model to request from the endpoint",
        ),
        click.option(
            "--max-in-flight",
            type=click.IntRange(min=1),
            default=4,
            show_default=True,
            help="The maximum number of concurrent LLM requests",
        ),
    )
    for option in reversed(options):
        command = option(command)
    return command


def _load_knowledge_dir(directory: Path, log) -> dict:
    from .data import load_knowledge

    knowledge = {}
    for path in sorted(directory.glob("*.knowledge.json*")):
        sk = load_knowledge(path, log=log)
        knowledge[sk.db_id] = sk
    log.info(f"Loaded the knowledge of {len(knowledge)} databases from {directory}")
    return knowledge


################### Companion ##################
@click.group(cls=CompanionGroup)
@click.version_option(message="%(version)s")
@click.option(
    "--config",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    default=None,
    is_eager=True,
    expose_value=False,
    callback=load_config,
    help="A TOML file of option defaults. Flags take precedence.",
)
def main():
    """
    companion: Construct substitute evidence for Text-to-SQL questions and measure
    execution accuracy when the gold evidence is missing
    """
    pass


@main.command()
@click.argument("target", type=click.Path(exists=True, path_type=Path))
@click.option(
    "-o",
    "--out",
    type=click.Path(file_okay=False, path_type=Path),
    default=Path("."),
    show_default="current directory",
    help="A directory in which to write <db_id>.knowledge.json files",
)
@click.option(
    "--sample-n",
    type=click.IntRange(min=1),
    default=200,
    show_default=True,
    help="The number of values to sample from each column",
)
@click.option(
    "--seed",
    type=int,
    default=0,
    show_default=True,
    help="Seeds the row sample drawn from very large tables",
)
@click.option(
    "--workers",
    type=click.IntRange(min=1),
    default=4,
    show_default=True,
    help="The number of columns to mine concurrently",
)
@gateway_options
@click.option(
    "-v",
    "--verbosity",
    type=click.Choice(["CRITICAL", "ERROR", "WARNING", "INFO", "DEBUG", "NOTSET"]),
    default="INFO",
    show_default=True,
    help="The level of verbosity desired",
)
def mine(
    target: Path,
    out: Path = Path("."),
    sample_n: int = 200,
    seed: int = 0,
    workers: int = 4,
    mock_script: Path = None,
    base_url: str = None,
    model: str = None,
    max_in_flight: int = 4,
    verbosity: str = "INFO",
):
    """
    Mine the schema-knowledge of SQLite databases

    TARGET is either a single .sqlite file or the root of a BIRD-layout directory,
    in which case every database below it is mined.
    """
    from .logging import getLogger
    from .gateway import make_gateway
    from .data import find_databases, knowledge_path, save_knowledge
    from .profiler import DatabaseHandle, SamplingSpec, mine_schema_knowledge

    log = getLogger(name="mine", level=verbosity)

    if target.is_dir():
        databases = list(find_databases(target).values())
        if not databases:
            raise FileNotFoundError(f"No databases found below {target}")
    else:
        databases = [target]

    gateway = make_gateway(mock_script, base_url, model, max_in_flight, log=log)
    spec = SamplingSpec(n=sample_n, seed=seed)
    out.mkdir(parents=True, exist_ok=True)
    for path in databases:
        db = DatabaseHandle(path)
        sk = mine_schema_knowledge(db, gateway, spec, workers=workers, log=log)
        dest = knowledge_path(out, sk.db_id)
        save_knowledge(sk, dest, log=log)
        log.info(f"Wrote the knowledge of {sk.db_id} to {dest}")


@main.group()
def fewshot():
    """
    Manage few-shot libraries of solved questions
    """
    pass


@fewshot.command(name="build")
@click.argument("train", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option(
    "-o",
    "--out",
    type=click.Path(dir_okay=False, path_type=Path),
    default=Path("train.fewshot.jsonl"),
    show_default=True,
    help="The library file to write. Use a .gz suffix to compress it.",
)
@click.option(
    "--knowledge-dir",
    type=click.Path(exists=True, file_okay=False, path_type=Path),
    default=None,
    help=(
        "A directory of knowledge files. If provided, pairs whose SQL refers to"
        " tables or columns missing from their database are dropped."
    ),
)
@click.option(
    "--query",
    type=str,
    default=None,
    help="A question for which to print the most similar entries once built",
)
@click.option(
    "-k",
    "--k",
    type=click.IntRange(min=1),
    default=5,
    show_default=True,
    help="The number of entries to print for --query",
)
@click.option(
    "--workers",
    type=click.IntRange(min=1),
    default=4,
    show_default=True,
    help="The number of pairs to prepare concurrently",
)
@gateway_options
@click.option(
    "-v",
    "--verbosity",
    type=click.Choice(["CRITICAL", "ERROR", "WARNING", "INFO", "DEBUG", "NOTSET"]),
    default="INFO",
    show_default=True,
    help="The level of verbosity desired",
)
def build(
    train: Path,
    out: Path = Path("train.fewshot.jsonl"),
    knowledge_dir: Path = None,
    query: str = None,
    k: int = 5,
    workers: int = 4,
    mock_script: Path = None,
    base_url: str = None,
    model: str = None,
    max_in_flight: int = 4,
    verbosity: str = "INFO",
):
    """
    Build a few-shot library from the (question, SQL, db_id) pairs of a BIRD
    train.json file
    """
    from .logging import getLogger
    from .gateway import make_gateway
    from .data import read_training_pairs
    from .fewshot import build_library, retrieve_similar, render_fewshot_block

    log = getLogger(name="fewshot", level=verbosity)

    pairs = read_training_pairs(train, log=log)
    sk_map = None
    if knowledge_dir is not None:
        sk_map = _load_knowledge_dir(knowledge_dir, log)
    gateway = make_gateway(mock_script, base_url, model, max_in_flight, log=log)
    lib = build_library(pairs, sk_map, gateway, workers=workers, log=log)
    lib.fname = out
    lib.write()
    log.info(f"Wrote {len(lib)} entries to {out} ({len(lib.dropped)} pairs dropped)")

    if query is not None:
        click.echo(render_fewshot_block(retrieve_similar(lib, query, k)))


@main.command()
@click.argument("question", type=str)
@click.option(
    "--knowledge",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    required=True,
    help="The knowledge file of the question's database",
)
@click.option(
    "--tau",
    type=click.FloatRange(min=0, max=1),
    default=0.5,
    show_default=True,
    help="The confidence needed to select an evidence type",
)
@gateway_options
@click.option(
    "-v",
    "--verbosity",
    type=click.Choice(["CRITICAL", "ERROR", "WARNING", "INFO", "DEBUG", "NOTSET"]),
    default="INFO",
    show_default=True,
    help="The level of verbosity desired",
)
def route(
    question: str,
    knowledge: Path,
    tau: float = 0.5,
    mock_script: Path = None,
    base_url: str = None,
    model: str = None,
    max_in_flight: int = 4,
    verbosity: str = "INFO",
):
    """
    Print the evidence types a question needs, as JSON
    """
    import json

    from .logging import getLogger
    from .gateway import make_gateway
    from .data import load_knowledge
    from .router import route as route_question

    log = getLogger(name="route", level=verbosity)

    sk = load_knowledge(knowledge, log=log)
    gateway = make_gateway(mock_script, base_url, model, max_in_flight, log=log)
    decision = route_question(question, sk, gateway, tau, log=log)
    click.echo(json.dumps(decision.to_dict()))


@main.command()
@click.argument("question", type=str)
@click.option(
    "--knowledge",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    required=True,
    help="The knowledge file of the question's database",
)
@click.option(
    "--fewshot",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    default=None,
    help="A few-shot library file",
)
@click.option(
    "--tau",
    type=click.FloatRange(min=0, max=1),
    default=0.5,
    show_default=True,
    help="The confidence needed to select an evidence type",
)
@click.option(
    "-k",
    "--k",
    type=click.IntRange(min=1),
    default=5,
    show_default=True,
    help="The number of few-shot entries to attach",
)
@click.option(
    "--routing/--no-routing",
    default=True,
    show_default=True,
    help="Whether to run only the generators the routing decision selects",
)
@click.option(
    "--prompt",
    is_flag=True,
    default=False,
    show_default=True,
    help="Print the SQL generation prompt instead of the bundle",
)
@gateway_options
@click.option(
    "-v",
    "--verbosity",
    type=click.Choice(["CRITICAL", "ERROR", "WARNING", "INFO", "DEBUG", "NOTSET"]),
    default="INFO",
    show_default=True,
    help="The level of verbosity desired",
)
def evidence(
    question: str,
    knowledge: Path,
    fewshot: Path = None,
    tau: float = 0.5,
    k: int = 5,
    routing: bool = True,
    prompt: bool = False,
    mock_script: Path = None,
    base_url: str = None,
    model: str = None,
    max_in_flight: int = 4,
    verbosity: str = "INFO",
):
    """
    Construct the substitute evidence of a question

    The bundle is printed as a single line of JSON
    """
    from .logging import getLogger
    from .gateway import make_gateway
    from .data import load_knowledge, FewShotLibrary
    from .evidence import build_evidence, assemble_prompt

    log = getLogger(name="evidence", level=verbosity)

    sk = load_knowledge(knowledge, log=log)
    lib = None
    if fewshot is not None:
        lib = FewShotLibrary.load(fewshot, log=log)
    gateway = make_gateway(mock_script, base_url, model, max_in_flight, log=log)
    bundle = build_evidence(
        question, sk, lib, gateway, tau, k, routed=routing, log=log
    )
    if prompt:
        click.echo(assemble_prompt(question, sk, bundle, full_schema=True), nl=False)
    else:
        click.echo(bundle.dumps())


@main.command()
@click.option(
    "--bird",
    type=click.Path(exists=True, file_okay=False, path_type=Path),
    required=True,
    help="The root of a BIRD-layout directory",
)
@click.option(
    "--mode",
    type=click.Choice(["no-evidence", "gold-evidence", "ca", "ca-sma", "qra-only"]),
    default="ca",
    show_default=True,
    help="How evidence reaches the prompt",
)
@click.option(
    "--missingness",
    type=click.FloatRange(min=0, max=1),
    default=None,
    show_default="0 for gold-evidence and 1 otherwise",
    help="The fraction of examples whose gold evidence is withheld",
)
@click.option(
    "--seed",
    type=int,
    default=0,
    show_default=True,
    help="Seeds evidence masking and column sampling",
)
@click.option(
    "-o",
    "--out",
    type=click.Path(file_okay=False, path_type=Path),
    required=True,
    help="A directory for predictions, bundles, and results",
)
@click.option(
    "--repeats",
    type=click.IntRange(min=1),
    default=1,
    show_default=True,
    help="The number of times to repeat generation and evaluation",
)
@click.option(
    "--knowledge-dir",
    type=click.Path(file_okay=False, path_type=Path),
    default=None,
    show_default="<out>/knowledge",
    help="Where mined knowledge is cached",
)
@click.option(
    "--fewshot",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    default=None,
    help="A few-shot library file",
)
@click.option(
    "--timeout",
    type=click.FloatRange(min=0, min_open=True),
    default=30.0,
    show_default=True,
    help="The time limit of each query, in seconds",
)
@click.option(
    "--tau",
    type=click.FloatRange(min=0, max=1),
    default=0.5,
    show_default=True,
    help="The confidence needed to select an evidence type",
)
@click.option(
    "-k",
    "--k",
    type=click.IntRange(min=1),
    default=5,
    show_default=True,
    help="The number of few-shot entries to attach",
)
@click.option(
    "--sample-n",
    type=click.IntRange(min=1),
    default=200,
    show_default=True,
    help="The number of values to sample per column when mining",
)
@click.option(
    "--workers",
    type=click.IntRange(min=1),
    default=4,
    show_default=True,
    help="The number of questions to process concurrently",
)
@gateway_options
@click.option(
    "-v",
    "--verbosity",
    type=click.Choice(["CRITICAL", "ERROR", "WARNING", "INFO", "DEBUG", "NOTSET"]),
    default="INFO",
    show_default=True,
    help="The level of verbosity desired",
)
@click.pass_context
def run(
    ctx: click.Context,
    bird: Path,
    mode: str = "ca",
    missingness: float = None,
    seed: int = 0,
    out: Path = None,
    repeats: int = 1,
    knowledge_dir: Path = None,
    fewshot: Path = None,
    timeout: float = 30.0,
    tau: float = 0.5,
    k: int = 5,
    sample_n: int = 200,
    workers: int = 4,
    mock_script: Path = None,
    base_url: str = None,
    model: str = None,
    max_in_flight: int = 4,
    verbosity: str = "INFO",
):
    """
    Generate SQL for every question of a BIRD-layout dataset and report its
    execution accuracy

    Exits with status 3 if any question failed to produce executable SQL
    """
    from .logging import getLogger
    from .gateway import make_gateway
    from .bench import RunConfig, run_pipeline

    log = getLogger(name="run", level=verbosity)

    gateway = make_gateway(mock_script, base_url, model, max_in_flight, log=log)
    if gateway is None:
        raise click.UsageError(
            "A run needs an LLM: provide --mock-script or --base-url"
        )
    config = RunConfig(
        bird_root=bird,
        mode=mode,
        out_dir=out,
        missingness=missingness,
        seed=seed,
        repeats=repeats,
        timeout=timeout,
        tau=tau,
        k=k,
        knowledge_dir=knowledge_dir,
        fewshot=fewshot,
        sample_n=sample_n,
        workers=workers,
    )
    summary = run_pipeline(config, gateway, log=log)
    click.echo(summary.render(), nl=False)
    if summary.failures:
        log.warning(f"Per-question failures: {dict(sorted(summary.failures.items()))}")
        ctx.exit(3)


@main.command(name="eval")
@click.option(
    "--predictions",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    required=True,
    help="A JSON object of predicted SQL keyed by question_id",
)
@click.option(
    "--bird",
    type=click.Path(exists=True, file_okay=False, path_type=Path),
    required=True,
    help="The root of a BIRD-layout directory",
)
@click.option(
    "-o",
    "--out",
    type=click.Path(dir_okay=False, path_type=Path),
    default=None,
    help="A file to which to write the evaluation result as JSON",
)
@click.option(
    "--timeout",
    type=click.FloatRange(min=0, min_open=True),
    default=30.0,
    show_default=True,
    help="The time limit of each query, in seconds",
)
@click.option(
    "--format",
    "fmt",
    type=click.Choice(["table", "csv"]),
    default="table",
    show_default=True,
    help="How to print the report",
)
@click.option(
    "--workers",
    type=click.IntRange(min=1),
    default=4,
    show_default=True,
    help="The number of questions to evaluate concurrently",
)
@click.option(
    "-v",
    "--verbosity",
    type=click.Choice(["CRITICAL", "ERROR", "WARNING", "INFO", "DEBUG", "NOTSET"]),
    default="INFO",
    show_default=True,
    help="The level of verbosity desired",
)
@click.pass_context
def evaluate(
    ctx: click.Context,
    predictions: Path,
    bird: Path,
    out: Path = None,
    timeout: float = 30.0,
    fmt: str = "table",
    workers: int = 4,
    verbosity: str = "INFO",
):
    """
    Score a file of predicted SQL by execution accuracy

    Exits with status 3 if any prediction was missing or failed to execute
    """
    from .logging import getLogger
    from .data import load_bird
    from .bench import Predictions, evaluate as score, write_json

    log = getLogger(name="eval", level=verbosity)

    examples, registry = load_bird(bird, log=log)
    preds = Predictions.load(predictions, log=log)
    result = score(preds.data, examples, registry, timeout, workers=workers, log=log)
    if out is not None:
        write_json(out, result.to_dict())
    click.echo(result.render(fmt), nl=False)
    if result.failures:
        log.warning(f"Per-question failures: {dict(sorted(result.failures.items()))}")
        ctx.exit(3)


@main.command()
@click.option(
    "--result",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    required=True,
    help="A result.json file written by run or eval",
)
@click.option(
    "--format",
    "fmt",
    type=click.Choice(["table", "csv"]),
    default="table",
    show_default=True,
    help="How to print the report",
)
@click.option(
    "-v",
    "--verbosity",
    type=click.Choice(["CRITICAL", "ERROR", "WARNING", "INFO", "DEBUG", "NOTSET"]),
    default="INFO",
    show_default=True,
    help="The level of verbosity desired",
)
def report(
    result: Path,
    fmt: str = "table",
    verbosity: str = "INFO",
):
    """
    Print the execution accuracy stored in a result file
    """
    from .logging import getLogger
    from .data import FormatError
    from .bench import STRATA, read_json, render_ex

    log = getLogger(name="report", level=verbosity)

    obj = read_json(result)
    try:
        ex = {name: obj["ex"][name] for name in STRATA}
    except (KeyError, TypeError) as e:
        raise FormatError(f"{result} has no execution accuracy: {e}") from e
    log.debug(f"Read the result of a {obj.get('mode', 'standalone')} evaluation")
    click.echo(render_ex(ex, fmt), nl=False)


if __name__ == "__main__":
    # run the CLI if someone tries 'python -m companion' on the command line
    main(prog_name="ca")
