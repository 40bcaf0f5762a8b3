from __future__ import annotations
import json
import time
import sqlite3
from enum import Enum
from pathlib import Path
from logging import Logger
from collections import Counter
from dataclasses import dataclass, field
from decimal import Decimal, ROUND_FLOOR, ROUND_HALF_UP
from concurrent.futures import ThreadPoolExecutor
from typing import Iterator, Optional

import numpy as np

from .logging import getLogger
from .fewshot import TOP_K
from .router import DEFAULT_TAU
from .gateway import Gateway
from .profiler import DatabaseHandle, SamplingSpec, mine_schema_knowledge
from .evidence import (
    EvidenceBundle,
    ExtractionError,
    GenerationError,
    build_evidence,
    assemble_prompt,
    generate_sql,
)
from .data import (
    Data,
    DataError,
    FormatError,
    DatabaseError,
    BenchExample,
    Difficulty,
    FewShotLibrary,
    SchemaKnowledge,
    PersistenceError,
    knowledge_path,
    save_knowledge,
    load_knowledge,
    load_bird,
)


DEFAULT_TIMEOUT = 30.0
PROGRESS_STEPS = 1000
STRATA = ("simple", "moderate", "challenging", "total")
# failures on the prediction side of an example
PREDICTION_FAILURES = (
    "generation-error",
    "extraction-error",
    "execution-error",
    "timeout",
    "missing-prediction",
)


class ExecutionError(Exception):
    """
    SQL that failed to execute
    """

    pass


class QueryTimeout(ExecutionError):
    """
    SQL that ran out of time
    """

    pass


class Mode(str, Enum):
    NO_EVIDENCE = "no-evidence"
    GOLD_EVIDENCE = "gold-evidence"
    CA = "ca"
    CA_SMA = "ca-sma"
    QRA_ONLY = "qra-only"

    @property
    def uses_bundles(self) -> bool:
        return self in (Mode.CA, Mode.CA_SMA, Mode.QRA_ONLY)

    @property
    def default_missingness(self) -> float:
        return 0.0 if self is Mode.GOLD_EVIDENCE else 1.0


@dataclass(frozen=True)
class MissingnessSpec:
    """
    How much gold evidence to withhold

    Attributes
    ----------
    level : float
        The fraction of examples whose evidence is removed
    seed : int
        The seed of the permutation choosing which examples those are
    """

    level: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.level <= 1:
            raise ValueError(f"The missingness level must lie in [0, 1]: {self.level}")


def missingness_mask(n: int, spec: MissingnessSpec) -> set[int]:
    """
    Choose the indices of the examples whose evidence is withheld

    A seeded permutation of the n indices is computed and its first
    floor(level * n) entries are masked, so that for a fixed seed the mask of a
    lower level is always contained in the mask of a higher one.
    """
    order = np.random.default_rng(spec.seed).permutation(n)
    count = int((Decimal(repr(spec.level)) * n).to_integral_value(ROUND_FLOOR))
    return {int(idx) for idx in order[:count]}


def apply_missingness(
    examples: list[BenchExample], spec: MissingnessSpec
) -> list[BenchExample]:
    """
    Remove the gold evidence of a seeded fraction of the examples

    Parameters
    ----------
    examples : list[BenchExample]
        The examples
    spec : MissingnessSpec
        The level and seed

    Returns
    -------
    list[BenchExample]
        The examples, in the same order, with some gold evidence removed
    """
    mask = missingness_mask(len(examples), spec)
    return [
        ex.without_evidence() if idx in mask else ex for idx, ex in enumerate(examples)
    ]


def execute_sql(
    db_path: Path | str, sql: str, timeout: float = DEFAULT_TIMEOUT
) -> list[tuple]:
    """
    Execute SQL against a read-only database with a wall-clock limit

    Parameters
    ----------
    db_path : Path | str
        The SQLite database
    sql : str
        The query
    timeout : float, optional
        The maximum number of seconds the query may run

    Returns
    -------
    list[tuple]
        Every row of the result

    Raises
    ------
    DatabaseError
        If the database cannot be opened
    QueryTimeout
        If the query ran out of time
    ExecutionError
        If the query is invalid or fails while running
    """
    conn = DatabaseHandle(db_path).connect()
    deadline = time.monotonic() + timeout
    conn.set_progress_handler(lambda: int(time.monotonic() > deadline), PROGRESS_STEPS)
    try:
        return conn.execute(sql).fetchall()
    except (sqlite3.Error, sqlite3.Warning) as e:
        if time.monotonic() > deadline:
            raise QueryTimeout(f"Timed out after {timeout}s") from e
        raise ExecutionError(str(e)) from e
    finally:
        conn.close()


def _normalize_cell(value):
    if isinstance(value, float) and value.is_integer():
        return int(value)
    return value


def results_equal(a: list[tuple], b: list[tuple]) -> bool:
    """
    Compare two query results as sets of rows

    Row order and duplicate rows are ignored but column order within a row is not.
    Integers and reals of equal value compare equal, text is compared exactly, and
    NULL equals NULL.
    """

    def rows(result):
        return {tuple(_normalize_cell(v) for v in row) for row in result}

    return rows(a) == rows(b)


@dataclass(frozen=True)
class ExampleOutcome:
    question_id: int
    difficulty: Difficulty
    correct: bool
    failure: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "question_id": self.question_id,
            "difficulty": Difficulty(self.difficulty).value,
            "correct": self.correct,
            "failure": self.failure,
        }


def display_percent(value: Optional[float]) -> str:
    """
    Render a percentage with two decimals, rounding half up
    """
    if value is None:
        return "-"
    return str(Decimal(repr(value)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def render_ex(ex: dict, fmt: str = "table") -> str:
    """
    Render execution accuracy per stratum

    Parameters
    ----------
    ex : dict[str, float]
        The EX of each of simple, moderate, challenging and total
    fmt : str, optional
        "table" for a row of aligned columns or "csv"

    Returns
    -------
    str
        A header line and a value line
    """
    headers = [name.capitalize() for name in STRATA]
    values = [display_percent(ex.get(name)) for name in STRATA]
    if fmt == "csv":
        return ",".join(STRATA) + "\n" + ",".join(values) + "\n"
    if fmt != "table":
        raise ValueError(f"Unknown report format '{fmt}'")
    widths = [max(len(h), len(v)) for h, v in zip(headers, values)]
    return (
        " | ".join(h.rjust(w) for h, w in zip(headers, widths))
        + "\n"
        + " | ".join(v.rjust(w) for v, w in zip(values, widths))
        + "\n"
    )


@dataclass(frozen=True)
class EvalResult:
    """
    Execution accuracy, overall and by difficulty

    Attributes
    ----------
    per_example : tuple[ExampleOutcome]
        The outcome of every example, sorted by question_id
    counts : dict[str, tuple[int, int]]
        The (correct, total) counts of each stratum, total included
    """

    per_example: tuple
    counts: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(
            self,
            "per_example",
            tuple(sorted(self.per_example, key=lambda o: o.question_id)),
        )
        counts = {name: [0, 0] for name in STRATA}
        for outcome in self.per_example:
            for name in (Difficulty(outcome.difficulty).value, "total"):
                counts[name][0] += outcome.correct
                counts[name][1] += 1
        object.__setattr__(self, "counts", {k: tuple(v) for k, v in counts.items()})

    def _ex(self, name: str) -> Optional[float]:
        correct, total = self.counts[name]
        return 100 * correct / total if total else None

    @property
    def ex_simple(self) -> Optional[float]:
        return self._ex("simple")

    @property
    def ex_moderate(self) -> Optional[float]:
        return self._ex("moderate")

    @property
    def ex_challenging(self) -> Optional[float]:
        return self._ex("challenging")

    @property
    def ex_total(self) -> Optional[float]:
        return self._ex("total")

    @property
    def ex(self) -> dict:
        return {name: self._ex(name) for name in STRATA}

    @property
    def failures(self) -> Counter:
        """
        The number of examples that failed on the prediction side, by reason
        """
        return Counter(
            o.failure for o in self.per_example if o.failure in PREDICTION_FAILURES
        )

    def to_dict(self) -> dict:
        return {
            "ex": self.ex,
            "counts": {name: list(self.counts[name]) for name in STRATA},
            "per_example": [o.to_dict() for o in self.per_example],
        }

    @classmethod
    def from_dict(cls: EvalResult, obj: dict) -> EvalResult:
        try:
            outcomes = [
                ExampleOutcome(
                    int(o["question_id"]),
                    Difficulty(o["difficulty"]),
                    bool(o["correct"]),
                    o.get("failure"),
                )
                for o in obj["per_example"]
            ]
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"Malformed evaluation result: {e}") from e
        return cls(outcomes)

    def render(self, fmt: str = "table") -> str:
        return render_ex(self.ex, fmt)


def mean_ex(results: list[EvalResult]) -> dict:
    """
    Average the EX of several runs in every stratum
    """
    means = {}
    for name in STRATA:
        values = [r.ex[name] for r in results if r.ex[name] is not None]
        means[name] = sum(values) / len(values) if values else None
    return means


def _score_example(
    example: BenchExample,
    sql: Optional[str],
    failure: Optional[str],
    registry: dict[str, Path],
    timeout: float,
    log: Logger,
) -> ExampleOutcome:
    qid = example.question_id
    if sql is None:
        return ExampleOutcome(qid, example.difficulty, False, failure)
    try:
        db_path = registry.get(example.db_id)
        if db_path is None:
            raise DatabaseError(f"No database is registered as {example.db_id}")
        try:
            gold = execute_sql(db_path, example.gold_sql, timeout)
        except ExecutionError as e:
            log.warning(f"The gold SQL of question {qid} failed: {e}")
            return ExampleOutcome(qid, example.difficulty, False, "gold-error")
        try:
            predicted = execute_sql(db_path, sql, timeout)
        except QueryTimeout:
            log.debug(f"The prediction for question {qid} timed out")
            return ExampleOutcome(qid, example.difficulty, False, "timeout")
        except ExecutionError as e:
            log.debug(f"The prediction for question {qid} failed: {e}")
            return ExampleOutcome(qid, example.difficulty, False, "execution-error")
    except DatabaseError as e:
        log.warning(f"Question {qid} could not be scored: {e}")
        return ExampleOutcome(qid, example.difficulty, False, "database-error")
    return ExampleOutcome(qid, example.difficulty, results_equal(predicted, gold))


def evaluate(
    predictions: dict[int, Optional[str]],
    examples: list[BenchExample],
    registry: dict[str, Path],
    timeout: float = DEFAULT_TIMEOUT,
    failures: dict[int, str] = None,
    workers: int = 4,
    log: Logger = None,
) -> EvalResult:
    """
    Score predicted SQL by execution accuracy

    An example is correct iff both its gold and predicted SQL execute and their
    results are equal as sets of rows. An example whose database is missing or
    corrupt is scored incorrect with the failure "database-error". Examples run
    concurrently, each on its own read-only connection.

    Parameters
    ----------
    predictions : dict[int, str | None]
        Maps question_id to the predicted SQL, or None if no SQL was obtained
    examples : list[BenchExample]
        The examples
    registry : dict[str, Path]
        Maps each db_id to its database file
    timeout : float, optional
        The time limit of each query, in seconds
    failures : dict[int, str], optional
        The reason no SQL was obtained for a question. Defaults to
        "generation-error".
    workers : int, optional
        The number of examples to evaluate concurrently
    log : Logger, optional
        A logging instance

    Returns
    -------
    EvalResult
        The outcome of every example and the EX of each stratum

    Raises
    ------
    DataError
        If a prediction refers to an unknown question
    """
    if log is None:
        log = getLogger(name="bench", level="ERROR")
    failures = failures or {}
    known = {ex.question_id for ex in examples}
    unknown = sorted(set(predictions) - known)
    if unknown:
        raise DataError(f"Predictions refer to unknown questions: {unknown[:5]}")

    def score(example: BenchExample) -> ExampleOutcome:
        qid = example.question_id
        if qid not in predictions:
            return ExampleOutcome(qid, example.difficulty, False, "missing-prediction")
        reason = failures.get(qid, "generation-error")
        return _score_example(example, predictions[qid], reason, registry, timeout, log)

    ordered = sorted(examples, key=lambda ex: ex.question_id)
    log.info(f"Evaluating {len(ordered)} predictions")
    with ThreadPoolExecutor(max_workers=max(workers, 1)) as pool:
        outcomes = list(pool.map(score, ordered))
    return EvalResult(outcomes)


class Predictions(Data):
    """
    Predicted SQL keyed by question_id, stored as a JSON object

    Attributes
    ----------
    data : dict[int, str | None]
        The prediction of each question (None if no SQL was obtained)
    fname : Path | str
        The path to the file (ex: predictions.json)
    log: Logger
        A logging instance for recording debug statements.
    """

    @classmethod
    def load(cls: Predictions, fname: Path | str, log: Logger = None) -> Predictions:
        predictions = cls(fname, log=log)
        predictions.read()
        return predictions

    def read(self):
        """
        Raises
        ------
        FileNotFoundError
            If the file does not exist
        FormatError
            If it isn't a JSON object of SQL text keyed by integer ids
        """
        super().read()
        self.data = dict(self.__iter__())
        self.log.info(f"Loaded {len(self.data)} predictions from {self.fname}")

    def __iter__(self) -> Iterator[tuple[int, Optional[str]]]:
        with self.hook_compressed(self.fname, mode="r") as handle:
            try:
                obj = json.load(handle)
            except json.JSONDecodeError as e:
                raise FormatError(f"{self.fname} is not valid JSON: {e}") from e
        if not isinstance(obj, dict):
            raise FormatError(f"{self.fname} must contain a JSON object")
        for key, sql in obj.items():
            if sql is not None and not isinstance(sql, str):
                raise FormatError(f"The prediction for {key} is not SQL text")
            try:
                yield int(key), sql
            except ValueError as e:
                raise FormatError(f"'{key}' is not a question_id") from e

    def write(self):
        self._write_text(
            json.dumps(
                {str(qid): self.data[qid] for qid in sorted(self.data)},
                indent=2,
                ensure_ascii=False,
            )
            + "\n"
        )


def write_json(path: Path, obj: dict):
    """
    Raises
    ------
    PersistenceError
        If the file could not be written
    """
    try:
        path.write_text(json.dumps(obj, indent=2, ensure_ascii=False) + "\n", "utf-8")
    except OSError as e:
        raise PersistenceError(path, f"Unable to write ({e})") from e


def read_json(path: Path | str) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"No such file: {path}")
    try:
        return json.loads(path.read_text("utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"{path} is not valid JSON: {e}") from e


@dataclass(frozen=True)
class RunConfig:
    """
    The settings of a benchmark run

    Attributes
    ----------
    bird_root : Path
        A BIRD-layout directory
    mode : Mode
        How evidence reaches the prompt
    out_dir : Path
        Where to write predictions, bundles and results
    missingness : float, optional
        The fraction of gold evidence to withhold. Defaults to 1 for the ca modes
        and no-evidence, and 0 for gold-evidence.
    seed : int
        The seed of missingness masking and column sampling
    repeats : int
        The number of times to repeat generation and evaluation
    timeout : float
        The time limit of each query, in seconds
    tau : float
        The routing threshold
    k : int
        The number of few-shot entries to retrieve
    knowledge_dir : Path, optional
        Where mined knowledge is cached. Defaults to <out_dir>/knowledge.
    fewshot : Path, optional
        A few-shot library file
    sample_n : int
        The number of values to sample per column when mining
    workers : int
        The number of examples to process concurrently
    """

    bird_root: Path
    mode: Mode
    out_dir: Path
    missingness: Optional[float] = None
    seed: int = 0
    repeats: int = 1
    timeout: float = DEFAULT_TIMEOUT
    tau: float = DEFAULT_TAU
    k: int = TOP_K
    knowledge_dir: Optional[Path] = None
    fewshot: Optional[Path] = None
    sample_n: int = 200
    workers: int = 4

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "bird_root", Path(self.bird_root))
        object.__setattr__(self, "out_dir", Path(self.out_dir))
        if self.missingness is None:
            object.__setattr__(self, "missingness", self.mode.default_missingness)
        if self.repeats < 1:
            raise ValueError("A run needs at least one repeat")

    @property
    def cache_dir(self) -> Path:
        return Path(self.knowledge_dir or self.out_dir / "knowledge")


def prepare_prompt(
    example: BenchExample,
    mode: Mode,
    sk: SchemaKnowledge,
    lib: FewShotLibrary = None,
    gateway: Gateway = None,
    tau: float = DEFAULT_TAU,
    k: int = TOP_K,
    log: Logger = None,
) -> tuple[str, Optional[EvidenceBundle]]:
    """
    Build the generation prompt of an example in a given mode

    In the bundle modes, an example that kept its gold evidence uses it and only
    the others get a bundle of substitute evidence. In qra-only mode, that bundle
    is routed on the mined knowledge but built from the schema structure alone,
    without few-shot entries. Every prompt carries the full schema.

    Returns
    -------
    tuple[str, EvidenceBundle | None]
        The prompt and the bundle it was built from, if any
    """
    mode = Mode(mode)
    question = example.question
    if mode is Mode.NO_EVIDENCE:
        return assemble_prompt(question, sk, full_schema=True), None
    if mode is Mode.GOLD_EVIDENCE or example.gold_evidence:
        prompt = assemble_prompt(
            question, sk, gold_evidence=example.gold_evidence or "", full_schema=True
        )
        return prompt, None
    if mode is Mode.QRA_ONLY:
        bundle = build_evidence(
            question, sk, None, gateway, tau, k, content=False, log=log
        )
    else:
        bundle = build_evidence(
            question, sk, lib, gateway, tau, k, routed=mode is Mode.CA, log=log
        )
    return assemble_prompt(question, sk, bundle, full_schema=True), bundle


def knowledge_for(
    db_ids: list[str],
    registry: dict[str, Path],
    cache_dir: Path,
    gateway: Gateway = None,
    spec: SamplingSpec = SamplingSpec(),
    log: Logger = None,
) -> dict[str, SchemaKnowledge]:
    """
    Load the cached knowledge of each database, mining and caching what is missing
    """
    if log is None:
        log = getLogger(name="bench", level="ERROR")
    knowledge = {}
    for db_id in sorted(set(db_ids)):
        path = knowledge_path(cache_dir, db_id)
        if path.exists():
            knowledge[db_id] = load_knowledge(path, log=log)
            continue
        log.info(f"Mining the knowledge of {db_id}")
        sk = mine_schema_knowledge(
            DatabaseHandle(registry[db_id]), gateway, spec, log=log
        )
        cache_dir.mkdir(parents=True, exist_ok=True)
        save_knowledge(sk, path, log=log)
        knowledge[db_id] = sk
    return knowledge


def _predict(
    example: BenchExample,
    config: RunConfig,
    sk: SchemaKnowledge,
    lib: FewShotLibrary,
    gateway: Gateway,
    log: Logger,
) -> tuple[Optional[str], Optional[str], Optional[EvidenceBundle]]:
    prompt, bundle = prepare_prompt(
        example, config.mode, sk, lib, gateway, config.tau, config.k, log
    )
    try:
        return generate_sql(gateway, prompt, log=log), None, bundle
    except GenerationError as e:
        log.warning(f"No SQL for question {example.question_id}: {e}")
        return None, "generation-error", bundle
    except ExtractionError as e:
        log.warning(f"No SQL for question {example.question_id}: {e}")
        return None, "extraction-error", bundle


def _write_run(
    out_dir: Path,
    predictions: dict,
    bundles: dict,
    result: EvalResult,
    header: dict,
    log: Logger,
):
    out_dir.mkdir(parents=True, exist_ok=True)
    preds = Predictions(out_dir / "predictions.json", log=log)
    preds.data = predictions
    preds.write()
    lines = [
        json.dumps(
            {
                "question_id": qid,
                "bundle": bundles[qid].to_dict() if bundles[qid] else None,
            },
            ensure_ascii=False,
        )
        for qid in sorted(bundles)
    ]
    try:
        (out_dir / "bundles.jsonl").write_text(
            "".join(line + "\n" for line in lines), "utf-8"
        )
        (out_dir / "report.txt").write_text(result.render(), "utf-8")
    except OSError as e:
        raise PersistenceError(out_dir, f"Unable to write ({e})") from e
    write_json(out_dir / "result.json", {**header, **result.to_dict()})


@dataclass(frozen=True)
class RunResult:
    """
    The evaluation of every repeat of a benchmark run
    """

    config: RunConfig
    runs: tuple

    @property
    def ex(self) -> dict:
        return mean_ex(list(self.runs))

    @property
    def failures(self) -> Counter:
        total = Counter()
        for run in self.runs:
            total.update(run.failures)
        return total

    def render(self, fmt: str = "table") -> str:
        return render_ex(self.ex, fmt)


def run_pipeline(
    config: RunConfig, gateway: Gateway, log: Logger = None
) -> RunResult:
    """
    Generate SQL for every example of a BIRD-layout dataset and score it

    Parameters
    ----------
    config : RunConfig
        The settings of the run
    gateway : Gateway
        The LLM gateway
    log : Logger, optional
        A logging instance

    Returns
    -------
    RunResult
        The evaluation of each repeat. Per-example failures are counted as incorrect
        and never abort the run.

    Raises
    ------
    ValueError
        If no gateway is provided
    FileNotFoundError
        If the dataset has no question file
    DataError
        If the dataset or a cached artifact is malformed
    """
    if log is None:
        log = getLogger(name="bench", level="ERROR")
    if gateway is None:
        raise ValueError("A run needs an LLM gateway to generate SQL")

    examples, registry = load_bird(config.bird_root, log=log)
    examples = sorted(examples, key=lambda ex: ex.question_id)
    examples = apply_missingness(
        examples, MissingnessSpec(config.missingness, config.seed)
    )
    masked = sum(ex.gold_evidence is None for ex in examples)
    log.info(f"{masked} of {len(examples)} examples have no gold evidence")

    knowledge = knowledge_for(
        [ex.db_id for ex in examples],
        registry,
        config.cache_dir,
        gateway,
        SamplingSpec(n=config.sample_n, seed=config.seed),
        log=log,
    )
    lib = FewShotLibrary.from_entries([], log=log)
    if config.mode.uses_bundles and config.fewshot is not None:
        lib = FewShotLibrary.load(config.fewshot, log=log)

    header = {
        "mode": config.mode.value,
        "missingness": config.missingness,
        "seed": config.seed,
    }
    runs = []
    for repeat in range(config.repeats):
        log.info(f"Generating SQL for {len(examples)} questions (repeat {repeat})")
        with ThreadPoolExecutor(max_workers=max(config.workers, 1)) as pool:
            outputs = list(
                pool.map(
                    lambda ex: _predict(
                        ex, config, knowledge[ex.db_id], lib, gateway, log
                    ),
                    examples,
                )
            )
        predictions, failures, bundles = {}, {}, {}
        for ex, (sql, failure, bundle) in zip(examples, outputs):
            predictions[ex.question_id] = sql
            bundles[ex.question_id] = bundle
            if failure is not None:
                failures[ex.question_id] = failure
        result = evaluate(
            predictions,
            examples,
            registry,
            config.timeout,
            failures,
            config.workers,
            log=log,
        )
        run_dir = config.out_dir
        if config.repeats > 1:
            run_dir = config.out_dir / f"repeat-{repeat}"
        _write_run(run_dir, predictions, bundles, result, header, log)
        runs.append(result)

    summary = RunResult(config, tuple(runs))
    if config.repeats > 1:
        write_json(
            config.out_dir / "result.json",
            {
                **header,
                "repeats": config.repeats,
                "ex": summary.ex,
                "runs": [f"repeat-{i}" for i in range(config.repeats)],
            },
        )
        try:
            (config.out_dir / "report.txt").write_text(summary.render(), "utf-8")
        except OSError as e:
            raise PersistenceError(config.out_dir, f"Unable to write ({e})") from e
    log.info(f"EX: {summary.ex}")
    return summary
