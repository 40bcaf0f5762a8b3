import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from companion.__main__ import main
from companion.gateway import MockScript
from companion.bench import Predictions, read_json
from companion.data import (
    FewShotLibrary,
    knowledge_path,
    load_knowledge,
    save_knowledge,
)

from .helpers import (
    DOC_SQL,
    RECENT_SQL,
    create_bird,
    create_schools,
    schools_records,
    retail_knowledge,
    prepare_schools_run,
)


PERFECT = (
    "Simple | Moderate | Challenging |  Total\n"
    "100.00 |   100.00 |           - | 100.00\n"
)


@pytest.fixture(autouse=True)
def offline(monkeypatch):
    monkeypatch.delenv("CA_LLM_BASE_URL", raising=False)
    monkeypatch.delenv("CA_LLM_MODEL", raising=False)


def invoke(*args) -> object:
    runner = CliRunner()
    cmd = [str(arg) for arg in args] + ["--verbosity", "CRITICAL"]
    return runner.invoke(main, cmd, catch_exceptions=False)


def write_script(path: Path, script: dict) -> Path:
    mock = MockScript(path)
    mock.data = script
    mock.write()
    return path


def test_mine_file(tmp_path):
    db = create_schools(tmp_path / "schools.sqlite")
    result = invoke("mine", db, "-o", tmp_path / "out")
    assert result.exit_code == 0
    sk = load_knowledge(knowledge_path(tmp_path / "out", "schools"))
    assert [tbl.name for tbl in sk.tables] == ["schools", "scores"]


def test_mine_dataset(tmp_path):
    root = create_bird(tmp_path / "bird", schools_records())
    result = invoke("mine", root, "-o", tmp_path / "out", "--sample-n", "2")
    assert result.exit_code == 0
    assert knowledge_path(tmp_path / "out", "schools").exists()


def test_mine_nothing(tmp_path):
    (tmp_path / "empty").mkdir()
    result = invoke("mine", tmp_path / "empty", "-o", tmp_path / "out")
    assert result.exit_code == 2


def test_route(tmp_path):
    path = tmp_path / "retail.knowledge.json"
    save_knowledge(retail_knowledge(), path)
    result = invoke(
        "route", "How many vip customers placed orders?", "--knowledge", path
    )
    assert result.exit_code == 0
    decision = json.loads(result.output)
    assert decision["labels"] == ["EnumValue"]
    assert decision["source"] == "heuristic"


def test_evidence(tmp_path):
    path = tmp_path / "retail.knowledge.json"
    save_knowledge(retail_knowledge(), path)
    question = "How many vip customers placed orders?"
    result = invoke("evidence", question, "--knowledge", path)
    assert result.exit_code == 0
    bundle = json.loads(result.output)
    assert bundle["question"] == question
    assert "vip refers to segment = 'V'" in result.output

    result = invoke("evidence", question, "--knowledge", path, "--prompt")
    assert result.exit_code == 0
    assert "Evidence:\n" in result.output
    assert result.output.endswith(f"Question: {question}\n")


def test_fewshot_build(tmp_path):
    train = tmp_path / "train.json"
    train.write_text(json.dumps(schools_records()))
    out = tmp_path / "train.fewshot.jsonl"
    result = invoke(
        "fewshot", "build", train, "-o", out, "--query", "How many schools", "-k", 1
    )
    assert result.exit_code == 0
    assert len(FewShotLibrary.load(out)) == 2
    assert result.output.startswith("-- Example 1\n")
    assert f"SQL: {DOC_SQL}" in result.output


def test_fewshot_build_checked(tmp_path):
    train = tmp_path / "train.json"
    records = schools_records()
    records[1]["SQL"] = "SELECT nope FROM schools"
    train.write_text(json.dumps(records))
    knowledge_dir = tmp_path / "knowledge"
    db = create_schools(tmp_path / "schools.sqlite")
    assert invoke("mine", db, "-o", knowledge_dir).exit_code == 0
    out = tmp_path / "train.fewshot.jsonl"
    result = invoke(
        "fewshot", "build", train, "-o", out, "--knowledge-dir", knowledge_dir
    )
    assert result.exit_code == 0
    assert [entry.raw_sql for entry in FewShotLibrary.load(out).entries] == [DOC_SQL]


def test_run(tmp_path):
    root, knowledge_dir, script = prepare_schools_run(tmp_path)
    script_path = write_script(tmp_path / "gen.mockscript.json", script)
    out = tmp_path / "out"
    result = invoke(
        "run",
        "--bird",
        root,
        "--mode",
        "ca",
        "-o",
        out,
        "--knowledge-dir",
        knowledge_dir,
        "--mock-script",
        script_path,
    )
    assert result.exit_code == 0
    assert result.output == PERFECT
    assert Predictions.load(out / "predictions.json").data == {
        1: DOC_SQL,
        2: RECENT_SQL,
    }
    assert (out / "report.txt").read_text() == PERFECT


def test_run_reproducible(tmp_path):
    root, knowledge_dir, script = prepare_schools_run(tmp_path)
    script_path = write_script(tmp_path / "gen.mockscript.json", script)
    outputs = []
    for name in ("first", "second"):
        out = tmp_path / name
        result = invoke(
            "run",
            "--bird",
            root,
            "-o",
            out,
            "--knowledge-dir",
            knowledge_dir,
            "--mock-script",
            script_path,
        )
        assert result.exit_code == 0
        outputs.append(
            [(out / f).read_bytes() for f in ("predictions.json", "report.txt")]
        )
    assert outputs[0] == outputs[1]


def test_run_failures(tmp_path):
    root, knowledge_dir, script = prepare_schools_run(tmp_path)
    script_path = write_script(tmp_path / "gen.mockscript.json", script)
    # the DOC question gets no substitute evidence, so its prompt is unscripted
    for mode in ("no-evidence", "qra-only"):
        result = invoke(
            "run",
            "--bird",
            root,
            "--mode",
            mode,
            "-o",
            tmp_path / mode,
            "--knowledge-dir",
            knowledge_dir,
            "--mock-script",
            script_path,
        )
        assert result.exit_code == 3
        assert "50.00" in result.output


def test_run_needs_llm(tmp_path):
    root = create_bird(tmp_path / "bird", schools_records())
    result = invoke("run", "--bird", root, "-o", tmp_path / "out")
    assert result.exit_code == 1


def test_usage_errors(tmp_path):
    assert invoke("run", "--bird", tmp_path / "nope", "-o", tmp_path).exit_code == 1
    assert invoke("report").exit_code == 1
    assert invoke("nope").exit_code == 1


def test_eval_and_report(tmp_path):
    root = create_bird(tmp_path / "bird", schools_records())
    predictions = Predictions(tmp_path / "predictions.json")
    predictions.data = {1: DOC_SQL, 2: RECENT_SQL}
    predictions.write()
    out = tmp_path / "result.json"
    result = invoke(
        "eval", "--predictions", predictions.fname, "--bird", root, "-o", out
    )
    assert result.exit_code == 0
    assert result.output == PERFECT
    assert read_json(out)["ex"]["total"] == 100

    result = invoke("report", "--result", out, "--format", "csv")
    assert result.exit_code == 0
    assert result.output == (
        "simple,moderate,challenging,total\n100.00,100.00,-,100.00\n"
    )


def test_eval_failures(tmp_path):
    root = create_bird(tmp_path / "bird", schools_records())
    predictions = Predictions(tmp_path / "predictions.json")
    predictions.data = {1: DOC_SQL, 2: "SELECT nope"}
    predictions.write()
    result = invoke("eval", "--predictions", predictions.fname, "--bird", root)
    assert result.exit_code == 3

    predictions.data = {99: DOC_SQL}
    predictions.write()
    result = invoke("eval", "--predictions", predictions.fname, "--bird", root)
    assert result.exit_code == 2


def test_report_malformed(tmp_path):
    path = tmp_path / "result.json"
    path.write_text(json.dumps({"ex": {"simple": 1}}))
    assert invoke("report", "--result", path).exit_code == 2


def test_config(tmp_path):
    path = tmp_path / "result.json"
    path.write_text(
        json.dumps(
            {"ex": {"simple": 50, "moderate": None, "challenging": None, "total": 50}}
        )
    )
    config = tmp_path / "companion.toml"
    config.write_text('verbosity = "CRITICAL"\n\n[report]\nformat = "csv"\n')
    runner = CliRunner()
    cmd = ["--config", str(config), "report", "--result", str(path)]
    result = runner.invoke(main, cmd, catch_exceptions=False)
    assert result.exit_code == 0
    assert result.output == "simple,moderate,challenging,total\n50.00,-,-,50.00\n"

    # flags take precedence over the file
    result = runner.invoke(main, cmd + ["--format", "table"], catch_exceptions=False)
    assert result.output.startswith("Simple")


def test_bad_config(tmp_path):
    config = tmp_path / "companion.toml"
    config.write_text("[nope]\nx = 1\n")
    runner = CliRunner()
    result = runner.invoke(main, ["--config", str(config), "report"])
    assert result.exit_code == 1
    config.write_text("[report]\nnope = 1\n")
    result = runner.invoke(main, ["--config", str(config), "report"])
    assert result.exit_code == 1
