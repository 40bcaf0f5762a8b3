from __future__ import annotations
import json
import sqlite3
from pathlib import Path
from dataclasses import replace
from datetime import datetime, timezone

from companion.data import (
    EdgeSource,
    ColumnSemantics,
    ColumnKnowledge,
    TableKnowledge,
    ForeignKeyEdge,
    SchemaKnowledge,
    knowledge_path,
    save_knowledge,
    load_bird,
)
from companion.prompts import load_prompt
from companion.gateway import fingerprint
from companion.bench import Mode, prepare_prompt
from companion.profiler import DatabaseHandle, profile_column, mine_schema_knowledge


CREATED_AT = datetime(2024, 1, 1, tzinfo=timezone.utc)

SCHOOLS_SCHEMA = """
CREATE TABLE schools (
    CDSCode TEXT PRIMARY KEY,
    School TEXT,
    County TEXT,
    DOC INTEGER,
    OpenYear INTEGER
);
CREATE TABLE scores (
    score_id INTEGER PRIMARY KEY,
    CDSCode TEXT REFERENCES schools(CDSCode),
    AvgMath INTEGER
);
"""
SCHOOLS_ROWS = {
    "schools": [
        ("01", "Oak Elementary", "Alameda", 52, 1990),
        ("02", "Pine Elementary", "Alameda", 52, 2001),
        ("03", "Bay Unified High", "Alameda", 54, 1985),
        ("04", "Hill Unified Middle", "Fresno", 54, 2005),
        ("05", "River Charter", "Fresno", 56, 2012),
        ("06", "Lake Elementary", "Fresno", 52, 1999),
    ],
    "scores": [
        (1, "01", 480),
        (2, "02", 510),
        (3, "03", 530),
        (4, "04", 455),
        (5, "05", 600),
        (6, "06", 495),
    ],
}
DOC_GLOSSARY = {"52": "Elementary School District", "54": "Unified School District"}

DOC_QUESTION = "How many schools belong to an Elementary School District?"
DOC_SQL = "SELECT COUNT(*) FROM schools WHERE DOC = 52"
RECENT_QUESTION = "Which school opened most recently?"
RECENT_SQL = "SELECT School FROM schools ORDER BY OpenYear DESC LIMIT 1"

# 24 distinct values: 10, 15, ..., 125
AMOUNTS = [10.0 + 5 * i for i in range(24)]


def create_database(path: Path, schema: str, rows: dict[str, list[tuple]]) -> Path:
    """
    Create a SQLite file from a schema script and the rows of each table
    """
    path.parent.mkdir(parents=True, exist_ok=True)
    conn = sqlite3.connect(path)
    try:
        conn.executescript(schema)
        for table, records in rows.items():
            if not records:
                continue
            marks = ", ".join("?" * len(records[0]))
            conn.executemany(f'INSERT INTO "{table}" VALUES ({marks})', records)
        conn.commit()
    finally:
        conn.close()
    return path


def create_schools(path: Path) -> Path:
    return create_database(path, SCHOOLS_SCHEMA, SCHOOLS_ROWS)


def bird_record(
    question_id: int,
    question: str,
    sql: str,
    evidence: str = "",
    difficulty: str = "simple",
    db_id: str = "schools",
) -> dict:
    return {
        "question_id": question_id,
        "db_id": db_id,
        "question": question,
        "evidence": evidence,
        "SQL": sql,
        "difficulty": difficulty,
    }


def create_bird(root: Path, records: list[dict], databases: dict = None) -> Path:
    """
    Lay out a BIRD-style directory: dev.json plus dev_databases/<db>/<db>.sqlite

    Parameters
    ----------
    root : Path
        The directory to create
    records : list[dict]
        The question records
    databases : dict[str, Callable[[Path], Path]], optional
        Maps each db_id to a function that creates its database at a path.
        Defaults to the schools database.
    """
    databases = databases or {"schools": create_schools}
    root.mkdir(parents=True, exist_ok=True)
    (root / "dev.json").write_text(json.dumps(records, indent=2), "utf-8")
    for db_id, create in databases.items():
        create(root / "dev_databases" / db_id / f"{db_id}.sqlite")
    return root


def schools_records() -> list[dict]:
    return [
        bird_record(
            1,
            DOC_QUESTION,
            DOC_SQL,
            "Elementary School District refers to DOC = 52",
        ),
        bird_record(
            2,
            RECENT_QUESTION,
            RECENT_SQL,
            "opened most recently refers to MAX(OpenYear)",
            difficulty="moderate",
        ),
    ]


def ten_schools_records() -> list[dict]:
    """
    Ten questions over the schools database, three of them naming a DOC label
    """
    unified = "How many schools belong to a Unified School District?"
    first = "Which Elementary School District school opened first?"
    lowest = (
        "SELECT T1.School FROM schools AS T1 JOIN scores AS T2"
        " ON T1.CDSCode = T2.CDSCode ORDER BY T2.AvgMath LIMIT 1"
    )
    return schools_records() + [
        bird_record(3, unified, "SELECT COUNT(*) FROM schools WHERE DOC = 54"),
        bird_record(
            4,
            "List the schools in Fresno.",
            "SELECT School FROM schools WHERE County = 'Fresno'",
        ),
        bird_record(
            5,
            first,
            "SELECT School FROM schools WHERE DOC = 52 ORDER BY OpenYear LIMIT 1",
            difficulty="challenging",
        ),
        bird_record(
            6, "What is the average math score?", "SELECT AVG(AvgMath) FROM scores"
        ),
        bird_record(
            7,
            "How many schools opened after 2000?",
            "SELECT COUNT(*) FROM schools WHERE OpenYear > 2000",
            difficulty="moderate",
        ),
        bird_record(
            8, "What is the highest math score?", "SELECT MAX(AvgMath) FROM scores"
        ),
        bird_record(
            9,
            "How many schools are in Alameda?",
            "SELECT COUNT(*) FROM schools WHERE County = 'Alameda'",
        ),
        bird_record(
            10,
            "Name the school with the lowest math score.",
            lowest,
            difficulty="challenging",
        ),
    ]


def with_semantics(
    sk: SchemaKnowledge, table: str, column: str, semantics: ColumnSemantics
) -> SchemaKnowledge:
    """
    Replace the semantics of a single column of a schema-knowledge value
    """
    tables = []
    for tbl in sk.tables:
        if tbl.name == table:
            tbl = replace(
                tbl,
                columns=[
                    replace(col, semantics=semantics) if col.name == column else col
                    for col in tbl.columns
                ],
            )
        tables.append(tbl)
    return replace(sk, tables=tables)


def column(
    name: str,
    values: list,
    declared_type: str = "",
    semantics: ColumnSemantics = None,
) -> ColumnKnowledge:
    """
    Build a column whose profile is computed from the given values
    """
    return ColumnKnowledge(
        name,
        declared_type,
        profile_column(values, declared_type),
        semantics or ColumnSemantics(),
    )


def table(name: str, columns: list[ColumnKnowledge]) -> TableKnowledge:
    body = ",\n".join(f"  {col.name} {col.declared_type}".rstrip() for col in columns)
    ddl = f"CREATE TABLE {name} (\n{body}\n)"
    return TableKnowledge(name, ddl, len(columns[0].profile.sample_values), columns)


def retail_knowledge() -> SchemaKnowledge:
    """
    A small store database: customers place orders of products

    - customer.segment is a coded enumeration with a glossary
    - orders.amount is numeric and has the alias "spend"
    - orders.order_date is temporal
    - customer.cust_name has the alias "client name"
    """
    customer = table(
        "customer",
        [
            column("customer_id", [1, 2, 3, 4, 5, 6], "INTEGER"),
            column(
                "cust_name",
                ["Ann", "Bob", "Cy", "Di", "Ed", "Flo"],
                "TEXT",
                ColumnSemantics(
                    description="the full name of the customer",
                    aliases=("client name",),
                ),
            ),
            column(
                "segment",
                ["R", "R", "R", "W", "W", "V"],
                "TEXT",
                ColumnSemantics(
                    description="the customer segment code",
                    enum_glossary={"R": "retail", "W": "wholesale", "V": "vip"},
                ),
            ),
        ],
    )
    orders = table(
        "orders",
        [
            column("order_id", [10, 11, 12, 13, 14, 15], "INTEGER"),
            column("customer_id", [1, 1, 2, 3, 5, 6], "INTEGER"),
            column("product_id", [100, 101, 100, 102, 101, 100], "INTEGER"),
            column(
                "amount",
                AMOUNTS,
                "REAL",
                ColumnSemantics(
                    description="the order total in dollars", aliases=("spend",)
                ),
            ),
            column(
                "order_date",
                [
                    "2019-03-01",
                    "2020-05-02",
                    "2021-07-03",
                    "2021-08-04",
                    "2022-09-05",
                    "2023-10-06",
                ],
                "DATE",
            ),
        ],
    )
    product = table(
        "product",
        [
            column("product_id", [100, 101, 102, 103, 104, 105], "INTEGER"),
            column(
                "title",
                ["Pen", "Ink", "Pad", "Cup", "Mug", "Hat"],
                "TEXT",
            ),
        ],
    )
    warehouse = table(
        "warehouse",
        [column("site", ["North", "South", "East", "West", "Dock", "Yard"], "TEXT")],
    )
    return SchemaKnowledge(
        db_id="retail",
        tables=[customer, orders, product, warehouse],
        fk_edges=[
            ForeignKeyEdge(
                ("orders", "customer_id"),
                ("customer", "customer_id"),
                EdgeSource.DECLARED,
            ),
            ForeignKeyEdge(
                ("orders", "product_id"),
                ("product", "product_id"),
                EdgeSource.DECLARED,
            ),
        ],
        created_at=CREATED_AT,
    )



def prepare_schools_run(
    tmp_path: Path, records: list[dict] = None
) -> tuple[Path, Path, dict[str, str]]:
    """
    Lay out the schools dataset with cached knowledge and a generation script

    The knowledge of the schools database carries the DOC glossary, and the script
    answers the ca-mode prompt of each question with its gold SQL.

    Parameters
    ----------
    tmp_path : Path
        The directory to lay everything out in
    records : list[dict], optional
        The question records. Defaults to :py:func:`schools_records`.

    Returns
    -------
    tuple[Path, Path, dict[str, str]]
        The BIRD root, the knowledge directory, and the mock script
    """
    root = create_bird(tmp_path / "bird", records or schools_records())
    examples, registry = load_bird(root)
    sk = mine_schema_knowledge(
        DatabaseHandle(registry["schools"]), created_at=CREATED_AT
    )
    glossary = ColumnSemantics(enum_glossary=DOC_GLOSSARY)
    sk = with_semantics(sk, "schools", "DOC", glossary)
    knowledge_dir = tmp_path / "knowledge"
    knowledge_dir.mkdir()
    save_knowledge(sk, knowledge_path(knowledge_dir, "schools"))
    script = {}
    for example in examples:
        prompt, _ = prepare_prompt(example.without_evidence(), Mode.CA, sk)
        key = fingerprint(load_prompt("generate"), prompt)
        script[key] = f"```sql\n{example.gold_sql}\n```"
    return root, knowledge_dir, script
