from .data import (
    Data,
    DataError,
    FormatError,
    InvariantError,
    DatabaseError,
    PersistenceError,
)
from .knowledge import (
    Value,
    EdgeSource,
    NumericStats,
    ColumnProfile,
    ColumnSemantics,
    ColumnKnowledge,
    TableKnowledge,
    ForeignKeyEdge,
    SchemaKnowledge,
    Knowledge,
    render_value,
    sqlite_sort_key,
    knowledge_path,
    save_knowledge,
    load_knowledge,
)
from .library import FewShotEntry, FewShotLibrary, SimilarityConfig
from .bird import (
    Difficulty,
    BenchExample,
    BirdDataset,
    find_databases,
    load_bird,
    read_training_pairs,
)
