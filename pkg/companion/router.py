from __future__ import annotations
import re
from enum import Enum
from logging import Logger
from dataclasses import dataclass
from typing import Iterator, Optional

from .logging import getLogger
from .prompts import load_prompt
from .profiler import name_tokens
from .fewshot import question_tokens
from .data import SchemaKnowledge, TableKnowledge, ColumnKnowledge, render_value
from .gateway import Gateway, GatewayError, StructuredOutputError


DEFAULT_TAU = 0.5
NUMERIC_CUES = (
    "ratio",
    "percentage",
    "average",
    "difference",
    "per",
    "rate",
    "total",
    "rank",
    "top",
)
STOPWORDS = frozenset(
    """
    a about all an and any are as at be by can did do does each for from give had has
    have how i in is it its list me more most of on or show than that the
    their them there these they this those to was were what when where which who
    whose with
    """.split()
)
MIN_TERM_LENGTH = 2


class EvidenceType(str, Enum):
    NUMERIC = "NumericReasoning"
    DOMAIN = "DomainKnowledge"
    SYNONYM = "SynonymAlias"
    ENUM = "EnumValue"


class RouteSource(str, Enum):
    LLM = "llm"
    HEURISTIC = "heuristic"


# the keys of the routing reply
REPLY_KEYS = {
    "numeric": EvidenceType.NUMERIC,
    "domain": EvidenceType.DOMAIN,
    "synonym": EvidenceType.SYNONYM,
    "enum": EvidenceType.ENUM,
}


@dataclass(frozen=True)
class RoutingDecision:
    """
    Which kinds of evidence a question needs

    Attributes
    ----------
    confidences : dict[EvidenceType, float]
        A score in [0, 1] for every evidence type
    threshold : float
        The confidence needed for a type to be selected
    labels : frozenset[EvidenceType]
        The selected types: those whose confidence is at least the threshold
    source : RouteSource
        Whether the confidences came from the LLM or from the heuristic
    """

    confidences: dict
    threshold: float
    labels: frozenset
    source: RouteSource

    def __post_init__(self):
        object.__setattr__(self, "labels", frozenset(self.labels))
        object.__setattr__(self, "source", RouteSource(self.source))
        if set(self.confidences) != set(EvidenceType):
            raise ValueError("A routing decision needs a confidence for every type")
        if any(not 0 <= conf <= 1 for conf in self.confidences.values()):
            raise ValueError(f"Confidences must lie in [0, 1]: {self.confidences}")
        if self.labels != select_labels(self.confidences, self.threshold):
            raise ValueError("The labels disagree with the confidences and threshold")

    @classmethod
    def from_confidences(
        cls: RoutingDecision,
        confidences: dict,
        threshold: float = DEFAULT_TAU,
        source: RouteSource = RouteSource.LLM,
    ) -> RoutingDecision:
        confidences = {etype: float(confidences[etype]) for etype in EvidenceType}
        return cls(
            confidences=confidences,
            threshold=threshold,
            labels=select_labels(confidences, threshold),
            source=source,
        )

    def to_dict(self) -> dict:
        return {
            "confidences": {e.value: self.confidences[e] for e in EvidenceType},
            "threshold": self.threshold,
            "labels": [e.value for e in EvidenceType if e in self.labels],
            "source": self.source.value,
        }


def select_labels(confidences: dict, threshold: float) -> frozenset:
    """
    Select every evidence type whose confidence is at least the threshold
    """
    return frozenset(etype for etype, conf in confidences.items() if conf >= threshold)


def _check_tau(tau: float):
    if not 0 <= tau <= 1:
        raise ValueError(f"The routing threshold must lie in [0, 1], not {tau}")


def contains_phrase(text: str, phrase: str) -> bool:
    """
    Whether a phrase occurs in a text as whole words, ignoring case
    """
    return find_phrase(text, phrase) is not None


def phrase_pattern(phrase: str) -> str:
    """
    A regex matching a phrase as whole words, with any whitespace between words
    """
    return r"(?<!\w)" + r"\s+".join(map(re.escape, phrase.split())) + r"(?!\w)"


def find_phrase(text: str, phrase: str) -> Optional[re.Match]:
    """
    Find the first whole-word, case-insensitive occurrence of a phrase in a text
    """
    if not phrase.strip():
        return None
    return re.search(phrase_pattern(phrase), text, flags=re.IGNORECASE)


def name_variants(name: str) -> set[str]:
    """
    The ways a schema name may be written in a question

    ex: customer_id -> {customer_id, customer id}
    """
    spaced = " ".join(name_tokens(name))
    return {v for v in (name.lower(), spaced) if len(v) >= MIN_TERM_LENGTH}


def mentions_column(question: str, col: ColumnKnowledge) -> bool:
    terms = name_variants(col.name) | {a.lower() for a in col.semantics.aliases}
    return any(contains_phrase(question, term) for term in terms)


def value_terms(col: ColumnKnowledge) -> dict[str, str]:
    """
    The phrases that name a value of an enumeration column

    Returns
    -------
    dict[str, str]
        Maps each phrase (a glossary label or a non-numeric text value) to the
        rendered value it names
    """
    terms = {}
    for value, label in col.semantics.enum_glossary.items():
        if len(label.strip()) >= MIN_TERM_LENGTH:
            terms.setdefault(label.strip(), value)
    values = [v for v, _ in col.profile.top_values] + list(col.profile.sample_values)
    for value in values:
        if isinstance(value, str) and len(value.strip()) >= MIN_TERM_LENGTH:
            if not re.fullmatch(r"[\d\s.,:/+-]+", value):
                terms.setdefault(value.strip(), render_value(value))
    return terms


def enumeration_columns(
    sk: SchemaKnowledge,
) -> Iterator[tuple[TableKnowledge, ColumnKnowledge]]:
    for tbl, col in sk.columns():
        if col.profile.is_enumeration or col.semantics.enum_glossary:
            yield tbl, col


def mentioned_values(
    question: str, col: ColumnKnowledge
) -> list[tuple[int, str, str]]:
    """
    Find the values of an enumeration column named in a question

    Returns
    -------
    list[tuple[int, str, str]]
        The (position, phrase, rendered value) of each value named in the question,
        in mention order. Each value appears once, at its first mention.
    """
    found = {}
    for phrase, value in value_terms(col).items():
        match = find_phrase(question, phrase)
        if match is not None:
            hit = (match.start(), -len(phrase), phrase, value)
            if value not in found or hit < found[value]:
                found[value] = hit
    return [(pos, phrase, value) for pos, _, phrase, value in sorted(found.values())]


def schema_digest(sk: SchemaKnowledge) -> str:
    """
    Summarize a schema for the routing prompt: tables, columns and enumeration flags
    """
    lines = []
    for tbl in sk.tables:
        cols = ", ".join(
            col.name + (" [enum]" if col.profile.is_enumeration else "")
            for col in tbl.columns
        )
        lines.append(f"{tbl.name}({cols})")
    return "\n".join(lines)


def heuristic_route(
    question: str, sk: SchemaKnowledge, tau: float = DEFAULT_TAU
) -> RoutingDecision:
    """
    Route a question with fixed rules instead of the LLM

    Every score is either 0 or 1:

    - NumericReasoning: the question contains an arithmetic cue (ratio, percentage,
      average, difference, per, rate, total, rank, top)
    - EnumValue: a question phrase names a glossary label or a text value of an
      enumeration column
    - SynonymAlias: a question phrase matches a column alias that isn't itself the
      name of a column
    - DomainKnowledge: no content word of the question matches a column name, an
      alias, a sampled value or a glossary label. Table names don't count.

    Parameters
    ----------
    question : str
        The question
    sk : SchemaKnowledge
        The knowledge of the question's database
    tau : float, optional
        The threshold recorded in the decision

    Returns
    -------
    RoutingDecision
        A decision whose source is "heuristic"
    """
    _check_tau(tau)
    tokens = question_tokens(question)
    numeric = any(cue in tokens for cue in NUMERIC_CUES)

    enum = any(
        mentioned_values(question, col) for _, col in enumeration_columns(sk)
    )

    columns = set()
    for _, col in sk.columns():
        columns |= name_variants(col.name)
    tables = set()
    for tbl in sk.tables:
        tables |= name_variants(tbl.name)
    aliases = {a.lower() for _, col in sk.columns() for a in col.semantics.aliases}
    synonym = any(
        alias not in columns | tables and contains_phrase(question, alias)
        for alias in aliases
    )

    vocabulary = columns | aliases
    for _, col in sk.columns():
        vocabulary.update(name_tokens(col.name))
        for alias in col.semantics.aliases:
            vocabulary.update(question_tokens(alias))
        for label in col.semantics.enum_glossary.values():
            vocabulary.update(question_tokens(label))
        for value in col.profile.sample_values:
            if value is not None:
                vocabulary.update(question_tokens(render_value(value)))
    content = [
        tok
        for tok in tokens
        if tok not in STOPWORDS and tok not in NUMERIC_CUES and not tok.isdigit()
    ]
    domain = not any(tok in vocabulary for tok in content)

    return RoutingDecision.from_confidences(
        {
            EvidenceType.NUMERIC: float(numeric),
            EvidenceType.DOMAIN: float(domain),
            EvidenceType.SYNONYM: float(synonym),
            EvidenceType.ENUM: float(enum),
        },
        threshold=tau,
        source=RouteSource.HEURISTIC,
    )


def parse_confidences(reply: dict) -> dict:
    """
    Read the confidence of each evidence type from a routing reply

    Missing keys count as 0 and every score is clamped into [0, 1]

    Raises
    ------
    StructuredOutputError
        If a score isn't a number
    """
    confidences = {}
    for key, etype in REPLY_KEYS.items():
        value = reply.get(key, 0)
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise StructuredOutputError(f"The {key} confidence is not a number")
        if value != value:
            raise StructuredOutputError(f"The {key} confidence is NaN")
        confidences[etype] = min(max(float(value), 0.0), 1.0)
    return confidences


def route(
    question: str,
    sk: SchemaKnowledge,
    gateway: Optional[Gateway] = None,
    tau: float = DEFAULT_TAU,
    log: Logger = None,
) -> RoutingDecision:
    """
    Decide which kinds of evidence a question needs

    The LLM is asked, zero-shot, for a confidence per evidence type. Without a
    gateway, or if the LLM fails or replies in the wrong format, the decision comes
    from :py:func:`heuristic_route` instead.

    Parameters
    ----------
    question : str
        The question
    sk : SchemaKnowledge
        The knowledge of the question's database
    gateway : Gateway, optional
        The LLM gateway
    tau : float, optional
        The threshold: a type is selected if its confidence is at least tau
    log : Logger, optional
        A logging instance

    Returns
    -------
    RoutingDecision
        The decision

    Raises
    ------
    ValueError
        If tau is not in [0, 1]
    """
    if log is None:
        log = getLogger(name="router", level="ERROR")
    _check_tau(tau)
    if gateway is None:
        return heuristic_route(question, sk, tau)
    user_prompt = f"Database schema:\n{schema_digest(sk)}\n\nQuestion: {question}"
    try:
        reply = gateway.ask_json(load_prompt("route"), user_prompt)
        confidences = parse_confidences(reply)
    except (GatewayError, StructuredOutputError) as e:
        log.warning(f"Falling back to heuristic routing: {e}")
        return heuristic_route(question, sk, tau)
    decision = RoutingDecision.from_confidences(confidences, tau, RouteSource.LLM)
    log.debug(f"Routed to {sorted(e.value for e in decision.labels)}")
    return decision
