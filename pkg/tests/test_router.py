import json

import pytest
import numpy as np

from companion.logging import getLogger
from companion.gateway import MockGateway, StructuredOutputError
from companion.prompts import load_prompt
from companion.router import (
    EvidenceType,
    RouteSource,
    RoutingDecision,
    contains_phrase,
    mentioned_values,
    schema_digest,
    heuristic_route,
    parse_confidences,
    route,
)

from .helpers import retail_knowledge


def route_prompt(sk, question: str) -> str:
    return f"Database schema:\n{schema_digest(sk)}\n\nQuestion: {question}"


class TestPhrases:
    def test_whole_words(self):
        assert contains_phrase("The Client  name is", "client name")
        assert not contains_phrase("All clients", "client")
        assert not contains_phrase("anything", "  ")

    def test_mentioned_values(self):
        segment = retail_knowledge().table("customer").column("segment")
        assert mentioned_values("Show vip and retail customers", segment) == [
            (5, "vip", "V"),
            (13, "retail", "R"),
        ]
        assert mentioned_values("Show everyone", segment) == []

    def test_digest(self):
        digest = schema_digest(retail_knowledge()).splitlines()
        assert digest[0] == (
            "customer(customer_id [enum], cust_name [enum], segment [enum])"
        )
        assert len(digest) == 4


class TestHeuristic:
    def test_enum(self):
        decision = heuristic_route(
            "How many vip customers placed orders?", retail_knowledge()
        )
        assert decision.labels == {EvidenceType.ENUM}
        assert decision.source is RouteSource.HEURISTIC

    def test_numeric_and_synonym(self):
        decision = heuristic_route(
            "What is the average spend per client name?", retail_knowledge()
        )
        assert decision.labels == {EvidenceType.NUMERIC, EvidenceType.SYNONYM}

    def test_domain(self):
        decision = heuristic_route("Which galaxies are brightest?", retail_knowledge())
        assert decision.labels == {EvidenceType.DOMAIN}

    def test_domain_ignores_table_names(self):
        sk = retail_knowledge()
        decision = heuristic_route("Which warehouse ships fastest?", sk)
        assert decision.labels == {EvidenceType.DOMAIN}
        decision = heuristic_route("Which warehouse site is busiest?", sk)
        assert EvidenceType.DOMAIN not in decision.labels

    def test_glossary_labels_are_vocabulary(self):
        decision = heuristic_route("Count the vip buyers", retail_knowledge())
        assert decision.labels == {EvidenceType.ENUM}

    def test_scores_are_binary(self):
        decision = heuristic_route("List every order id", retail_knowledge(), tau=1)
        assert set(decision.confidences.values()) <= {0.0, 1.0}
        assert decision.labels == frozenset()

    def test_bad_tau(self):
        with pytest.raises(ValueError):
            heuristic_route("q", retail_knowledge(), tau=1.5)


class TestParse:
    def test_clamped(self):
        confidences = parse_confidences({"numeric": 0.9, "enum": 2, "domain": -1})
        assert confidences == {
            EvidenceType.NUMERIC: 0.9,
            EvidenceType.DOMAIN: 0.0,
            EvidenceType.SYNONYM: 0.0,
            EvidenceType.ENUM: 1.0,
        }

    def test_invalid(self):
        for bad in ("high", True, float("nan"), None):
            with pytest.raises(StructuredOutputError):
                parse_confidences({"numeric": bad})


class TestRoute:
    def test_llm(self):
        sk = retail_knowledge()
        question = "What share of orders were large?"
        reply = {"numeric": 0.7, "domain": 0.2, "synonym": 0.5, "enum": 0.49}
        gateway = MockGateway.scripted(
            {
                (load_prompt("route"), route_prompt(sk, question)): (
                    f"```json\n{json.dumps(reply)}\n```"
                )
            }
        )
        decision = route(question, sk, gateway, tau=0.5)
        assert decision.source is RouteSource.LLM
        assert decision.labels == {EvidenceType.NUMERIC, EvidenceType.SYNONYM}
        assert decision.confidences[EvidenceType.ENUM] == 0.49

    def test_fallback(self, caplog):
        log = getLogger(name="router", level="WARNING")
        decision = route(
            "How many vip customers placed orders?",
            retail_knowledge(),
            MockGateway(),
            log=log,
        )
        assert decision.source is RouteSource.HEURISTIC
        assert decision.labels == {EvidenceType.ENUM}
        assert "Falling back to heuristic routing" in caplog.text

    def test_bad_reply(self):
        sk = retail_knowledge()
        question = "q"
        gateway = MockGateway.scripted(
            {(load_prompt("route"), route_prompt(sk, question)): "no idea"}
        )
        assert route(question, sk, gateway).source is RouteSource.HEURISTIC

    def test_offline(self):
        decision = route("Which galaxies are brightest?", retail_knowledge())
        assert decision.source is RouteSource.HEURISTIC


class TestDecision:
    def _get_fake_confidences(self) -> dict:
        return {
            EvidenceType.NUMERIC: 0.8,
            EvidenceType.DOMAIN: 0.1,
            EvidenceType.SYNONYM: 0.3,
            EvidenceType.ENUM: 0.6,
        }

    def test_labels(self):
        decision = RoutingDecision.from_confidences(self._get_fake_confidences(), 0.6)
        assert decision.labels == {EvidenceType.NUMERIC, EvidenceType.ENUM}
        # labels only grow as the threshold drops
        lower = RoutingDecision.from_confidences(self._get_fake_confidences(), 0.2)
        assert decision.labels <= lower.labels

    def test_invariants(self):
        with pytest.raises(ValueError):
            RoutingDecision(
                self._get_fake_confidences(), 0.5, {EvidenceType.DOMAIN}, "llm"
            )
        partial = {EvidenceType.NUMERIC: 1.0}
        with pytest.raises(ValueError):
            RoutingDecision(partial, 0.5, {EvidenceType.NUMERIC}, "llm")
        with pytest.raises(ValueError):
            RoutingDecision.from_confidences(
                {**self._get_fake_confidences(), EvidenceType.ENUM: 1.5}
            )

    def test_to_dict(self):
        decision = RoutingDecision.from_confidences(self._get_fake_confidences(), 0.5)
        assert decision.to_dict() == {
            "confidences": {
                "NumericReasoning": 0.8,
                "DomainKnowledge": 0.1,
                "SynonymAlias": 0.3,
                "EnumValue": 0.6,
            },
            "threshold": 0.5,
            "labels": ["NumericReasoning", "EnumValue"],
            "source": "llm",
        }

    def test_threshold_law(self):
        rng = np.random.default_rng(8)
        for _ in range(1000):
            confidences = {etype: float(rng.random()) for etype in EvidenceType}
            if rng.random() < 0.2:
                confidences[EvidenceType.ENUM] = float(rng.choice([0, 0.5, 1]))
            previous = None
            for tau in (0, 0.25, 0.5, 0.75, 1):
                labels = RoutingDecision.from_confidences(confidences, tau).labels
                assert labels == {e for e, c in confidences.items() if c >= tau}
                if previous is not None:
                    assert labels <= previous
                previous = labels
