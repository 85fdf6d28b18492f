import json

import numpy as np
import pytest

from kopa import kg, prompts as pr
from kopa.errors import DataError


@pytest.fixture
def movie_kg():
    return kg.build_graph(
        entities=["/m/0ctzf1", "/m/0jsg0m"],
        relations=["/film/genre"],
        triples=[(0, 0, 1)],
        entity_desc=["The Transformers", "animation"],
        relation_desc=["genre"],
    )


class TestVerbalize:
    def test_description_concatenation(self, movie_kg):
        assert pr.verbalize_triple(movie_kg, (0, 0, 1)) == "The Transformers genre animation"

    def test_empty_descriptions_fall_back_to_ids(self):
        g = kg.build_graph(["x1", "x2"], ["r1"], [(0, 0, 1)])
        assert pr.verbalize_triple(g, (0, 0, 1)) == "x1 r1 x2"

    def test_whitespace_normalized(self):
        g = kg.build_graph(
            ["a", "b"], ["r"], [(0, 0, 1)],
            entity_desc=["first\tthing", "second\nthing  here"],
            relation_desc=["relates\t\nto"],
        )
        assert pr.verbalize_triple(g, (0, 0, 1)) == "first thing relates to second thing here"


class TestZsr:
    def test_no_demonstration(self, tiny_kg):
        inst = pr.build_zsr(tiny_kg, (0, 0, 1))
        assert inst.mode == "zsr"
        assert inst.demonstration is None
        assert inst.answer is None
        assert "\n" + pr.INSTRUCTION not in pr.render_prompt(inst)[len(pr.INSTRUCTION):]

    def test_instruction_shared_across_triples(self, tiny_kg):
        a = pr.build_zsr(tiny_kg, (0, 0, 1))
        b = pr.build_zsr(tiny_kg, (3, 0, 4))
        assert a.instruction == b.instruction
        assert a.triple_text != b.triple_text

    def test_round_trip(self, tiny_kg, tmp_path):
        insts = [pr.build_zsr(tiny_kg, t) for t in tiny_kg.triples]
        path = tmp_path / "c.jsonl"
        pr.export_jsonl(insts, path)
        assert pr.import_jsonl(path) == insts


class TestSampleDemos:
    def test_two_shot_balanced(self, tiny_kg, rng):
        demos = pr.sample_demos(tiny_kg, (0, 0, 1), 2, rng)
        labels = [label for _, label in demos.items]
        assert labels == [True, False]

    def test_one_shot_is_positive(self, tiny_kg, rng):
        demos = pr.sample_demos(tiny_kg, (0, 0, 1), 1, rng)
        assert [label for _, label in demos.items] == [True]

    def test_interleaved_order(self, umls, rng):
        graph = umls[0]
        demos = pr.sample_demos(graph, graph.triples[0], 8, rng)
        labels = [label for _, label in demos.items]
        assert labels == [True, False] * 4

    def test_eight_shot_umls_share_and_reproducibility(self, umls):
        graph, _, test = umls
        query = test[0].triple
        a = pr.sample_demos(graph, query, 8, np.random.default_rng(3))
        b = pr.sample_demos(graph, query, 8, np.random.default_rng(3))
        assert a == b
        ents = {query[0], query[2]}
        for t, label in a.items:
            assert t[0] in ents or t[2] in ents
        positives = [t for t, label in a.items if label]
        assert len(positives) == 4
        for t in positives:
            assert t in graph.triple_set

    def test_isolated_query_falls_back_with_warning(self, caplog):
        g = kg.build_graph(["a", "b", "c", "d"], ["r"], [(0, 0, 1)])
        import logging
        with caplog.at_level(logging.WARNING, logger="kopa.prompts"):
            demos = pr.sample_demos(g, (2, 0, 3), 2, np.random.default_rng(0))
        assert any("fall" in r.message for r in caplog.records)
        assert len(demos.items) == 2


class TestIcl:
    def test_demo_lines_match_k(self, umls, rng):
        graph, _, test = umls
        inst = pr.build_icl(graph, test[0].triple, 4, rng)
        lines = inst.demonstration.split("\n")
        assert len(lines) == 4
        assert all(line.endswith((" true", " false")) for line in lines)

    def test_labels_follow_sampling_origin(self, umls, rng):
        graph, _, test = umls
        inst = pr.build_icl(graph, test[0].triple, 6, rng)
        for line in inst.demonstration.split("\n"):
            assert line.rsplit(" ", 1)[1] in ("true", "false")
        demos = pr.sample_demos(graph, test[0].triple, 6, np.random.default_rng(0))
        for t, label in demos.items:
            assert (t in graph.triple_set) == label or not label

    def test_prompt_length_grows_linearly_in_k(self, umls):
        graph, _, test = umls
        query = test[0].triple
        counts = {}
        for k in (2, 4, 8):
            inst = pr.build_icl(graph, query, k, np.random.default_rng(0))
            counts[k] = pr.prompt_token_count(inst)
        assert counts[2] < counts[4] < counts[8]
        # roughly linear: increments per shot comparable
        slope_a = (counts[4] - counts[2]) / 2
        slope_b = (counts[8] - counts[4]) / 4
        assert slope_b == pytest.approx(slope_a, rel=0.5)


class TestCorpora:
    def test_it_corpus_counts_and_balance(self, tiny_kg, rng):
        corpus = pr.build_it_corpus(tiny_kg, rng)
        assert len(corpus) == 2 * len(tiny_kg.triples)
        assert sum(i.answer == "true" for i in corpus) == len(tiny_kg.triples)
        assert sum(i.answer == "false" for i in corpus) == len(tiny_kg.triples)
        assert all(i.answer in ("true", "false") for i in corpus)

    def test_empty_graph_empty_corpus(self, rng):
        g = kg.build_graph(["a", "b"], ["r"], [])
        assert pr.build_it_corpus(g, rng) == []

    def test_negatives_are_filtered_corruptions(self, tiny_kg, rng):
        corpus = pr.build_it_corpus(tiny_kg, rng)
        for inst in corpus:
            if inst.answer == "false":
                assert inst.triple not in tiny_kg.triple_set
            else:
                assert inst.triple in tiny_kg.triple_set

    def test_deterministic_under_seed(self, tiny_kg):
        a = pr.build_training_corpus(tiny_kg, "kopa", np.random.default_rng(5))
        b = pr.build_training_corpus(tiny_kg, "kopa", np.random.default_rng(5))
        assert a == b

    def test_kopa_instances_carry_prefix(self, tiny_kg, rng):
        corpus = pr.build_training_corpus(tiny_kg, "kopa", rng)
        for inst in corpus:
            assert inst.prefix_triple == inst.triple
            assert inst.demonstration is None


class TestSit:
    def test_neighbor_line_budget(self, umls, rng):
        graph = umls[0]
        inst = pr.build_sit(graph, graph.triples[0], 4, rng)
        assert inst.demonstration is not None
        assert len(inst.demonstration.split("\n")) <= 4

    def test_zero_neighbors_degenerates_to_it(self, tiny_kg, rng):
        sit = pr.build_sit(tiny_kg, (0, 0, 1), 0, rng, answer="true")
        it = pr.build_it(tiny_kg, (0, 0, 1), "true")
        assert pr.render_prompt(sit, include_answer=True) == pr.render_prompt(it, include_answer=True)

    def test_query_never_among_neighbors(self, umls):
        graph = umls[0]
        for idx in range(0, 200, 7):
            t = graph.triples[idx]
            inst = pr.build_sit(graph, t, 4, np.random.default_rng(idx))
            query_line = pr.verbalize_triple(graph, t)
            if inst.demonstration:
                assert query_line not in inst.demonstration.split("\n")

    def test_fewer_neighbors_than_budget(self, rng):
        g = kg.build_graph(["a", "b", "c"], ["r"], [(0, 0, 1)])
        inst = pr.build_sit(g, (0, 0, 1), 6, rng)
        # only each other's neighborhood minus the query itself -> no lines
        assert inst.demonstration is None


class TestParseAnswer:
    @pytest.mark.parametrize("text,expected", [
        ("True.", "true"),
        ("  the answer is false", "false"),
        ("maybe", "unknown"),
        ("FALSE! definitely", "false"),
        ("truth is out there", "unknown"),
        ("it is true", "true"),
        ("", "unknown"),
    ])
    def test_cases(self, text, expected):
        assert pr.parse_answer(text) == expected

    def test_round_trip_both_labels(self):
        assert pr.parse_answer("true") == "true"
        assert pr.parse_answer("false") == "false"


class TestJsonl:
    def test_round_trip_all_modes(self, umls, tmp_path):
        graph, _, test = umls
        rng = np.random.default_rng(0)
        instances = []
        for mode in pr.MODES:
            instances.extend(pr.build_eval_instances(graph, test[:3], mode, rng, k=2, neighbors=2))
        path = tmp_path / "all.jsonl"
        pr.export_jsonl(instances, path)
        assert pr.import_jsonl(path) == instances

    def test_missing_output_on_zsr_is_valid(self, tmp_path):
        path = tmp_path / "c.jsonl"
        path.write_text(json.dumps({
            "mode": "zsr", "instruction": "do it", "input": "a r b", "triple": [0, 0, 1],
        }) + "\n", encoding="utf-8")
        insts = pr.import_jsonl(path)
        assert insts[0].answer is None

    def test_missing_input_is_schema_error(self, tmp_path):
        path = tmp_path / "c.jsonl"
        path.write_text(json.dumps({
            "mode": "zsr", "instruction": "do it", "triple": [0, 0, 1],
        }) + "\n", encoding="utf-8")
        with pytest.raises(DataError, match=r"c\.jsonl:1.*input"):
            pr.import_jsonl(path)

    def test_malformed_json_names_line(self, tmp_path):
        path = tmp_path / "c.jsonl"
        path.write_text('{"mode": "zsr"}\nnot json\n', encoding="utf-8")
        with pytest.raises(DataError, match=r"c\.jsonl:1|c\.jsonl:2"):
            pr.import_jsonl(path)

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "c.jsonl"
        path.write_text(json.dumps({
            "mode": "zsr", "instruction": "i", "input": "x", "triple": [0, 0, 1],
            "surprise": 1,
        }) + "\n", encoding="utf-8")
        with pytest.raises(DataError, match="surprise"):
            pr.import_jsonl(path)


class TestPrefixConstantVsSitLinear:
    def test_kopa_prefix_is_three_tokens_and_sit_grows(self, umls):
        graph, _, test = umls
        query = test[0].triple
        kopa_inst = pr.build_kopa(graph, query)
        assert kopa_inst.prefix_triple is not None
        assert len(kopa_inst.prefix_triple) == 3
        base = pr.prompt_token_count(pr.build_it(graph, query, None))
        assert pr.prompt_token_count(kopa_inst) == base  # no text overhead
        sit_counts = []
        for m in (0, 2, 4, 8):
            inst = pr.build_sit(graph, query, m, np.random.default_rng(1))
            sit_counts.append(pr.prompt_token_count(inst))
        assert sit_counts[0] == base
        assert sit_counts[0] < sit_counts[1] < sit_counts[2] < sit_counts[3]
