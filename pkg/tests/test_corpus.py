"""Tests for corpus generation, the uniqueness oracle, distractor
invariants, and the JSON-lines round trip."""

import json

import numpy as np
import pytest

from infomaxqa.corpus import (
    CorpusError,
    QAExample,
    Vocab,
    WorldSpec,
    distractor_overlap,
    find_answer_spans,
    generate_corpus,
    generate_distractors,
    generate_example,
    contains_subsequence,
    read_corpus,
    validate_example,
    write_corpus,
)

SPEC = WorldSpec.default()


class TestGeneration:
    def test_seeded_generation_is_deterministic(self):
        a = generate_example(SPEC, np.random.default_rng(40), "x")
        b = generate_example(SPEC, np.random.default_rng(40), "x")
        assert a == b

    def test_gold_span_matches_template_fill(self):
        rng = np.random.default_rng(41)
        for _ in range(50):
            ex = generate_example(SPEC, rng)
            if ex.question[0] == "who":
                # subject slot: two name tokens at the head of some sentence
                assert ex.answer_start % 9 == 0
                assert ex.answer_end == ex.answer_start + 1
                assert ex.answer_tokens[0] in SPEC.first_names
                assert ex.answer_tokens[1] in SPEC.last_names
            else:
                assert ex.answer_start % 9 == 7
                assert ex.answer_tokens[0] in SPEC.places

    def test_passage_sizes(self):
        rng = np.random.default_rng(42)
        sizes = {len(generate_example(SPEC, rng).passage) // 9 for _ in range(300)}
        assert sizes == set(range(3, 9))

    def test_unique_answer_validator_on_1000_examples(self):
        """Exhaustive sentence scan finds exactly the gold span, always."""
        rng = np.random.default_rng(43)
        for ex in generate_corpus(SPEC, 1000, 1, rng, "u"):
            spans = find_answer_spans(ex.passage, ex.question)
            assert spans == [(ex.answer_start, ex.answer_end)]

    def test_corpus_generation_is_byte_identical_across_runs(self, tmp_path):
        paths = []
        for run in range(2):
            rng = np.random.default_rng(7)
            exs = generate_corpus(SPEC, 40, 3, rng, "d")
            p = tmp_path / f"run{run}.jsonl"
            write_corpus(exs, p)
            paths.append(p.read_bytes())
        assert paths[0] == paths[1]


class TestDistractors:
    def test_single_candidate_pool(self):
        rng = np.random.default_rng(44)
        ex = generate_example(SPEC, rng)
        ds = generate_distractors(ex, 1, rng, SPEC)
        assert len(ds) == 1

    def test_decoy_never_equals_gold_and_never_contains_it(self):
        rng = np.random.default_rng(45)
        for _ in range(300):
            ex = generate_example(SPEC, rng)
            for d in generate_distractors(ex, 4, rng, SPEC):
                assert not contains_subsequence(d, ex.answer_tokens)

    def test_overlap_at_least_half_on_1000_examples(self):
        rng = np.random.default_rng(46)
        for ex in generate_corpus(SPEC, 1000, 2, rng, "o"):
            for d in ex.distractors:
                assert distractor_overlap(ex.question, d) >= 0.5

    def test_distractor_does_not_answer_the_question(self):
        rng = np.random.default_rng(47)
        for _ in range(200):
            ex = generate_example(SPEC, rng)
            for d in generate_distractors(ex, 3, rng, SPEC):
                spans = find_answer_spans(ex.passage + d, ex.question)
                assert spans == [(ex.answer_start, ex.answer_end)]

    def test_zero_count_rejected(self):
        rng = np.random.default_rng(48)
        ex = generate_example(SPEC, rng)
        with pytest.raises(CorpusError, match="at least one"):
            generate_distractors(ex, 0, rng, SPEC)

    def test_validate_example_flags_violations(self):
        rng = np.random.default_rng(49)
        ex = generate_example(SPEC, rng)
        ex.distractors = [list(ex.answer_tokens) + ["."]]
        with pytest.raises(CorpusError, match="gold answer"):
            validate_example(ex)


class TestRoundTrip:
    def test_write_then_read_is_lossless(self, tmp_path):
        rng = np.random.default_rng(50)
        exs = generate_corpus(SPEC, 25, 3, rng, "r")
        path = tmp_path / "c.jsonl"
        write_corpus(exs, path)
        assert read_corpus(path) == exs

    def test_empty_file_is_empty_corpus(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        assert read_corpus(path) == []

    def test_corrupt_line_reports_line_number(self, tmp_path):
        rng = np.random.default_rng(51)
        exs = generate_corpus(SPEC, 100, 1, rng, "c")
        path = tmp_path / "c.jsonl"
        write_corpus(exs, path)
        lines = path.read_text().splitlines()
        lines[56] = lines[56][:-10]  # truncate mid-record
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(CorpusError, match="line 57"):
            read_corpus(path)

    def test_missing_field_reports_line_and_field(self, tmp_path):
        record = {"id": "x", "passage": ["a", "."], "question": ["who", "?"],
                  "answer_start": 0, "answer_end": 0}
        path = tmp_path / "m.jsonl"
        path.write_text(json.dumps(record) + "\n")
        with pytest.raises(CorpusError, match="line 1.*distractors"):
            read_corpus(path)

    def test_out_of_range_span_rejected(self, tmp_path):
        record = {"id": "x", "passage": ["a", "."], "question": ["who", "?"],
                  "answer_start": 0, "answer_end": 5, "distractors": []}
        path = tmp_path / "s.jsonl"
        path.write_text(json.dumps(record) + "\n")
        with pytest.raises(CorpusError, match="answer_start/answer_end"):
            read_corpus(path)


class TestVocab:
    def test_world_vocabulary_is_closed_over_generation(self):
        vocab = Vocab.from_world(SPEC)
        rng = np.random.default_rng(52)
        for ex in generate_corpus(SPEC, 50, 3, rng, "v"):
            vocab.encode(ex.passage)
            vocab.encode(ex.question)
            for d in ex.distractors:
                vocab.encode(d)

    def test_size_is_desk_scale(self):
        assert 1000 <= len(Vocab.from_world(SPEC)) <= 2500

    def test_unknown_token_rejected(self):
        vocab = Vocab.from_world(SPEC)
        with pytest.raises(CorpusError, match="outside the closed vocabulary"):
            vocab.encode(["zzzzzz"])

    def test_save_load_round_trip(self, tmp_path):
        vocab = Vocab.from_world(SPEC)
        vocab.save(tmp_path / "vocab.json")
        again = Vocab.load(tmp_path / "vocab.json")
        assert again.tokens == vocab.tokens
        assert again.sep_id == 0

    def test_pool_overlap_rejected(self):
        with pytest.raises(CorpusError, match="overlap"):
            WorldSpec(first_names=("ada",), last_names=("ada",),
                      adjectives=("tin",), nouns=("lens",), places=("kyoto",),
                      relations=(SPEC.relations[0],)).validate()


def test_example_equality_includes_distractors():
    a = QAExample("1", ["x", "."], ["who", "?"], 0, 0, [["d", "."]])
    b = QAExample("1", ["x", "."], ["who", "?"], 0, 0, [])
    assert a != b
