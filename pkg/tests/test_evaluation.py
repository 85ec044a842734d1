import json
import math
import random

import pytest
from hypothesis import given, settings, strategies as st

from ragbench.evaluation import (JUDGE_RUBRIC, STOPWORDS, AggregationError, JudgeVerdict, MetricsReport,
                                 UnjudgeableError, aggregate, content_tokens, extract_first_json_object,
                                 judge_llm, judge_oracle, render_table)


def test_stopword_list_size():
    assert len(STOPWORDS) == 30


def test_rubric_wording():
    assert "the fraction of answer claims not supported by the provided context" in JUDGE_RUBRIC
    assert "how directly the answer addresses the question" in JUDGE_RUBRIC


def test_oracle_verbatim_answer():
    ctx = "Camp schools reported irregular attendance among displaced children."
    assert judge_oracle("attendance", [ctx], ctx).hallucination == 0.0


def test_oracle_unsupported_answer():
    assert judge_oracle("q", ["alpha beta"], "gamma delta").hallucination == 1.0


def test_oracle_relevance_two_thirds():
    v = judge_oracle("refugee child trauma", ["anything"], "refugee trauma was common")
    assert v.relevance == pytest.approx(2 / 3)


def test_oracle_empty_answer_and_query():
    v = judge_oracle("the of", ["ctx"], "the a")
    assert (v.hallucination, v.relevance) == (0.0, 0.0)


def test_oracle_ignores_answer_label_and_punctuation():
    v = judge_oracle("trauma?", ["Trauma, screening."], "Answer: trauma screening")
    assert (v.hallucination, v.relevance) == (0.0, 1.0)


def test_oracle_accepts_id_text_pairs():
    a = judge_oracle("x y", [("c1", "x"), ("c2", "y")], "x y")
    b = judge_oracle("x y", ["x", "y"], "x y")
    assert (a.hallucination, a.relevance) == (b.hallucination, b.relevance)


WORDS = st.sampled_from(["refugee", "child", "trauma", "camp", "the", "school", "of", "war", "care", "data"])
TEXT = st.lists(WORDS, max_size=20).map(" ".join)


@settings(max_examples=200, deadline=None)
@given(q=TEXT, blocks=st.lists(TEXT, max_size=4), answer=TEXT, extra=st.data())
def test_oracle_properties(q, blocks, answer, extra):
    v = judge_oracle(q, blocks, answer)
    assert 0.0 <= v.hallucination <= 1.0 and 0.0 <= v.relevance <= 1.0
    shuffled = extra.draw(st.permutations(blocks))
    w = judge_oracle(q, shuffled, answer)
    assert (w.hallucination, w.relevance) == (v.hallucination, v.relevance)
    supported = sorted(content_tokens(" ".join(blocks)))
    if supported:
        more = extra.draw(st.lists(st.sampled_from(supported), min_size=1, max_size=5))
        assert judge_oracle(q, blocks, answer + " " + " ".join(more)).hallucination <= v.hallucination


class ScriptedJudge:
    backend_id = "openai-chat:gpt-4"

    def __init__(self, *replies):
        self.replies = list(replies)
        self.prompts = []

    def complete(self, prompt, decoding):
        self.prompts.append(prompt)
        return self.replies.pop(0)


def test_judge_direct_json():
    v = judge_llm(ScriptedJudge('{"hallucination":0.1,"relevance":0.9,"rationale":"grounded"}'),
                  "q", ["c"], "a", "q1")
    assert (v.hallucination, v.relevance, v.rationale) == (0.1, 0.9, "grounded")
    assert v.judge_id == "openai-chat:gpt-4" and v.query_id == "q1"


def test_judge_prose_wrapped_json():
    reply = 'Sure! Here is my grading {"hallucination": 0.1, "relevance": 0.9, "rationale": "ok"} hope it helps'
    v = judge_llm(ScriptedJudge(reply), "q", ["c"], "a")
    assert (v.hallucination, v.relevance) == (0.1, 0.9)


def test_judge_clamps_with_warning(caplog):
    v = judge_llm(ScriptedJudge('{"hallucination":1.4,"relevance":-0.2}'), "q", ["c"], "a")
    assert (v.hallucination, v.relevance) == (1.0, 0.0)
    assert len(v.warnings) == 2 and "clamped" in caplog.text


def test_judge_reasks_then_succeeds():
    judge = ScriptedJudge("no idea", '{"hallucination": 0.5}', '{"hallucination":0.2,"relevance":0.7}')
    v = judge_llm(judge, "q", ["c"], "a")
    assert (v.hallucination, v.relevance) == (0.2, 0.7)
    assert len(judge.prompts) == 3
    assert "could not be parsed" in judge.prompts[1]


def test_judge_unjudgeable_after_two_reasks():
    judge = ScriptedJudge("nope", "still nope", "{broken", "never asked")
    with pytest.raises(UnjudgeableError, match="unjudgeable"):
        judge_llm(judge, "q", ["c"], "a", "q9")
    assert len(judge.prompts) == 3


@pytest.mark.parametrize("text, expected", [
    ('{"a": 1} {"hallucination": 0, "relevance": 1}', {"hallucination": 0, "relevance": 1}),
    ('```json\n{"hallucination": 0.3, "relevance": 0.4}\n```', {"hallucination": 0.3, "relevance": 0.4}),
    ('{"hallucination": "x", "relevance": 1}', None),
    ('{"nested": {"hallucination": 0.1, "relevance": 0.2}}', {"hallucination": 0.1, "relevance": 0.2}),
    ("", None),
])
def test_extract_first_json_object(text, expected):
    assert extract_first_json_object(text) == expected


def verdicts(pairs, prefix="q"):
    return [JudgeVerdict(f"{prefix}{i:02d}", h, r) for i, (h, r) in enumerate(pairs)]


def test_aggregate_constant():
    m = aggregate({"p": verdicts([(0.12, 0.91)] * 50)}).per_pipeline["p"]
    assert round(m.hallucination_mean, 2) == 0.12 and round(m.answer_relevance_mean, 2) == 0.91
    assert m.n_queries == 50 and m.n_missing == 0


def test_aggregate_two_point():
    m = aggregate({"p": verdicts([(0.0, 1.0), (1.0, 0.0)])}).per_pipeline["p"]
    assert (m.hallucination_mean, m.answer_relevance_mean) == (0.5, 0.5)


def test_aggregate_requires_verdicts():
    with pytest.raises(AggregationError):
        aggregate({"p": []})


def test_aggregate_order_insensitive():
    rng = random.Random(0)
    vs = verdicts([(rng.random(), rng.random()) for _ in range(50)])
    base = aggregate({"p": vs}).dumps()
    for _ in range(20):
        rng.shuffle(vs)
        assert aggregate({"p": vs}).dumps() == base


def test_aggregate_mean_matches_fsum_oracle():
    rng = random.Random(1)
    vs = verdicts([(rng.random(), rng.random()) for _ in range(37)])
    m = aggregate({"p": vs}).per_pipeline["p"]
    assert m.hallucination_mean == math.fsum(v.hallucination for v in vs) / 37


def test_missing_disclosed():
    report = aggregate({"p": verdicts([(0.2, 0.8)] * 3)}, missing={"p": ["q9", "q5"]})
    m = report.per_pipeline["p"]
    assert m.n_queries == 3 and m.n_missing == 2 and m.missing == ["q5", "q9"]
    assert json.loads(report.dumps())["pipelines"]["p"]["n_missing"] == 2


def test_report_json_round_trip():
    report = aggregate({"a": verdicts([(0.3, 0.9)]), "b": verdicts([(0.1, 0.5)])})
    report.notes["k"] = "v"
    again = MetricsReport.from_json(json.loads(report.dumps()))
    assert again.dumps() == report.dumps()


def test_render_table_shape():
    report = aggregate({"zephyr-like": verdicts([(0.32, 0.88)]), "deepseek-like": verdicts([(0.12, 0.91)])})
    lines = render_table(report).splitlines()
    assert len(lines) == 3
    assert lines[0].split() == ["Evaluation", "metrics", "zephyr-like", "deepseek-like"]
    assert lines[1].split() == ["Answer", "Relevance", "0.88", "0.91"]
    assert lines[2].split() == ["Hallucination", "0.32", "0.12"]
    assert len({len(line) for line in lines}) == 1
