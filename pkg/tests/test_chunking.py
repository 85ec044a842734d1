import logging
import re

import pytest
from hypothesis import given, settings, strategies as st

from ragbench.chunking import (SplitterParams, Strategy, count_tokens, header_split, recursive_split,
                               split_document, tokenize, truncate_tokens)
from ragbench.corpus import DocFormat, Document

FIXED = SplitterParams(500, 50, Strategy.RECURSIVE_FIXED)
HEADER = SplitterParams(500, 50, Strategy.MARKDOWN_HEADER)


def doc(body, fmt=DocFormat.PLAIN, doc_id="d"):
    return Document(doc_id, f"{doc_id}.txt", body, fmt)


def words(n, start=0):
    return " ".join(f"w{i}" for i in range(start, start + n))


def window_oracle(n, size, overlap):
    """Enumerate window positions with a fixed stride; no snapping."""
    spans, s = [], 0
    while n:
        e = min(s + size, n)
        spans.append((s, e))
        if e == n:
            break
        s += size - overlap
    return spans


@pytest.mark.parametrize("text, n", [("", 0), ("hello world", 2), ("a  b\tc\nd", 4), ("  \n ", 0)])
def test_count_tokens(text, n):
    assert count_tokens(text) == n


def test_truncate_tokens_cuts_on_boundary():
    assert truncate_tokens("a b\n\nc d", 3) == "a b\n\nc"
    assert truncate_tokens("a b", 5) == "a b"
    assert truncate_tokens("a b", 0) == ""


def test_params_validation():
    with pytest.raises(ValueError):
        SplitterParams(100, 100)
    with pytest.raises(ValueError):
        SplitterParams(0, 0)
    with pytest.raises(ValueError):
        SplitterParams(10, -1)


def test_single_window():
    chunks = recursive_split(doc(words(500)), FIXED)
    assert [c.span for c in chunks] == [(0, 500)]


def test_950_tokens_two_windows():
    chunks = recursive_split(doc(words(950)), FIXED)
    assert [c.span for c in chunks] == window_oracle(950, 500, 50) == [(0, 500), (450, 950)]


def test_empty_document():
    assert recursive_split(doc(""), FIXED) == []
    assert header_split(doc("", DocFormat.MARKDOWN), HEADER) == []


def test_chunk_fields():
    chunks = recursive_split(doc(words(1200), doc_id="rep"), FIXED)
    assert [c.chunk_id for c in chunks] == ["rep:0000", "rep:0001", "rep:0002"]
    for c in chunks:
        assert c.doc_id == "rep"
        assert c.header_path == ()
        assert c.token_count == c.span[1] - c.span[0] == count_tokens(c.text)
        assert tokenize(c.text) == [f"w{i}" for i in range(*c.span)]


def test_snaps_to_paragraph_break():
    body = words(480) + "\n\n" + words(520, 480)
    spans = [c.span for c in recursive_split(doc(body), FIXED)]
    assert spans[0] == (0, 480)
    assert spans[1][0] == 430


def test_paragraph_preferred_over_later_sentence_break():
    toks = [f"w{i}" for i in range(1000)]
    toks[489] += "."
    body = " ".join(toks[:460]) + "\n\n" + " ".join(toks[460:])
    assert recursive_split(doc(body), FIXED)[0].span == (0, 460)


def test_snaps_to_sentence_break():
    toks = [f"w{i}" for i in range(1000)]
    toks[470] += "."
    assert recursive_split(doc(" ".join(toks)), FIXED)[0].span == (0, 471)


def test_break_outside_slack_ignored():
    body = words(400) + "\n\n" + words(600, 400)
    assert recursive_split(doc(body), FIXED)[0].span == (0, 500)


def test_window_never_exceeds_size_with_breaks():
    body = "\n\n".join(words(7, i * 7) + "." for i in range(300))
    chunks = recursive_split(doc(body), SplitterParams(50, 10))
    assert all(c.token_count <= 50 for c in chunks)
    assert chunks[0].span[0] == 0 and chunks[-1].span[1] == 2100


@settings(max_examples=150, deadline=None)
@given(n=st.integers(0, 3000), size=st.integers(1, 600), data=st.data())
def test_no_break_tiling_matches_oracle(n, size, data):
    overlap = data.draw(st.integers(0, size - 1))
    params = SplitterParams(size, overlap)
    spans = [c.span for c in recursive_split(doc(words(n)), params)]
    assert spans == window_oracle(n, size, overlap)


@st.composite
def prose(draw):
    pieces = draw(st.lists(st.tuples(st.sampled_from(["word", "end.", "why?", "(aside)"]),
                                     st.sampled_from([" ", "\n", "\n\n", "  \t"])), max_size=400))
    return "".join(w + sep for w, sep in pieces)


@settings(max_examples=150, deadline=None)
@given(body=prose(), size=st.integers(2, 80), data=st.data())
def test_coverage_with_snapping(body, size, data):
    overlap = data.draw(st.integers(0, size - 1))
    chunks = recursive_split(doc(body), SplitterParams(size, overlap))
    n = count_tokens(body)
    covered = set()
    for prev, cur in zip(chunks, chunks[1:]):
        assert cur.span[0] == prev.span[1] - overlap
    for c in chunks:
        assert 0 < c.token_count <= size
        covered.update(range(*c.span))
    assert covered == set(range(n))


def test_header_examples():
    one = header_split(doc("# A\nbody", DocFormat.MARKDOWN), HEADER)
    assert len(one) == 1 and one[0].header_path == ("A",) and "body" in one[0].text

    two = header_split(doc("# A\nx\n## B\ny", DocFormat.MARKDOWN), HEADER)
    assert [(c.header_path, c.text) for c in two] == [(("A",), "x"), (("A", "B"), "y")]

    flat = header_split(doc("just prose\n\nmore", DocFormat.MARKDOWN), HEADER)
    assert len(flat) == 1 and flat[0].header_path == ()


def test_header_spans_index_whole_document_stream():
    chunks = header_split(doc("# A\nx\n## B\ny", DocFormat.MARKDOWN), HEADER)
    # tokens: "#" "A" "x" "##" "B" "y"
    assert [c.span for c in chunks] == [(2, 3), (5, 6)]


def test_heading_only_sections_dropped():
    chunks = header_split(doc("# A\n## B\n## C\ntext", DocFormat.MARKDOWN), HEADER)
    assert [c.header_path for c in chunks] == [("A", "C")]


def test_retrieval_text_injects_path():
    c = header_split(doc("# A\n## B\nbody text", DocFormat.MARKDOWN), HEADER)[0]
    assert c.retrieval_text == "A > B\nbody text"
    assert recursive_split(doc("plain"), FIXED)[0].retrieval_text == "plain"


def test_oversized_section_sub_split():
    body = "# Big\n" + words(950) + "\n# Small\ntail"
    chunks = header_split(doc(body, DocFormat.MARKDOWN), HEADER)
    assert [c.header_path for c in chunks] == [("Big",), ("Big",), ("Small",)]
    assert [c.span for c in chunks] == [(2, 502), (452, 952), (954, 955)]
    assert [c.chunk_id for c in chunks] == ["d:0000", "d:0001", "d:0002"]


def test_plain_document_falls_back(caplog):
    body = words(950)
    with caplog.at_level(logging.WARNING):
        chunks = header_split(doc(body, DocFormat.PLAIN), HEADER)
    assert "falling back" in caplog.text
    assert [c.span for c in chunks] == [(0, 500), (450, 950)]


_ORACLE_HEADING = re.compile(r"^ {0,3}#{1,6}(\s|$)")


def body_tokens_without_headings(body):
    out = []
    for line in body.split("\n"):
        if not _ORACLE_HEADING.match(line):
            out.extend(line.split())
    return out


@st.composite
def markdown_doc(draw):
    lines = []
    for _ in range(draw(st.integers(0, 25))):
        kind = draw(st.sampled_from(["h", "p", "p", "blank"]))
        if kind == "h":
            level = draw(st.integers(1, 4))
            title = draw(st.sampled_from(["Intro", "Risk factors", "Care", "Data"]))
            lines.append("#" * level + " " + title)
        elif kind == "p":
            lines.append(" ".join(draw(st.lists(st.sampled_from(["alpha", "beta.", "#tag", "x"]), min_size=1, max_size=30))))
        else:
            lines.append("")
    return "\n".join(lines)


@settings(max_examples=200, deadline=None)
@given(body=markdown_doc(), size=st.integers(5, 60))
def test_header_reconstruction(body, size):
    params = SplitterParams(size, size // 5, Strategy.MARKDOWN_HEADER)
    chunks = header_split(doc(body, DocFormat.MARKDOWN), params)
    # sub-split pieces overlap, so rebuild from the non-overlapping part of each piece
    rebuilt, last_end = [], 0
    for c in chunks:
        toks = tokenize(c.text)
        skip = max(0, last_end - c.span[0])
        rebuilt.extend(toks[skip:])
        last_end = c.span[1]
        assert c.token_count == len(toks) == c.span[1] - c.span[0] <= size
        assert 1 <= len(c.header_path) <= 4 or c.header_path == ()
    assert rebuilt == body_tokens_without_headings(body)


def test_split_document_dispatch():
    d = doc("# A\nx", DocFormat.MARKDOWN)
    assert split_document(d, HEADER)[0].header_path == ("A",)
    assert split_document(d, FIXED)[0].header_path == ()


def test_splitters_are_deterministic():
    d = doc("# A\n" + words(2000), DocFormat.MARKDOWN)
    assert header_split(d, HEADER) == header_split(d, HEADER)
    assert recursive_split(d, FIXED) == recursive_split(d, FIXED)
