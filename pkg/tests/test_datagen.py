
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from disrank.datagen import (
    SPLITS,
    JsonlError,
    LabeledRecord,
    SynthConfig,
    build_document,
    gen_corpus,
    generate_splits,
    group_by_query,
    make_vocab,
    read_jsonl,
    round_half_up,
    write_jsonl,
)

SMALL = {"cpt": 60, "sft": 60, "kd": 30, "test": 20}


def overlap(r):
    """Query-word share over title (distinct) and summary (tokens)."""
    q = set(r.query.split())
    t, s = r.title.split(), r.summary.split()
    hits = len(q & set(t)) + sum(w in q for w in s)
    return hits / (len(q) + len(s))


def overlap_oracle(r):
    return round_half_up(4 * overlap(r))


@pytest.fixture(scope="module")
def clean():
    cfg = SynthConfig(n_queries={"cpt": 0, "sft": 400, "kd": 0, "test": 0}, noise=0.0, seed=7)
    return generate_splits(cfg)["sft"]


def test_round_half_up():
    assert [round_half_up(x) for x in (0.5, 1.5, 2.5, 0.49)] == [1, 2, 3, 0]


def test_vocab_words_are_short_lowercase_and_distinct():
    vocab = make_vocab(200, np.random.default_rng(0))
    assert len(set(vocab)) == 200
    assert all(3 <= len(w) <= 6 and w.isalpha() and w.islower() for w in vocab)


@pytest.mark.parametrize("nq", [2, 3, 4, 5])
def test_title_overlap_follows_label(nq):
    cfg = SynthConfig()
    g = np.random.default_rng(nq)
    vocab = make_vocab(200, g)
    for _ in range(50):
        qwords = list(g.choice(vocab, size=nq, replace=False))
        for y in range(5):
            title, summary = build_document(qwords, y, vocab, cfg, g)
            tw = title.split()
            shared = set(qwords) & set(tw)
            assert len(shared) == round_half_up(y / 4 * nq)
            assert sum(w in qwords for w in tw) == len(shared)
            if y == 4:
                assert set(qwords) <= set(tw)
            if y == 0:
                assert not shared and not set(qwords) & set(summary.split())
            n_sum = len(summary.split())
            assert 5 <= n_sum <= 20
            assert sum(w in qwords for w in summary.split()) == round_half_up(y / 4 * n_sum)


def test_overlap_oracle_recovers_clean_labels(clean):
    recs = clean[:1000]
    acc = np.mean([overlap_oracle(r) == r.label for r in recs])
    assert len(recs) == 1000 and acc > 0.9


def test_overlap_increases_with_label(clean):
    by_label = {y: [overlap(r) for r in clean if r.label == y] for y in range(5)}
    assert min(len(v) for v in by_label.values()) >= 500
    means = [np.mean(by_label[y]) for y in range(5)]
    assert all(a < b for a, b in zip(means, means[1:]))


def test_noise_rate_is_roughly_respected():
    cfg = SynthConfig(n_queries={"cpt": 0, "sft": 300, "kd": 0, "test": 0}, noise=0.2, seed=1)
    recs = generate_splits(cfg)["sft"]
    flipped = np.mean([overlap_oracle(r) != r.label for r in recs])
    assert 0.13 < flipped < 0.3


def test_split_shapes_and_disjointness():
    splits = generate_splits(SynthConfig(n_queries=SMALL, seed=2))
    queries = {s: {r.query for r in recs} for s, recs in splits.items()}
    for s in ("sft", "kd", "test"):
        assert len(splits[s]) == SMALL[s] * 8
        assert len(queries[s]) == SMALL[s]
    for i, a in enumerate(SPLITS):
        for b in SPLITS[i + 1 :]:
            assert not queries[a] & queries[b]
    assert all(r.label is None and r.score is None for r in splits["kd"])
    assert all(r.label is None for r in splits["cpt"])
    assert all(r.label is not None for r in splits["sft"] + splits["test"])


def test_cpt_keeps_only_clicked_documents():
    splits = generate_splits(SynthConfig(n_queries=SMALL, noise=0.0, seed=4))
    assert splits["cpt"]
    assert all(overlap_oracle(r) >= 3 for r in splits["cpt"])
    # roughly 2/5 of documents survive
    assert 0.3 < len(splits["cpt"]) / (SMALL["cpt"] * 8) < 0.5


def test_same_seed_gives_byte_identical_files(tmp_path):
    cfg = SynthConfig(n_queries=SMALL, seed=9)
    a = gen_corpus(cfg, tmp_path / "a")
    b = gen_corpus(cfg, tmp_path / "b")
    c = gen_corpus(SynthConfig(n_queries=SMALL, seed=10), tmp_path / "c")
    for s in SPLITS:
        assert a[s].read_bytes() == b[s].read_bytes()
    assert a["sft"].read_bytes() != c["sft"].read_bytes()
    assert b"\r\n" not in a["sft"].read_bytes()


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(vocab_words=10)
    with pytest.raises(ValueError):
        SynthConfig(docs_per_query=1)
    with pytest.raises(ValueError):
        SynthConfig(noise=0.5)
    with pytest.raises(ValueError):
        SynthConfig(n_queries={"sft": 1})


# --- jsonl ---------------------------------------------------------------------


records_st = st.builds(
    LabeledRecord,
    query=st.text(min_size=1, max_size=30),
    title=st.text(max_size=30),
    summary=st.text(max_size=60),
    label=st.one_of(st.none(), st.integers(0, 4)),
    score=st.one_of(st.none(), st.floats(allow_nan=False, allow_infinity=False)),
)


@given(st.lists(records_st, max_size=20))
def test_jsonl_roundtrip(tmp_path_factory, recs):
    path = tmp_path_factory.mktemp("j") / "r.jsonl"
    write_jsonl(path, recs)
    assert read_jsonl(path) == recs


def test_jsonl_roundtrip_hundred(tmp_path):
    recs = generate_splits(SynthConfig(n_queries={"cpt": 0, "sft": 13, "kd": 0, "test": 0}))["sft"][:100]
    write_jsonl(tmp_path / "r.jsonl", recs)
    assert read_jsonl(tmp_path / "r.jsonl") == recs


def test_jsonl_field_order_is_stable(tmp_path):
    write_jsonl(tmp_path / "r.jsonl", [LabeledRecord("q", "t", "s", label=2, score=0.5)])
    assert (tmp_path / "r.jsonl").read_text() == '{"query":"q","title":"t","summary":"s","label":2,"score":0.5}\n'


def test_jsonl_truncated_last_line(tmp_path):
    path = tmp_path / "r.jsonl"
    write_jsonl(path, [LabeledRecord("a", "b", "c")] * 3)
    path.write_bytes(path.read_bytes()[:-6])
    with pytest.raises(JsonlError) as err:
        read_jsonl(path)
    assert err.value.lineno == 3


def test_jsonl_empty_file(tmp_path):
    (tmp_path / "e.jsonl").write_text("")
    assert read_jsonl(tmp_path / "e.jsonl") == []


def test_jsonl_unknown_fields_warn(tmp_path):
    path = tmp_path / "r.jsonl"
    path.write_text('{"query":"q","title":"t","summary":"s","extra":1}\n')
    with pytest.warns(UserWarning, match="extra"):
        recs = read_jsonl(path)
    assert recs == [LabeledRecord("q", "t", "s")]


def test_jsonl_bad_label(tmp_path):
    path = tmp_path / "r.jsonl"
    path.write_text('{"query":"q","label":1}\n{"query":"q","label":7}\n')
    with pytest.raises(JsonlError) as err:
        read_jsonl(path)
    assert err.value.lineno == 2


def test_group_by_query_preserves_order():
    recs = [LabeledRecord("b", "1"), LabeledRecord("a", "2"), LabeledRecord("b", "3")]
    groups = group_by_query(recs)
    assert list(groups) == ["b", "a"]
    assert [r.title for r in groups["b"]] == ["1", "3"]
