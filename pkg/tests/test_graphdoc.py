import json

import numpy as np
import pytest

from mmgl.graphdoc import (BOS, EOS, SEP, SPECIAL_TOKENS, TITLE_NODE_ID, ContextRegime, DataError,
                           Example, Node, NodeKind, PageGraph, SynthParams, Vocab, examples_from_pages,
                           load_pages, page_from_dict, save_pages, select_context, synth_dataset,
                           synth_pages, synth_vocab, write_dataset)

VOCAB = Vocab(list(SPECIAL_TOKENS) + "alpha beta gamma delta summary caption title".split())


def record(**kw):
    base = {
        "page_id": "p", "title": "title",
        "sections": [
            {"id": "s1", "order": 0, "text": "alpha beta", "images": [
                {"id": "a", "caption": "caption", "feature": [0.0, 1.0]}]},
            {"id": "s2", "order": 1, "text": "gamma", "summary": "summary", "images": [
                {"id": "b", "caption": "caption", "feature": [1.0, 0.0]}]},
        ],
    }
    base.update(kw)
    return base


def test_vocab_roundtrip_and_oov(tmp_path):
    assert VOCAB.encode("Alpha  BETA zzz") == (5, 6, 0)
    assert VOCAB.decode([BOS, 5, EOS, 6]) == ["alpha", "beta"]
    VOCAB.save(tmp_path / "v.txt")
    assert Vocab.load(tmp_path / "v.txt") == VOCAB
    with pytest.raises(DataError):
        Vocab(["a", "b"])


def test_empty_file_gives_no_pages(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    assert load_pages(path, VOCAB) == []


def test_schema_walkthrough():
    obj = record()
    obj["sections"] = obj["sections"][:1]
    page = page_from_dict(obj, VOCAB, d_img=2)
    # s1 plus its image; the title is page-level, not a stored node
    assert len(page.nodes) == 2
    img = page.node("a")
    assert img.kind is NodeKind.IMAGE and img.parent_id == "s1"
    assert page.images_of("s1") == [img]


def test_one_page_two_sections_one_image():
    obj = record()
    obj["sections"][1]["images"] = []
    page = page_from_dict(obj, VOCAB)
    assert len(page.nodes) == 3
    assert page.node("a").parent_id == "s1"


def test_dangling_parent_rejected_naming_node():
    obj = record()
    obj["sections"][1]["parent_id"] = "nope"
    with pytest.raises(DataError, match=r"'s2'.*dangling"):
        page_from_dict(obj, VOCAB)


@pytest.mark.parametrize("mutate, rule", [
    (lambda o: o["sections"].append(dict(o["sections"][0])), "duplicate"),
    (lambda o: o["sections"][0]["images"][0].update(feature=[1.0]), "width"),
    (lambda o: o["sections"][1].update(order=0), "sibling order"),
    (lambda o: o["sections"][0].update(id=TITLE_NODE_ID), "reserved"),
])
def test_invariant_violations_name_page_and_rule(mutate, rule):
    obj = record()
    mutate(obj)
    with pytest.raises(DataError, match=rule) as exc:
        page_from_dict(obj, VOCAB, d_img=2)
    assert "'p'" in str(exc.value)


def test_parent_cycle_rejected():
    obj = record()
    obj["sections"][0]["parent_id"] = "s2"
    obj["sections"][1]["parent_id"] = "s1"
    with pytest.raises(DataError, match="cycle"):
        page_from_dict(obj, VOCAB)


def test_malformed_json_reports_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text(json.dumps(record()) + "\n{oops\n")
    with pytest.raises(DataError, match=":2:"):
        load_pages(path, VOCAB)


def test_jsonl_roundtrip(tmp_path):
    pages, vocab = synth_pages(3, SynthParams(n_pages=5, vocab_size=128))
    save_pages(pages, tmp_path / "x.jsonl", vocab)
    assert load_pages(tmp_path / "x.jsonl", vocab, d_img=32) == pages


def test_select_context_regimes():
    page = page_from_dict(record(), VOCAB)
    ex = Example(page, "s2", ContextRegime.PAGE_ALL)
    neighbors, target = select_context(ex)
    assert [n.id for n in neighbors] == [TITLE_NODE_ID, "s1", "a", "b"]
    assert target.id == "s2"
    ids = lambda r: [n.id for n in select_context(Example(page, "s2", r))[0]]
    assert ids(ContextRegime.SECTION_TEXT) == []
    assert ids(ContextRegime.SECTION_ALL) == ["b"]
    assert ids(ContextRegime.PAGE_TEXT) == [TITLE_NODE_ID, "s1"]


def test_section_all_without_images_is_empty():
    obj = record()
    obj["sections"][1]["images"] = []
    page = page_from_dict(obj, VOCAB)
    assert select_context(Example(page, "s2", ContextRegime.SECTION_ALL))[0] == []


def test_document_order_is_depth_first():
    obj = record()
    obj["sections"].insert(1, {"id": "s1a", "order": 0, "parent_id": "s1", "text": "delta"})
    page = page_from_dict(obj, VOCAB)
    assert [n.id for n in page.document_order()] == ["s1", "a", "s1a", "s2", "b"]


def test_example_needs_summary():
    page = page_from_dict(record(), VOCAB)
    with pytest.raises(DataError):
        Example(page, "s1")
    assert len(examples_from_pages([page])) == 1


def test_regime_parse():
    assert ContextRegime.parse("PageAll") is ContextRegime.PAGE_ALL
    assert ContextRegime.parse("section_text") is ContextRegime.SECTION_TEXT
    with pytest.raises(ValueError):
        ContextRegime.parse("everything")


def test_synth_deterministic_and_leak_free():
    params = SynthParams(n_pages=20, vocab_size=256)
    a = synth_dataset(7, params)
    b = synth_dataset(7, params)
    assert a == b
    assert a != synth_dataset(8, params)
    topic_lo, topic_hi = len(SPECIAL_TOKENS), len(SPECIAL_TOKENS) + params.n_topics
    for ex in a:
        leak = ex.target.summary_tokens[:params.leak_count]
        assert all(topic_lo <= t < topic_hi for t in leak)
        assert not set(leak) & set(ex.target.text_tokens)
        for sec in ex.page.sections():
            if sec.id != ex.target.id:
                assert [t for t in sec.text_tokens if t in leak] == list(leak)


def test_synth_images_carry_topic_signal():
    params = SynthParams(n_pages=4, vocab_size=256, image_noise=0.0, leak_count=1)
    pages, _ = synth_pages(0, params)
    feats = [np.array(n.image_feature) for n in pages[0].nodes if n.kind is NodeKind.IMAGE]
    for f in feats[1:]:
        np.testing.assert_allclose(f, feats[0])


@pytest.mark.parametrize("bad", [dict(leak_count=40), dict(vocab_size=20), dict(copy_tokens=99)])
def test_synth_contradictions(bad):
    with pytest.raises(ValueError):
        synth_pages(0, SynthParams(**bad))


def test_write_dataset(tmp_path):
    params = SynthParams(n_pages=6, vocab_size=128)
    paths = write_dataset(tmp_path, 1, params, n_val_pages=2)
    vocab = Vocab.load(paths["vocab"])
    assert vocab == synth_vocab(params)
    assert len(load_pages(paths["train"], vocab, 32)) == 6
    assert len(load_pages(paths["val"], vocab, 32)) == 2
    first = paths["train"].read_bytes()
    write_dataset(tmp_path / "other", 2, params, 2)
    assert (tmp_path / "other" / "train.jsonl").read_bytes() != first


def test_node_all_text_and_sep_constant():
    n = Node("x", NodeKind.SECTION, 0, text_tokens=(7,), title_tokens=(9,))
    assert n.all_text == (9, 7) and n.is_text
    assert SEP == 4
    assert PageGraph("q", (), ()).document_order() == []


def test_leak_free_corpus_summary_is_function_of_target():
    params = SynthParams(n_pages=30, vocab_size=256, leak_count=0)
    for ex in synth_dataset(5, params):
        target = ex.target
        assert target.summary_tokens == target.text_tokens[:params.copy_tokens]
        assert set(target.summary_tokens) <= set(target.text_tokens)


def test_context_grows_monotonically():
    params = SynthParams(n_pages=10, vocab_size=256)
    pages, _ = synth_pages(2, params)
    for ex in examples_from_pages(pages):
        ids = {r: {n.id for n in select_context(Example(ex.page, ex.target_section_id, r))[0]}
               for r in ContextRegime}
        assert ids[ContextRegime.PAGE_ALL] >= ids[ContextRegime.PAGE_TEXT] >= ids[ContextRegime.SECTION_TEXT]
        assert ids[ContextRegime.SECTION_ALL] >= ids[ContextRegime.SECTION_TEXT]
        assert ids[ContextRegime.PAGE_ALL] >= ids[ContextRegime.SECTION_ALL]
