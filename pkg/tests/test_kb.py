import json

import numpy as np
import pytest

from reflectrag.kb import (
    KBLoadError,
    Passage,
    load_kb,
    passages_of,
    save_kb,
    sidecar_path,
)

from conftest import doc_record, write_kb_file


def test_load_counts_records(tmp_path):
    path = write_kb_file(
        tmp_path / "kb.jsonl",
        [doc_record("a"), doc_record("b"), doc_record("c")],
    )
    kb = load_kb(path)
    assert len(kb) == 3
    assert kb.embedding_dim == 4
    assert kb.doc_ids() == ["a", "b", "c"]


def test_duplicate_id_cites_line(tmp_path):
    docs = [doc_record(f"d{i}") for i in range(5)] + [doc_record("d2")]
    path = write_kb_file(tmp_path / "kb.jsonl", docs)
    with pytest.raises(KBLoadError, match="line 7"):
        load_kb(path)  # duplicate sits on line 7 (manifest + 6 records)


def test_malformed_json_cites_line(tmp_path):
    path = tmp_path / "kb.jsonl"
    good = json.dumps(doc_record("a"))
    path.write_text(
        '{"manifest": true, "embedding_dim": 4, "count": 2}\n' + good + "\n{oops\n"
    )
    with pytest.raises(KBLoadError, match="line 3"):
        load_kb(path)


def test_non_unit_embedding_rejected(tmp_path):
    path = write_kb_file(
        tmp_path / "kb.jsonl", [doc_record("a", embedding=[0.5, 0.0, 0.0, 0.0])]
    )
    with pytest.raises(KBLoadError, match="not unit-normalized") as exc_info:
        load_kb(path)
    assert "'a'" in str(exc_info.value)


def test_embedding_length_mismatch_names_doc(tmp_path):
    path = write_kb_file(tmp_path / "kb.jsonl", [doc_record("doc-x", embedding=[1.0, 0.0])])
    with pytest.raises(KBLoadError, match="doc-x"):
        load_kb(path)


def test_count_mismatch_rejected(tmp_path):
    path = write_kb_file(tmp_path / "kb.jsonl", [doc_record("a")], manifest={"count": 5})
    with pytest.raises(KBLoadError, match="count"):
        load_kb(path)


def test_empty_section_body_rejected(tmp_path):
    path = write_kb_file(tmp_path / "kb.jsonl", [doc_record("a", sections=["ok", "  "])])
    with pytest.raises(KBLoadError, match="empty body"):
        load_kb(path)


def test_empty_title_rejected(tmp_path):
    record = doc_record("a")
    record["title"] = "  "
    path = write_kb_file(tmp_path / "kb.jsonl", [record])
    with pytest.raises(KBLoadError, match="title"):
        load_kb(path)


def test_zero_section_document_allowed(tmp_path):
    path = write_kb_file(tmp_path / "kb.jsonl", [doc_record("bare", sections=[])])
    kb = load_kb(path)
    assert passages_of(kb, "bare") == []


def test_missing_embedding_is_warning_not_error(tmp_path, caplog):
    path = write_kb_file(tmp_path / "kb.jsonl", [doc_record("a", embedding=None)])
    with caplog.at_level("WARNING"):
        kb = load_kb(path)
    assert kb.documents["a"].image_embedding is None
    assert any("image embedding" in r.message for r in caplog.records)


def test_passages_are_ordered_views(tmp_path):
    path = write_kb_file(
        tmp_path / "kb.jsonl", [doc_record("a", sections=["first.", "second.", "third."])]
    )
    kb = load_kb(path)
    passages = passages_of(kb, "a")
    assert [p.section_index for p in passages] == [0, 1, 2]
    assert passages[1] == Passage("a", 1, "second.")
    assert passages_of(kb, "a") == passages  # pure
    with pytest.raises(LookupError):
        passages_of(kb, "nope")


def test_passage_count_matches_sections(tmp_path):
    docs = [doc_record(f"d{i}", sections=["x."] * (i + 1)) for i in range(4)]
    kb = load_kb(write_kb_file(tmp_path / "kb.jsonl", docs))
    for doc_id, doc in kb.documents.items():
        assert len(passages_of(kb, doc_id)) == len(doc.sections)


def test_round_trip_inline(tmp_path):
    docs = [
        doc_record("a", sections=["alpha.", "beta."], summary="sum"),
        doc_record("b", embedding=[0.0, 1.0, 0.0, 0.0]),
        doc_record("c", embedding=None),
    ]
    kb = load_kb(write_kb_file(tmp_path / "kb.jsonl", docs))
    out = tmp_path / "kb2.jsonl"
    save_kb(kb, out)
    assert load_kb(out) == kb


def test_round_trip_sidecar(tmp_path):
    docs = [
        doc_record("a", embedding=[1.0, 0.0, 0.0, 0.0]),
        doc_record("b", embedding=[0.0, 0.0, 1.0, 0.0]),
    ]
    kb = load_kb(write_kb_file(tmp_path / "kb.jsonl", docs))
    out = tmp_path / "side.jsonl"
    save_kb(kb, out, embeddings="sidecar")
    assert sidecar_path(out).exists()
    reloaded = load_kb(out)
    assert reloaded == kb
    assert reloaded.source_manifest.embedding_storage == "sidecar"


def test_sidecar_inline_embedding_conflict(tmp_path):
    path = write_kb_file(
        tmp_path / "kb.jsonl", [doc_record("a")], manifest={"embeddings": "sidecar"}
    )
    vec = np.asarray([[1.0, 0.0, 0.0, 0.0]], dtype="<f4")
    vec.tofile(sidecar_path(path))
    with pytest.raises(KBLoadError, match="inline embedding present"):
        load_kb(path)


def test_sidecar_size_mismatch(tmp_path):
    path = write_kb_file(
        tmp_path / "kb.jsonl",
        [doc_record("a", embedding=None)],
        manifest={"embeddings": "sidecar"},
    )
    np.asarray([1.0, 0.0], dtype="<f4").tofile(sidecar_path(path))
    with pytest.raises(KBLoadError, match="sidecar"):
        load_kb(path)
