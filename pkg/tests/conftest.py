import json
from dataclasses import dataclass
from pathlib import Path

import pytest

DATA_DIR = Path(__file__).parent / "data"
GOLDEN_DIR = Path(__file__).parent / "golden"


@dataclass(frozen=True)
class SyntheticFiles:
    kb: Path
    index: Path
    dataset: Path
    expectations: Path
    out: Path


@pytest.fixture(scope="session")
def synthetic_files(tmp_path_factory) -> SyntheticFiles:
    """Small synthetic corpus serialized to disk for CLI-level tests."""
    from reflectrag.index import RetrievalMode, build_index, save_index
    from reflectrag.kb import save_kb
    from reflectrag.samples import save_samples
    from reflectrag.synth import make_synthetic_suite

    root = tmp_path_factory.mktemp("synthetic")
    suite = make_synthetic_suite(
        num_docs=18,
        num_fact_samples=10,
        num_noret_samples=4,
        num_miss_samples=1,
        seed=17,
    )
    kb_path = save_kb(suite.kb, root / "kb.jsonl")
    index_path = save_index(
        build_index(suite.kb, RetrievalMode.VISUAL), root / "index.jsonl"
    )
    dataset_path = save_samples(suite.samples, root / "dataset.jsonl")
    expectations = root / "expectations.jsonl"
    lines = []
    for sample in suite.samples:
        expected = "<RET>" if sample.gold_doc_id is not None else "<NORET>"
        lines.append(json.dumps({"id": sample.id, "expected_decision": expected}))
    expectations.write_text("\n".join(lines) + "\n")
    return SyntheticFiles(
        kb=kb_path,
        index=index_path,
        dataset=dataset_path,
        expectations=expectations,
        out=root / "out",
    )


@pytest.fixture(scope="session")
def data_dir() -> Path:
    return DATA_DIR


@pytest.fixture(scope="session")
def golden_dir() -> Path:
    return GOLDEN_DIR


def write_kb_file(path: Path, docs: list[dict], dim: int = 4, manifest: dict | None = None) -> Path:
    header = {"manifest": True, "embedding_dim": dim, "count": len(docs)}
    if manifest:
        header.update(manifest)
    lines = [json.dumps(header)] + [json.dumps(d) for d in docs]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def doc_record(
    doc_id: str,
    title: str | None = None,
    sections: list[str] | None = None,
    embedding: list[float] | None = (1.0, 0.0, 0.0, 0.0),
    summary: str = "",
) -> dict:
    return {
        "id": doc_id,
        "title": title or doc_id.title(),
        "summary": summary,
        "sections": [
            {"title": f"S{i}", "text": text}
            for i, text in enumerate(sections if sections is not None else ["Body text."])
        ],
        "image_embedding": None if embedding is None else list(embedding),
    }


@pytest.fixture()
def plant_kb_path(data_dir) -> Path:
    return data_dir / "plant_kb.jsonl"


@pytest.fixture()
def plant_samples_path(data_dir) -> Path:
    return data_dir / "plant_samples.jsonl"


@pytest.fixture()
def plant_scripts_path(data_dir) -> Path:
    return data_dir / "plant_scripts.json"
