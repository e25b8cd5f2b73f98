"""Smoke test for the topicdpr extension module.

Build and install first:
    pip install --no-build-isolation -e crates/python
Then run:
    python python/smoke_test.py
"""

import math
import tempfile
from pathlib import Path

import topicdpr


def main() -> None:
    docs = topicdpr.synthetic_corpus(num_topics=3, docs_per_topic=12, seed=1)
    assert len(docs) == 36 and set(docs[0]) == {"id", "title", "abstract", "categories"}
    assert topicdpr.tokenize("Dense, Passage retrieval!") == ["dense", "passage", "retrieval"]

    model = topicdpr.TopicModel.fit(docs, iterations=30, seed=1)
    dist = model.doc_topic_distribution(docs[0]["id"])
    assert math.isclose(sum(dist.values()), 1.0, abs_tol=1e-9)
    assert all(p >= 0 for p in dist.values())
    level1 = model.prompt_topics(1)
    assert level1, "expected at least one level-1 topic"
    print(model.report(level=1, top=5).splitlines()[0])

    bm25 = topicdpr.Bm25([(d["id"], d["abstract"]) for d in docs])
    hits = bm25.search(docs[4]["abstract"], k=3)
    assert hits[0][0] == docs[4]["id"], hits

    index = topicdpr.DenseIndex(["a", "b", "c"], [[1.0, 0.0], [0.0, 1.0], [0.7, 0.7]])
    assert len(index) == 3
    assert [i for i, _ in index.search([1.0, 0.1], k=2)] == ["a", "c"]

    cats = {"q": ["x"], "p1": ["y"], "p2": ["x"]}
    m = topicdpr.compute_metrics({"q": ["p1", "p2"]}, cats, ks=[1, 2])
    assert m["acc"][1] == 0.0 and m["mrr"][2] == 0.5

    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        run = lambda *a: topicdpr.run_cli([str(x) for x in a])
        assert run("synth", "--out", root / "synth", "--num-topics", 3, "--docs-per-topic", 12, "--seed", 2) == 0
        assert run("ingest", "--out", root / "split", "--corpus", root / "synth" / "corpus.jsonl") == 0
        assert run("topics", "--out", root / "topics", "--corpus", root / "split" / "train.jsonl", "--iters", 20) == 0
        code = run(
            "train", "--out", root / "ckpt",
            "--train", root / "split" / "train.jsonl",
            "--topics", root / "topics" / "topics.json",
            "--mode", "topic_prompts", "--max-steps", 2,
            "--dim", 16, "--layers", 1, "--heads", 2, "--prompt-len", 2,
        )
        assert code == 0, code
        ckpt = topicdpr.Checkpoint.load(root / "ckpt")
        assert ckpt.mode == "topic_prompts" and ckpt.dim == 16
        vec = ckpt.encode(docs[0]["title"])
        assert len(vec) == 16 and all(math.isfinite(v) for v in vec)
        dev = topicdpr.load_corpus(root / "split" / "dev.jsonl")
        report = ckpt.evaluate(dev, ks=[1, 10])
        assert 0.0 <= report["mrr"][10] <= 1.0
        assert run("search", "--out", root / "nowhere") == 1

    try:
        topicdpr.Checkpoint.load("/nonexistent/checkpoint")
    except topicdpr.TopicDprError as e:
        print("expected error:", e)
    else:
        raise AssertionError("loading a missing checkpoint should fail")

    print("smoke test passed")


if __name__ == "__main__":
    main()
