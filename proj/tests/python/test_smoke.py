import math

import numpy as np
import pytest

import condenser as cd


def small_config(vocab, **overrides):
    cfg = {
        "early_layers": 1,
        "late_layers": 1,
        "head_layers": 1,
        "hidden_dim": 16,
        "num_heads": 2,
        "ffn_dim": 32,
        "vocab_size": vocab,
        "max_position": 32,
    }
    cfg.update(overrides)
    return cfg


@pytest.fixture(scope="module")
def data():
    return cd.make_synthetic_dataset(topics=4, passages_per_topic=4, documents_per_topic=2, train_pairs=16,
                                     explicit_negatives=3, seed=2)


@pytest.fixture(scope="module")
def vocab(data):
    return cd.Vocabulary.build(data["documents"])


def test_vocabulary_round_trip(tmp_path, vocab):
    ids = vocab.encode("t0w1 s3 never-seen", 8)
    assert vocab.token(ids[0]) == "[CLS]"
    assert vocab.token(ids[3]) == "[UNK]"
    assert vocab.decode(ids).split()[:2] == ["t0w1", "s3"]
    path = tmp_path / "vocab.txt"
    vocab.save(path)
    assert len(cd.Vocabulary.load(path)) == len(vocab)


def test_config_defaults_and_strict_keys(vocab):
    assert cd.default_model_config()["hidden_dim"] == 64
    with pytest.raises(cd.CondenserError):
        cd.Encoder({"hidden": 3})


def test_pretrain_reduce_and_checkpoint(tmp_path, data, vocab):
    model = cd.PretrainModel(small_config(len(vocab)), "condenser-full", seed=1)
    docs = cd.encode_corpus(data["documents"], vocab, 24)
    trainer = cd.Pretrainer(model, docs, {"micro_batch_size": 4, "peak_lr": 1e-3, "seed": 1})
    logs = trainer.run(max_steps=3)
    assert [s["step"] for s in logs] == [1, 2, 3]
    assert all(math.isclose(s["total"], s["head"] + s["backbone"]) for s in logs)

    trained = trainer.model()
    assert trained.parameter_count() > trained.reduce().parameter_count()
    path = tmp_path / "full.ckpt"
    trained.save(path, {"note": "smoke"})
    full = cd.PretrainModel.load(path)
    encoder = cd.Encoder.load(path)
    texts = [p[1] for p in data["passages"][:5]]
    assert np.array_equal(full.reduce().encode(vocab, texts), encoder.encode(vocab, texts))

    with pytest.raises(cd.FormatError):
        cd.Encoder.load(tmp_path / "missing.ckpt")


def test_resume_matches_uninterrupted(tmp_path, data, vocab):
    docs = cd.encode_corpus(data["documents"], vocab, 24)
    options = {"micro_batch_size": 4, "epochs": 1, "seed": 5}
    model = cd.PretrainModel(small_config(len(vocab)), "mlm-full", seed=5)
    straight = cd.Pretrainer(model, docs, options)
    straight.run()
    part = cd.Pretrainer(model, docs, options)
    part.run(max_steps=2)
    part.save_state(tmp_path / "state")
    resumed = cd.Pretrainer.resume(tmp_path / "state", docs)
    resumed.run()
    texts = data["documents"][:4]
    a = straight.model().reduce().encode(vocab, texts)
    b = resumed.model().reduce().encode(vocab, texts)
    assert np.array_equal(a, b)


def test_retrieval_pipeline(data, vocab):
    encoder = cd.Encoder(small_config(len(vocab), dropout_rate=0.0), seed=3)
    query_enc, passage_enc, losses = cd.finetune_retriever(
        encoder, vocab, data["train_pairs"], data["passages"],
        {"epochs": 2, "batch_size": 8, "peak_lr": 3e-3, "in_batch_negatives": False})
    assert passage_enc is None
    assert len(losses) == 4
    index = cd.DenseIndex.build(query_enc, vocab, data["passages"])
    assert len(index) == len(data["passages"])
    queries = data["test_queries"]
    vectors = query_enc.encode(vocab, [q[1] for q in queries])
    run = {q[0]: index.search(vectors[i], 10) for i, q in enumerate(queries)}
    assert all(len(hits) == 10 for hits in run.values())
    for metric in ("mrr@10", "recall@10", "ndcg@10", "top5"):
        value = cd.evaluate_run(run, data["test_qrels"], metric)
        assert 0.0 <= value <= 1.0


def test_index_from_vectors_and_ties():
    index = cd.DenseIndex(["b", "a", "c"], np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]))
    assert index.search([1.0, 0.0], 2) == [("a", 1.0), ("b", 1.0)]
    with pytest.raises(cd.ShapeError):
        index.search([1.0, 0.0, 0.0], 1)


def test_metric_examples():
    assert cd.mrr_at_k(["a", "b", "c"], {"c"}, 10) == pytest.approx(1 / 3)
    assert cd.ndcg_at_k(["b", "a"], {"a"}, 10) == pytest.approx(math.log(2) / math.log(3))
    assert cd.spearman([1, 2, 3, 4], [1, 3, 2, 4]) == 0.8
    assert cd.contrastive_nll(0.0, [0.0, 0.0]) == pytest.approx(math.log(3))


def test_other_objectives_and_attention(data, vocab):
    encoder = cd.Encoder(small_config(len(vocab)), seed=4)
    sts, losses = cd.finetune_regression(encoder, vocab, data["scored_pairs"], {"epochs": 1})
    assert len(losses) > 0
    tri, _ = cd.finetune_triplet(encoder, vocab, data["triplets"], {"epochs": 1})
    acc = cd.pairwise_accuracy(tri, vocab, data["triplets"])
    assert 0.0 <= acc <= 1.0
    profile = cd.cls_attention_entropy(encoder, vocab, data["documents"], max_samples=16, tag="x")
    assert profile["samples"] == 16
    assert len(profile["mean"]) == 2
    assert all(0.0 <= v <= math.log(32) for v in profile["mean"])
    assert cd.entropy([0.25] * 4) == pytest.approx(math.log(4))
