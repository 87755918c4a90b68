import json
from collections import Counter

import numpy as np
import pytest

from cmadm import data as D
from cmadm.errors import CorruptArtifactError
from cmadm.vocab import MAX_CONTENT, PAD, STORED_LENGTH, UNK, Caption, Vocabulary, decode_caption, encode_caption


def test_catalog_sizes():
    assert len(D.CATEGORIES) >= 12 and len(D.ATTRIBUTES) >= 6 and len(D.RELATIONS) >= 4


def test_corpus_shapes_and_bounds():
    for it in D.generate_corpus(200, 7):
        k = len(it.scene.objects)
        assert 2 <= k <= 5
        assert it.features.shape == (k + D.DISTRACTORS, D.FEATURE_DIM)
        assert 4 <= it.features.shape[0] <= 7
        assert len(it.refs) == 5 and len(set(it.refs)) == 5
        assert all(len(r.split()) <= MAX_CONTENT for r in it.refs)
        cells = [o.position for o in it.scene.objects]
        assert len(set(cells)) == k


def test_same_seed_identical():
    a, b = D.generate_corpus(20, 3), D.generate_corpus(20, 3)
    assert D.corpus_lines(a) == D.corpus_lines(b)


def test_index_independent_regeneration():
    full = D.generate_corpus(30, 5)
    alone = D.make_item(17, 5)
    assert np.array_equal(full[17].features, alone.features)
    assert full[17].refs == alone.refs
    tail = D.generate_corpus(5, 5, start=25)
    assert D.corpus_lines(tail) == D.corpus_lines(full[25:])


def test_different_seeds_differ():
    # object multisets of the same index under two seeds
    collisions = 0
    for i in range(1000):
        a = Counter((o.category, o.attribute) for o in D.make_scene(i, 1).objects)
        b = Counter((o.category, o.attribute) for o in D.make_scene(i, 2).objects)
        collisions += a == b
    assert 1 - collisions / 1000 > 0.99


def test_references_invert_to_scene():
    for it in D.generate_corpus(100, 11):
        o = it.scene.objects
        want = [(o[0].category, o[0].attribute), (o[1].category, o[1].attribute)]
        for r in it.refs:
            parsed = D.parse_reference(r)
            assert parsed is not None, r
            assert parsed["objects"] == want
            if "relation" in parsed:
                assert parsed["relation"] == it.scene.relation()
            if "count" in parsed:
                assert parsed["count"] == len(o)
    assert D.parse_reference("a purple llama") is None


def test_confusable_pair_overlap():
    cats, *_ = D._embedding_tables(7, D.FEATURE_DIM)
    i, j = (D.CATEGORIES.index(c) for c in D.CONFUSABLE)
    assert cats[i] @ cats[j] == pytest.approx(D.CONFUSABLE_OVERLAP, abs=1e-12)


def test_linear_probe_category_separability():
    # least-squares one-vs-rest probe on frozen object-region features
    def regions(start, n):
        X, y = [], []
        for i in range(start, start + n):
            scene = D.make_scene(i, 7)
            feats, ranks = D.scene_regions(scene, i, 7)
            for row, rank in zip(feats, ranks):
                if rank >= 0:
                    X.append(row)
                    y.append(scene.objects[rank].category)
        return np.hstack([np.array(X), np.ones((len(X), 1))]), np.array(y)

    Xtr, ytr = regions(0, 400)
    Xte, yte = regions(400, 100)
    W, *_ = np.linalg.lstsq(Xtr, np.eye(len(D.CATEGORIES))[ytr], rcond=None)
    assert (np.argmax(Xte @ W, axis=1) == yte).mean() > 0.9


def test_regions_match_features():
    scene = D.make_scene(3, 7)
    feats, ranks = D.scene_regions(scene, 3, 7)
    assert np.array_equal(feats, D.make_item(3, 7).features)
    assert sorted(ranks.tolist()) == [-1, -1] + list(range(len(scene.objects)))


def test_vocabulary_threshold():
    texts = ["kept"] * 6 + ["dropped"] * 5
    v = Vocabulary.build(texts)
    assert "kept" in v.words and "dropped" not in v.words
    assert v.index("dropped") == v.unk_index
    assert v.pad_index == 0 and v.word(0) == PAD and v.word(1) == UNK
    assert v.index("kept") not in (v.pad_index, v.unk_index)


def test_encode_caption_padding_and_truncation():
    words = [f"w{i}" for i in range(20)]
    v = Vocabulary(words)
    c = encode_caption(" ".join(words), v)
    assert len(c.tokens) == STORED_LENGTH and len(c) == MAX_CONTENT
    assert decode_caption(c, v) == " ".join(words[:16])
    short = encode_caption("w0 w1 w2", v)
    assert short.tokens[0] == 0 and short.tokens[-1] == 0
    assert short.tokens[1:4] == (v.index("w0"), v.index("w1"), v.index("w2"))
    assert short.tokens[4:] == (0,) * 14


def test_round_trip_on_corpus():
    items = D.generate_corpus(100, 7)
    v = D.build_vocabulary(it.refs for it in items)
    for it in items[:20]:
        for r in it.refs:
            assert decode_caption(encode_caption(r, v), v) == r


def test_caption_rejects_bad_boundaries():
    with pytest.raises(ValueError):
        Caption((1,) + (0,) * 17)
    with pytest.raises(ValueError):
        Caption((0,) * 17)


def test_corpus_io_round_trip(tmp_path):
    items = D.generate_corpus(15, 2)
    p = tmp_path / "c.jsonl"
    D.write_corpus(p, items)
    back = D.read_corpus(p)
    assert [b.id for b in back] == [it.id for it in items]
    assert all(np.array_equal(b.features, it.features) for b, it in zip(back, items))
    assert D.fingerprint(p) == D.fingerprint(p)


@pytest.mark.parametrize("rec", [
    {"id": "x", "features": [[0.0] * 32], "refs": ["a"] * 4},
    {"id": "x", "features": [], "refs": ["a"] * 5},
    {"id": "x", "features": [[0.0] * 31], "refs": ["a"] * 5},
    {"features": [[0.0] * 32], "refs": ["a"] * 5},
])
def test_corpus_reader_validates(tmp_path, rec):
    p = tmp_path / "bad.jsonl"
    good = {"id": "g", "features": [[0.0] * 32], "refs": ["a"] * 5}
    p.write_text(json.dumps(good) + "\n" + json.dumps(rec) + "\n")
    with pytest.raises(CorruptArtifactError, match=":2:"):
        D.read_corpus(p)


def test_generate_rejects_empty():
    with pytest.raises(ValueError):
        D.generate_corpus(0, 1)
