from collections import Counter

import numpy as np
import pytest

from ahnpl import synthetic as syn

VOCAB = syn.SceneVocab()


def test_scene_generation_determinism_and_constraint():
    a = [syn.generate_scene(np.random.default_rng(3)) for _ in range(2)]
    assert a[0] == a[1]
    r = np.random.default_rng(0)
    scenes = [syn.generate_scene(r) for _ in range(10_000)]
    assert all(s.subject != s.object for s in scenes)
    assert Counter(s.relation for s in scenes).keys() == set(range(VOCAB.n_relations))
    assert Counter(s.subject[0] for s in scenes).keys() == set(range(VOCAB.n_objects))
    with pytest.raises(ValueError):
        syn.Scene((1, 2), 0, (1, 2))


def test_caption_rendering_and_parse_round_trip(rng):
    s = syn.Scene((0, 1), 2, (3, 4))
    cap = syn.render_caption(s)
    assert cap == syn.render_caption(s)
    assert cap.tags == syn.TEMPLATE_TAGS
    for _ in range(200):
        s = syn.generate_scene(rng)
        assert syn.parse_caption(syn.render_tokens(s)) == s


def test_features_one_hot_and_noise(rng):
    s, t = syn.Scene((0, 1), 2, (3, 4)), syn.Scene((3, 1), 2, (0, 4))
    x = syn.render_image_features(s, 0.0, rng)
    assert x.shape == (VOCAB.feature_dim,)
    assert sorted(np.unique(x)) == [0.0, 1.0] and x.sum() == 5
    assert np.count_nonzero(x != syn.render_image_features(t, 0.0, rng)) >= 2
    noise = np.concatenate([syn.render_image_features(s, 0.3, rng) - x for _ in range(2000)])
    assert abs(noise.mean()) < 0.01
    assert abs(noise.std() - 0.3) < 0.01


def test_benchmark_and_training_scenes_are_disjoint(rng):
    pairs = syn.generate_pairs(300, rng)
    items = syn.build_benchmark(60, rng)
    assert not {p.scene.key() for p in pairs} & {it.scene.key() for it in items}
    assert [p.id for p in pairs[:2]] == ["train00000", "train00001"]


def test_benchmark_edits(rng):
    items = syn.build_benchmark(600, rng)
    counts = Counter(it.category for it in items)
    assert set(counts) == set(syn.CATEGORIES)
    assert max(counts.values()) - min(counts.values()) <= 1
    for it in items:
        pos, neg = it.positive.tokens, it.negative.tokens
        assert pos != neg
        if it.category == "ADD_ATT":
            assert len(neg) == len(pos) + 1
            continue
        diff = [i for i, (a, b) in enumerate(zip(pos, neg)) if a != b]
        if it.category == "SWAP_OBJ":
            assert diff == [2, 6]
        elif it.category == "SWAP_ATT":
            assert diff == [1, 5]
        else:
            assert len(diff) == 1


def test_benchmark_file_round_trip(tmp_path, rng):
    items = syn.build_benchmark(30, rng)
    syn.write_benchmark(tmp_path / "b.tsv", items)
    back = syn.read_benchmark(tmp_path / "b.tsv", VOCAB.lexicon())
    assert [(b.id, b.category, b.positive, b.negative) for b in back] == [(a.id, a.category, a.positive, a.negative) for a in items]
    for a, b in zip(items, back):
        np.testing.assert_array_equal(a.features, b.features)


def test_vocab_bounds():
    with pytest.raises(ValueError):
        syn.SceneVocab(n_objects=2)
    assert syn.DataConfig(n_objects=5).vocab.n_objects == 5
