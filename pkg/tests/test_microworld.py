import os
import re

import numpy as np
import pytest

from ssrcap.microworld import (
    DatasetFormatError,
    MicroWorld,
    NoiseSpec,
    WorldError,
    extract_concepts,
    generate_dataset,
    generate_lm_corpus,
    generate_world,
    pivot_caption,
    pseudo_translate,
    read_dataset,
    read_split,
    truncate_caption,
    write_dataset,
    write_split,
)
from ssrcap.vocab import build_vocab

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


@pytest.fixture(scope="module")
def world():
    return generate_world(seed=3)


@pytest.fixture(scope="module")
def data(world):
    return generate_dataset(world, (1000, 50, 50))


def test_world_shape(world):
    assert len(world.concepts) == 40
    assert [len(world.by_role[r]) for r in ("obj", "act", "scene")] == [24, 8, 8]
    assert len(world.templates) == 12
    norms = np.linalg.norm(world.prototypes, axis=1)
    np.testing.assert_allclose(norms, 1.0)
    assert len({c.target for c in world.concepts}) == 40


def test_world_is_deterministic_and_json_roundtrips(world):
    again = generate_world(seed=3)
    np.testing.assert_array_equal(again.prototypes, world.prototypes)
    back = MicroWorld.from_json(world.to_json())
    assert back.dictionary == world.dictionary and back.templates == world.templates


def test_noise_validation():
    with pytest.raises(WorldError):
        NoiseSpec(1.5, 0.0)
    with pytest.raises(WorldError):
        NoiseSpec(0.1, 0.1, 0.5, 0.5, 0.5)


def test_bulk_pair_invariants(world, data):
    train, val, test = data
    assert len(train) == 1000
    for k, p in enumerate(train):
        assert p.image.image_id == f"train-{k:05d}"
        assert p.image.feature.shape == (world.feat_dim,)
        assert p.concepts == extract_concepts(p.target, world.target_tags)
        assert set(p.image.concepts) <= set(world.target_to_concept)
        assert p.references is None
        if not p.disfluent and not p.irrelevant:
            assert p.target == world.translate_clean(p.pivot)
    for p in val + test:
        assert p.references and p.references[0]
        assert all(set(p.image.concepts) <= set(r) for r in p.references)


def test_noise_rates_roughly_hold(data):
    train = data[0]
    assert abs(np.mean([p.disfluent for p in train]) - 0.3) < 0.05
    assert abs(np.mean([p.irrelevant for p in train]) - 0.3) < 0.05


def test_zero_noise_is_the_clean_translation(world):
    clean = NoiseSpec(0.0, 0.0)
    rng = np.random.default_rng(0)
    for k in range(50):
        img = generate_dataset(world, (1, 1, 1))[0][0].image
        piv, slots = pivot_caption(world, img, rng)
        out, dis, irr = pseudo_translate(piv, world, clean, rng, slots, img.concepts)
        assert out == world.translate_clean(piv) and not dis and not irr


def test_full_irrelevancy_swaps_one_concept_for_an_absent_same_role_one(world, data):
    rng = np.random.default_rng(1)
    noise = NoiseSpec(0.0, 1.0)
    for p in data[0][:100]:
        piv = p.pivot
        slots = [k for k, t in enumerate(world.translate_clean(piv)) if t in world.target_to_concept]
        out, _, irr = pseudo_translate(piv, world, noise, rng, slots, p.image.concepts)
        clean = world.translate_clean(piv)
        diff = [k for k in range(len(out)) if out[k] != clean[k]]
        assert irr and len(diff) == 1
        old, new = world.target_to_concept[clean[diff[0]]], world.target_to_concept[out[diff[0]]]
        assert old.role == new.role and new.target not in p.image.concepts


def swap_oracle(clean, seed):
    """Independent replay of a swap-only disfluency: six uniforms, the last picks the pair."""
    u = np.random.default_rng(seed).random(6)
    out = list(clean)
    i = int(u[5] * (len(out) - 1))
    out[i], out[i + 1] = out[i + 1], out[i]
    return out


def test_swap_only_disfluency_matches_reimplementation(world, data):
    noise = NoiseSpec(1.0, 0.0, 1.0, 0.0, 0.0)
    for k, p in enumerate(data[0][:100]):
        out, dis, irr = pseudo_translate(p.pivot, world, noise, np.random.default_rng(k))
        clean = world.translate_clean(p.pivot)
        assert dis and not irr
        assert out == swap_oracle(clean, k)
        assert sorted(out) == sorted(clean)


def test_vocab_threshold_on_corpus(world):
    corpus = generate_lm_corpus(world, 300)
    v = build_vocab(corpus, threshold=4)
    from collections import Counter

    counts = Counter(t for s in corpus for t in s)
    assert set(v.itos[4:]) == {t for t, c in counts.items() if c > 4}


def test_truncate_and_extract(world):
    assert truncate_caption(list("abcdef"), 4) == list("abcd")
    obj = world.by_role["obj"][0].target
    act = world.by_role["act"][0].target
    func = world.dictionary["the"]
    assert extract_concepts([func, obj, act], world.target_tags) == [obj, act]
    with pytest.raises(KeyError):
        extract_concepts(["zzz"], world.target_tags)
    assert extract_concepts(["zzz", obj], world.target_tags, strict=False) == [obj]


def test_extracted_concepts_equal_slot_fillers_on_clean_captions(world):
    train = generate_dataset(generate_world(seed=3, noise=NoiseSpec(0.0, 0.0)), (100, 1, 1))[0]
    for p in train:
        assert sorted(p.concepts) == sorted(p.image.concepts)


def test_dataset_roundtrip(tmp_path, world):
    splits = generate_dataset(world, (20, 5, 5))
    write_dataset(tmp_path, world, splits, generate_lm_corpus(world, 10))
    w2, (tr, va, te), lm = read_dataset(tmp_path)
    assert w2.dictionary == world.dictionary and len(lm) == 10
    for a, b in zip(splits[1], va):
        assert a.target == b.target and a.references == b.references
        np.testing.assert_array_equal(a.image.feature, b.image.feature)


def test_hand_written_fixture_parses():
    pairs = read_split(os.path.join(FIXTURES, "three_records.jsonl"))
    assert [p.image.image_id for p in pairs] == ["train-00000", "train-00001", "val-00000"]
    assert pairs[1].disfluent and not pairs[1].irrelevant
    assert pairs[2].irrelevant and pairs[2].image.concepts == ["biru"]
    assert pairs[2].references == [["ka", "biru"], ["ti", "biru"]]
    assert pairs[0].references is None
    np.testing.assert_array_equal(pairs[0].image.feature, [0.5, -1.0, 0.25])


def test_malformed_line_names_the_line(tmp_path):
    src = open(os.path.join(FIXTURES, "three_records.jsonl")).read().splitlines()
    src.insert(1, '{"image_id": "x"}')
    p = tmp_path / "bad.jsonl"
    p.write_text("\n".join(src) + "\n")
    with pytest.raises(DatasetFormatError, match=re.escape("line 2")):
        read_split(p)
    p.write_text(src[0] + "\n" + src[0].replace("0.25]", "0.25, 9.0]") + "\n")
    with pytest.raises(DatasetFormatError, match="feature dim"):
        read_split(p)
