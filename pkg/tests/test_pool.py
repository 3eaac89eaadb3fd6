import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from posgen import pool as poolmod
from posgen.embedder import HashedNgramEmbedder, TableEmbedder

EMB = HashedNgramEmbedder()
WORDS = ["blob", "dog", "moves", "runs", "left", "right", "quickly", "slowly", "red", "small", "market"]


def random_text(rng: random.Random) -> str:
    return " ".join(rng.choice(WORDS) for _ in range(rng.randint(1, 4)))


def oracle_ranking(prompt, entries, embedder=EMB):
    # exhaustive scan: exact dot products at the pool's resolution, then sort by (-similarity, id)
    q = embedder.embed(prompt)
    scored = [(-np.round(math.fsum(q * e.embedding), poolmod.SIM_DECIMALS), e.id, e) for e in entries]
    return [e for _, _, e in sorted(scored, key=lambda s: (s[0], s[1]))]


def random_pool(seed, n, shape=(2, 1, 2, 2)):
    rng = random.Random(seed)
    texts = [random_text(rng) for _ in range(n)]
    ids = [f"e{rng.randrange(10**6):06d}" for _ in range(n)]
    while len(set(ids)) < n:
        ids = [f"e{rng.randrange(10**6):06d}" for _ in range(n)]
    latents = np.random.default_rng(seed).standard_normal((n, *shape))
    return poolmod.build(zip(texts, latents), EMB, ids=ids), rng


def test_single_entry_pool_answers_every_query():
    pool = poolmod.build([("only one", np.zeros((2, 2)))])
    assert pool.N == 1
    for prompt in ("only one", "something else entirely"):
        assert pool.retrieve_video(prompt).text == "only one"


def test_hundred_entries_get_distinct_ids():
    pool = poolmod.build((f"text {i}", np.zeros(3)) for i in range(100))
    assert len(pool) == 100
    assert len({e.id for e in pool.entries}) == 100


def test_exact_text_match_is_retrieved():
    pool, _ = random_pool(0, 50)
    target = pool.entries[17]
    hit = pool.retrieve_video(target.text)
    assert hit.text == target.text
    assert float(hit.embedding @ EMB.embed(target.text)) == pytest.approx(1.0)


def test_identical_texts_tie_to_smallest_id():
    pairs = [("blob moves right", np.zeros(2)), ("blob moves right", np.ones(2)), ("dog", np.zeros(2))]
    pool = poolmod.build(pairs, ids=["b", "a", "c"])
    assert pool.retrieve_video("blob moves right").id == "a"
    assert pool.retrieve_references("blob moves right", 2) == ["blob moves right", "blob moves right"]
    assert [e.id for e in pool.ranked("blob moves right", 3)] == ["a", "b", "c"]


def test_equal_cosines_from_different_vectors_tie():
    # both captions have the same exact cosine with the prompt, but a plain
    # vectorised dot product rounds the two sums apart
    prompt = "right blob blob left"
    texts = ["right right small", "left quickly market right"]
    q = EMB.embed(prompt)
    a, b = (EMB.embed(t) for t in texts)
    assert math.fsum(a * q) == math.fsum(b * q) and np.sum(a * q) != np.sum(b * q)
    pool = poolmod.build([(t, np.zeros(2)) for t in texts], ids=["z", "a"])
    assert pool.retrieve_video(prompt).id == "a"
    pool = poolmod.build([(t, np.zeros(2)) for t in texts], ids=["a", "z"])
    assert pool.retrieve_video(prompt).id == "a"


@pytest.mark.parametrize("seed", range(10))
def test_retrieval_matches_exhaustive_oracle(seed):
    pool, rng = random_pool(seed, 50)
    for _ in range(10):
        prompt = random_text(rng)
        ranking = oracle_ranking(prompt, pool.entries)
        assert pool.retrieve_video(prompt).id == ranking[0].id
        assert pool.retrieve_references(prompt, 5) == [e.text for e in ranking[:5]]


def test_reference_count_edges():
    pool, _ = random_pool(1, 20)
    assert pool.retrieve_references("blob", 0) == []
    everything = pool.ranked("blob", pool.N)
    assert [e.id for e in everything] == [e.id for e in oracle_ranking("blob", pool.entries)]
    with pytest.raises(ValueError):
        pool.retrieve_references("blob", pool.N + 1)
    with pytest.raises(ValueError):
        pool.retrieve_references("blob", -1)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), perm_seed=st.integers(0, 10_000))
def test_results_do_not_depend_on_entry_order(seed, perm_seed):
    pool, rng = random_pool(seed, 30)
    shuffled = list(pool.entries)
    random.Random(perm_seed).shuffle(shuffled)
    other = poolmod.Pool(shuffled, EMB)
    prompt = random_text(rng)
    assert pool.retrieve_video(prompt).id == other.retrieve_video(prompt).id
    assert [e.id for e in pool.ranked(prompt, 7)] == [e.id for e in other.ranked(prompt, 7)]
    # top-1 agrees with the head of the reference list
    assert pool.retrieve_video(prompt).text == pool.retrieve_references(prompt, 1)[0]


def test_build_preconditions():
    with pytest.raises(ValueError):
        poolmod.build([])
    with pytest.raises(ValueError):
        poolmod.build([("a", np.zeros(2)), ("b", np.zeros(3))])
    with pytest.raises(ValueError):
        poolmod.build([("a", np.zeros(2)), ("b", np.zeros(2))], ids=["x", "x"])
    with pytest.raises(ValueError):
        poolmod.build([("a", np.full(2, np.nan))])


def test_pool_round_trip_is_bit_exact(tmp_path):
    pool, _ = random_pool(2, 40)
    pool.save(tmp_path / "p")
    back = poolmod.load(tmp_path / "p")
    assert [(e.id, e.text) for e in back.entries] == [(e.id, e.text) for e in pool.entries]
    for a, b in zip(pool.entries, back.entries):
        assert a.latent.tobytes() == b.latent.tobytes()
        assert np.array_equal(a.embedding, b.embedding)
    assert back.embedder.tag == pool.embedder.tag


def test_table_embedder_pool_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    vectors = {f"caption {i}": rng.standard_normal(5) for i in range(6)}
    emb = TableEmbedder({k: v / np.linalg.norm(v) for k, v in vectors.items()}, tag="table:test")
    pool = poolmod.build(((t, rng.standard_normal(4)) for t in vectors), emb)
    pool.save(tmp_path / "p")
    back = poolmod.load(tmp_path / "p")
    for a, b in zip(pool.entries, back.entries):
        assert np.array_equal(a.embedding, b.embedding)
        assert np.array_equal(a.latent, b.latent)


def test_loading_with_a_different_embedder_fails(tmp_path):
    pool, _ = random_pool(4, 5)
    pool.save(tmp_path / "p")
    with pytest.raises(ValueError):
        poolmod.load(tmp_path / "p", HashedNgramEmbedder(dims=64))


def test_subsample_is_uniform_seeded_and_ordered():
    items = list(range(100))
    a, b = poolmod.subsample(items, 10, 5), poolmod.subsample(items, 10, 5)
    assert a == b and len(a) == 10 and a == sorted(a)
    assert poolmod.subsample(items, 10, 6) != a
    assert poolmod.subsample(items, 500, 0) == items
