import json
import zlib

import numpy as np
import pytest

from conftest import SMALL, random_cloud
from oracles import central_difference, relative_error
from skelprompt import autodiff as ad
from skelprompt.autodiff import ParamStore
from skelprompt.errors import PromptError, ShapeError
from skelprompt.extractor import encode_batch, init_extractor
from skelprompt.text_alignment import (
    ProjectionHead,
    PromptSet,
    TextConfig,
    embed_prompts_builtin,
    hash_token,
    init_projection,
    init_text_encoder,
    load_prompt_embeddings,
    project_feature,
    project_rows,
    save_prompt_embeddings,
    tokenize_text,
)

CFG = TextConfig(hash_size=256, embed_dim=6, proj_hidden=5)


@pytest.fixture
def text_store():
    store = ParamStore()
    init_text_encoder(store, CFG, np.random.default_rng(3))
    init_projection(store, SMALL.feature_dim, CFG, np.random.default_rng(4))
    return store


def test_tokenizer_lowercases_and_splits():
    assert tokenize_text("Punch, Kick!") == ["punch", "kick"]
    assert tokenize_text("a_b-c 42") == ["a", "b", "c", "42"]
    assert tokenize_text("  ,; ") == []


def test_hash_is_crc32_mod_size():
    assert hash_token("fight", 256) == zlib.crc32(b"fight") % 256


def test_identical_prompts_identical_embeddings(text_store):
    ps = embed_prompts_builtin(["fighting", "fighting"], text_store, CFG)
    assert np.array_equal(ps.embeddings[0], ps.embeddings[1])


def test_punctuation_and_case_do_not_matter(text_store):
    ps = embed_prompts_builtin(["Punch, Kick", "punch kick"], text_store, CFG)
    assert np.array_equal(ps.embeddings[0], ps.embeddings[1])


def test_single_token_is_table_row_through_affine(text_store):
    row = text_store["text.table"].data[hash_token("wave", CFG.hash_size)]
    expected = text_store["text.W"].data @ row + text_store["text.b"].data[0]
    got = embed_prompts_builtin(["wave"], text_store, CFG).embeddings[0]
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-12)


def test_multi_token_prompt_is_mean_of_rows(text_store):
    table = text_store["text.table"].data
    mean = (table[hash_token("shake", 256)] + table[hash_token("hands", 256)]) / 2
    expected = text_store["text.W"].data @ mean + text_store["text.b"].data[0]
    got = embed_prompts_builtin(["shake hands"], text_store, CFG).embeddings[0]
    np.testing.assert_allclose(got, expected, atol=1e-12)


def test_empty_prompt_names_prompt(text_store):
    with pytest.raises(PromptError, match="'!!'"):
        embed_prompts_builtin(["ok", "!!"], text_store, CFG)


def test_prompt_set_invariants():
    with pytest.raises(PromptError):
        PromptSet((), np.zeros((0, 3)))
    with pytest.raises(PromptError):
        PromptSet(("a",), np.zeros((2, 3)))
    with pytest.raises(PromptError):
        PromptSet(("a",), np.zeros((1, 3)), mode="weird")
    ps = PromptSet(("a",), np.ones((1, 3)))
    assert ps.dim == 3 and ps.with_mode("normal").mode == "normal"


# -- embedding files ---------------------------------------------------------------


def _write(path, doc):
    path.write_text(json.dumps(doc))
    return path


def test_load_two_prompts(tmp_path):
    doc = {"mode": "normal", "dim": 64,
           "prompts": [{"text": "walk", "embedding": [0.1] * 64}, {"text": "talk", "embedding": [0.2] * 64}]}
    ps = load_prompt_embeddings(_write(tmp_path / "p.json", doc))
    assert len(ps.prompts) == 2 and ps.dim == 64 and ps.mode == "normal"


def test_mixed_dims_rejected(tmp_path):
    doc = {"prompts": [{"text": "a", "embedding": [0.0] * 64}, {"text": "b", "embedding": [0.0] * 32}]}
    with pytest.raises(PromptError, match="inconsistent"):
        load_prompt_embeddings(_write(tmp_path / "p.json", doc))


def test_empty_list_rejected(tmp_path):
    with pytest.raises(PromptError, match="empty"):
        load_prompt_embeddings(_write(tmp_path / "p.json", {"mode": "abnormal", "prompts": []}))


def test_header_dim_must_match(tmp_path):
    doc = {"dim": 4, "prompts": [{"text": "a", "embedding": [0.0, 1.0]}]}
    with pytest.raises(PromptError, match="header"):
        load_prompt_embeddings(_write(tmp_path / "p.json", doc))


def test_not_json_rejected(tmp_path):
    path = tmp_path / "p.json"
    path.write_text("{{")
    with pytest.raises(PromptError):
        load_prompt_embeddings(path)


def test_embedding_file_round_trip(tmp_path, text_store):
    ps = embed_prompts_builtin(["fight", "punch kick"], text_store, CFG, mode="abnormal")
    save_prompt_embeddings(ps, tmp_path / "p.json")
    back = load_prompt_embeddings(tmp_path / "p.json")
    assert back.prompts == ps.prompts and back.mode == "abnormal"
    assert np.array_equal(back.embeddings, ps.embeddings)


# -- projection --------------------------------------------------------------------


def test_projection_output_length(text_store, rng):
    assert project_feature(rng.normal(size=SMALL.feature_dim), text_store).shape == (CFG.embed_dim,)
    head = ProjectionHead(text_store)
    assert head.input_dim == SMALL.feature_dim and head.output_dim == CFG.embed_dim
    assert head(rng.normal(size=(3, SMALL.feature_dim))).shape == (3, CFG.embed_dim)


def test_projection_zero_weights(rng):
    store = ParamStore()
    init_projection(store, 5, CFG, rng)
    for p in store.values():
        p.data[...] = 0.0
    np.testing.assert_array_equal(project_feature(rng.normal(size=5), store), 0.0)


def test_projection_matches_oracle(text_store, rng):
    x = rng.normal(size=SMALL.feature_dim)
    s = {k: p.data for k, p in text_store.items()}
    hidden = np.maximum(s["proj.W1"] @ x + s["proj.b1"][0], 0.0)
    expected = s["proj.W2"] @ hidden + s["proj.b2"][0]
    np.testing.assert_allclose(project_feature(x, text_store), expected, rtol=0, atol=1e-10)


def test_projection_dimension_mismatch(text_store):
    with pytest.raises(ShapeError):
        project_feature(np.zeros(SMALL.feature_dim + 1), text_store)


def test_projection_differentiable_through_extractor(rng):
    store = ParamStore()
    init_extractor(store, SMALL, rng)
    init_projection(store, SMALL.feature_dim, CFG, rng)
    clouds = [random_cloud(rng, 2, 6), random_cloud(rng, 2, 6)]
    w = rng.normal(size=(2, CFG.embed_dim))

    def loss():
        return ad.sum_all(ad.mul(project_rows(encode_batch(clouds, store, SMALL), store), ad.constant(w)))

    ad.backpropagate(loss())
    for name in ("extractor.stem.W", "proj.W1", "proj.b2"):
        p = store[name]
        saved = p.data.copy()

        def f(x):
            p.data[...] = x
            with ad.no_grad():
                value = loss().item()
            p.data[...] = saved
            return value

        assert relative_error(p.grad, central_difference(f, saved, 1e-5)) <= 1e-4, name
