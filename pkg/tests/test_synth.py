import numpy as np
import pytest

from cascade_prune.aggregate import AttentionTrace
from cascade_prune.engine import ModelSpec, generate
from cascade_prune.errors import ConstructionError
from cascade_prune.pruner import make_directive, rank_tokens
from cascade_prune.synth import (PlantedRecipe, Vocab, build_planted_pair, dataset_for,
                                 default_specs, gen_needle_dataset, heatmap_matrix, load_dataset,
                                 measure_concentration, planted_heads, save_dataset)


def decode_layout(inst, n_symbols=8, n_fillers=4):
    """Read the answer straight off the token ids, without the Vocab helpers."""
    rows, cols = inst.grid
    n_cells = rows * cols
    ids = inst.layout.token_ids
    query_token = ids[-1]
    cell = query_token - 1 - n_symbols
    assert 0 <= cell < n_cells
    symbol_token = ids[cell]
    assert 1 <= symbol_token <= n_symbols
    return cell, symbol_token


def test_dataset_determinism():
    a = gen_needle_dataset((8, 8), 20, seed=4, difficulty=3)
    b = gen_needle_dataset((8, 8), 20, seed=4, difficulty=3)
    assert [x.to_dict() for x in a] == [x.to_dict() for x in b]
    c = gen_needle_dataset((8, 8), 20, seed=5, difficulty=3)
    assert [x.to_dict() for x in a] != [x.to_dict() for x in c]


def test_answers_decode_independently():
    for inst in gen_needle_dataset((8, 8), 200, seed=1, difficulty=(0, 10)):
        cell, symbol_token = decode_layout(inst)
        assert cell == inst.query_cell
        assert symbol_token == inst.answer_id
        assert inst.planted_cells == (cell,)


def test_distractors_carry_decoy_symbol():
    voc = Vocab(8, 64, 4)
    for inst in gen_needle_dataset((8, 8), 30, seed=2, difficulty=5):
        answer = voc.symbol_of(inst.answer_id)
        decoy = voc.symbol((answer + 1) % 8)
        assert sum(t == decoy for t in inst.layout.token_ids[:64]) >= 5


def test_one_by_one_grid():
    (inst,) = gen_needle_dataset((1, 1), 1, seed=0)
    assert inst.query_cell == 0 and inst.layout.n_visual == 1
    for R in (0.01, 0.5, 1.0):
        assert make_directive((0,), R, 1, 1).kept == (0,)


def test_dataset_jsonl_round_trip(tmp_path):
    data = gen_needle_dataset((4, 4), 5, seed=3, difficulty=2, n_fillers=2)
    save_dataset(data, tmp_path / "d.jsonl")
    back = load_dataset(tmp_path / "d.jsonl")
    assert [x.to_dict() for x in back] == [x.to_dict() for x in data]
    line = (tmp_path / "d.jsonl").read_text().splitlines()[0]
    assert set(__import__("json").loads(line)) == {"grid", "token_ids", "query_cell",
                                                   "answer_id", "planted_cells"}


def test_heatmap_examples():
    np.testing.assert_array_equal(heatmap_matrix([1, 2, 3, 4], (2, 2)), [[1, 2], [3, 4]])
    assert np.all(heatmap_matrix(np.ones(6), (2, 3)) == 1)
    with pytest.raises(ValueError):
        heatmap_matrix([1, 2, 3], (2, 2))


def test_heatmap_argmax_is_planted(planted_pair, needle_suite):
    small, _ = planted_pair
    for inst in needle_suite[:10]:
        t = AttentionTrace(64, inst.layout.n_prompt)
        generate(small, inst.layout, 4, t)
        m = heatmap_matrix(t.finalize(), inst.grid)
        r, c = np.unravel_index(np.argmax(m), m.shape)
        assert r * inst.grid[1] + c in inst.planted_cells


def test_faithful_models_answer_and_agree(planted_pair, recipe):
    small, large = planted_pair
    for inst in dataset_for(recipe, 100, seed=21, difficulty=(0, 12)):
        a = generate(small, inst.layout, 4).answer_ids
        b = generate(large, inst.layout, 4).answer_ids
        assert a == b == (inst.answer_id,)


def test_concentration_self_check(planted_pair, recipe, needle_suite):
    small, large = planted_pair
    for inst in needle_suite[:5]:
        for model, role in ((small, "small"), (large, "large")):
            masses = measure_concentration(model, recipe, role, inst)
            assert min(masses.values()) >= recipe.concentration - 0.02


def test_corrupted_small_model(corrupted_pair):
    r, (small, large) = corrupted_pair
    overlap = 0
    data = dataset_for(r, 50, seed=8, difficulty=(0, 8))
    for inst in data:
        t_small = AttentionTrace(64, inst.layout.n_prompt)
        t_large = AttentionTrace(64, inst.layout.n_prompt)
        g_small = generate(small, inst.layout, 4, t_small)
        g_large = generate(large, inst.layout, 4, t_large)
        assert g_small.answer_ids != (inst.answer_id,)
        assert g_large.answer_ids == (inst.answer_id,)
        m = len(inst.planted_cells)
        top_small = set(rank_tokens(t_small.finalize())[:m])
        top_large = set(rank_tokens(t_large.finalize())[:m])
        assert set(inst.planted_cells) <= top_small
        overlap += len(top_small & top_large) / m
    assert overlap / len(data) >= 0.9


def test_recipe_validation():
    with pytest.raises(ConstructionError):
        PlantedRecipe(concentration=0.4)
    with pytest.raises(ConstructionError):
        PlantedRecipe(planted_cells=(64,))
    with pytest.raises(ConstructionError):
        PlantedRecipe(answer_fidelity="creative")


def test_infeasible_head_dim():
    r = PlantedRecipe()
    spec = ModelSpec(4, 8, 64, 8, r.vocab.size, 96)
    with pytest.raises(ConstructionError):
        planted_heads(spec, r, "small")


def test_pair_preconditions(recipe):
    small_spec, large_spec = default_specs(recipe)
    with pytest.raises(ConstructionError):
        build_planted_pair(large_spec, small_spec, recipe, 0)
    other = ModelSpec(48, 4, 64, 16, recipe.vocab.size + 1, 96)
    with pytest.raises(ConstructionError):
        build_planted_pair(small_spec, other, recipe, 0)


def test_relevance_layers_validated(recipe):
    r = PlantedRecipe(relevance_layers=(0,))
    _, large_spec = default_specs(r)
    with pytest.raises(ConstructionError):
        planted_heads(large_spec, r, "large")


def test_candidate_cells_restrict_queries():
    r = PlantedRecipe(planted_cells=(5, 9))
    assert {inst.query_cell for inst in dataset_for(r, 40, seed=0)} <= {5, 9}
