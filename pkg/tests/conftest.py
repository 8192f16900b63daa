import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cascade_prune.engine import ModelSpec, TokenLayout, build_model  # noqa: E402
from cascade_prune.synth import PlantedRecipe, build_planted_pair, dataset_for, default_specs  # noqa: E402


def toy_layout(spec, n_visual, n_prompt, seed):
    rng = np.random.default_rng(seed)
    ids = rng.integers(1, spec.vocab_size, size=n_visual + n_prompt)
    return TokenLayout(n_visual, n_prompt, tuple(int(i) for i in ids))


@pytest.fixture(scope="session")
def toy_spec():
    return ModelSpec(num_layers=2, num_heads=2, model_dim=8, head_dim=4, vocab_size=16,
                     max_seq_len=32)


@pytest.fixture(scope="session")
def toy_model(toy_spec):
    return build_model(toy_spec, seed=0)


@pytest.fixture(scope="session")
def recipe():
    return PlantedRecipe()


@pytest.fixture(scope="session")
def planted_pair(recipe):
    small_spec, large_spec = default_specs(recipe)
    return build_planted_pair(small_spec, large_spec, recipe, seed=0)


@pytest.fixture(scope="session")
def corrupted_pair():
    r = PlantedRecipe(answer_fidelity="corrupted")
    small_spec, large_spec = default_specs(r)
    return r, build_planted_pair(small_spec, large_spec, r, seed=0)


@pytest.fixture(scope="session")
def needle_suite(recipe):
    return dataset_for(recipe, 40, seed=11, difficulty=(0, 8))


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
