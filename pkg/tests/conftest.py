"""Shared fixtures: the canonical toy benchmark, base recognizer, and
unlearned models. Heavyweight fixtures are session-scoped so the end-to-end
criteria and module tests share one training run."""

import numpy as np
import pytest

from unlearnlab.data import BenchmarkConfig, build_benchmark, build_vocab, make_roster
from unlearnlab.model import BaseTrainConfig, train_base
from unlearnlab.unlearn import RUNNERS, UnlearnConfig, build_task


@pytest.fixture(scope="session")
def bench_config():
    return BenchmarkConfig()


@pytest.fixture(scope="session")
def roster(bench_config):
    return make_roster(bench_config.n_identities, bench_config.n_similar_pairs,
                       bench_config.seed)


@pytest.fixture(scope="session")
def vocab(roster):
    return build_vocab(roster)


@pytest.fixture(scope="session")
def train_ds(roster, bench_config):
    return build_benchmark(roster, bench_config, seed_offset=0)


@pytest.fixture(scope="session")
def eval_ds(roster, bench_config):
    return build_benchmark(roster, bench_config, seed_offset=1)


@pytest.fixture(scope="session")
def heldout_ds(roster, bench_config):
    return build_benchmark(roster, bench_config, seed_offset=2)


@pytest.fixture(scope="session")
def base_state(train_ds, vocab):
    # Early stopping judged on the training benchmark; the eval corpus
    # never influences a training decision.
    state, _ = train_base(train_ds, train_ds, vocab, BaseTrainConfig())
    return state


@pytest.fixture(scope="session")
def base_param_snapshot(base_state):
    """Taken before any unlearning fixture runs; the freeze-contract test
    compares against this after all of them have."""
    return {k: v.copy() for k, v in base_state.params.items()}


@pytest.fixture(scope="session")
def task(train_ds, base_state):
    return build_task(train_ds, base_state.vocab, train_ds.target_id,
                      base_state.geometry.out_slots)


def _run(method, task, base_state, **overrides):
    state, log = RUNNERS[method](task, UnlearnConfig(**overrides), base_state)
    return state, log


@pytest.fixture(scope="session")
def auvic_state(task, base_state, base_param_snapshot):
    return _run("auvic", task, base_state)[0]


@pytest.fixture(scope="session")
def ga_state(task, base_state, base_param_snapshot):
    return _run("ga", task, base_state)[0]


@pytest.fixture(scope="session")
def ga_kl_state(task, base_state, base_param_snapshot):
    return _run("ga_kl", task, base_state)[0]


@pytest.fixture(scope="session")
def po_state(task, base_state, base_param_snapshot):
    return _run("po", task, base_state)[0]


@pytest.fixture(scope="session")
def eval_decisions(base_state, auvic_state, ga_state, ga_kl_state, po_state,
                   eval_ds):
    from unlearnlab.metrics import evaluate_decisions
    return {name: evaluate_decisions(state, eval_ds)
            for name, state in [("base", base_state), ("auvic", auvic_state),
                                ("ga", ga_state), ("ga_kl", ga_kl_state),
                                ("po", po_state)]}


@pytest.fixture(scope="session")
def micro():
    """2-concept micro-model + hand-built task for gradient-fidelity checks."""
    from unlearnlab.data import SceneSpec, render_group, render_single
    from unlearnlab.model import (ModelGeometry, attach_lora, encode_answer,
                                  init_state)
    from unlearnlab.unlearn import UnlearnTask

    r = make_roster(2, 1, 0)
    v = build_vocab(r)
    geo = ModelGeometry(out_slots=4)
    state = init_state(geo, v, seed=0)
    attach_lora(state, rank=2, alpha=2.0, seed=0)

    def caption(spec):
        return encode_answer(spec.name, v, geo.out_slots)

    forget_imgs = [render_single(r[0], k).reshape(-1) for k in range(3)]
    forget_imgs.append(render_group(
        SceneSpec((0, 1), (0, 3), 77), r).reshape(-1))
    retain_imgs = [render_single(r[1], k).reshape(-1) for k in range(3)]
    task = UnlearnTask(
        target=r[0], roster=list(r), vocab=v,
        forget_images=np.array(forget_imgs),
        forget_answers=np.array([caption(r[0])] * 4, dtype=np.intp),
        forget_presence=np.array([[1, 0]] * 3 + [[1, 1]], dtype=float),
        retain_images=np.array(retain_imgs),
        retain_answers=np.array([caption(r[1])] * 3, dtype=np.intp),
        retain_presence=np.array([[0, 1]] * 3, dtype=float),
        prompt_templates=["is {name} in the photo"],
    )
    return state, task


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)
