"""Metric suite tests: decision plumbing, rate oracles, GRF properties,
BLEU oracles, perplexity bounds, generality guards, table writers."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unlearnlab import metrics as M
from unlearnlab.data import (BenchmarkConfig, build_benchmark, build_vocab,
                             make_roster)
from unlearnlab.errors import ContractError
from unlearnlab.metrics import (Decision, MetricsReport, bleu, efficacy,
                                evaluate_decisions, forgetting_matrix,
                                forgetting_rate, generality, grf_f1,
                                load_decisions, markdown_table,
                                masked_perplexity, matrix_to_csv, ntra,
                                recall_and_bleu, save_decisions, tfa,
                                write_metrics_csv)
from unlearnlab.model import ModelGeometry, init_state


def _d(image_id, category, concept_id, present, recognized, logit=0.5):
    return Decision(image_id, category, concept_id, present,
                    logit if recognized else -logit, recognized)


# ---------------------------------------------------------------------------
# Decision plumbing


def test_decision_csv_round_trip(tmp_path):
    decisions = [
        _d("single_00_000", "Target-Single", 0, True, True, 1.2345678901234),
        _d("group_01_002", "Non-Target-Group", 3, False, False, 1e-17),
    ]
    path = tmp_path / "d.csv"
    save_decisions(decisions, path)
    back = load_decisions(path)
    assert back == decisions  # repr round trip keeps logits exact


def test_evaluate_decisions_consistency(eval_decisions, eval_ds):
    decisions = eval_decisions["base"]
    n_images = len(eval_ds.image_records())
    assert len(decisions) == n_images * len(eval_ds.roster)
    members = dict(eval_ds.image_members)
    for d in decisions:
        assert d.present == (d.concept_id in members[d.image_id])
        assert d.recognized == (d.logit > 0.0)


# ---------------------------------------------------------------------------
# Rate metrics: recount oracles on handmade decision lists


def test_tfa_counts():
    decisions = (
        [_d(f"g{k}", "Target-Group", 0, True, k < 3) for k in range(10)]
        + [_d("s0", "Target-Single", 0, True, True)]  # wrong category
        + [_d("g0", "Target-Group", 1, True, True)])  # wrong concept
    assert tfa(decisions, 0) == pytest.approx(70.0)
    with pytest.raises(ContractError):
        tfa([], 0)


def test_ntra_counts_present_non_targets_only():
    decisions = (
        [_d(f"g{k}", "Target-Group", 1, True, k < 6) for k in range(8)]
        + [_d(f"h{k}", "Non-Target-Group", 2, True, True) for k in range(2)]
        + [_d("g0", "Target-Group", 0, True, True)]     # target excluded
        + [_d("g1", "Target-Group", 3, False, False)])  # absent excluded
    assert ntra(decisions, 0) == pytest.approx(80.0)
    with pytest.raises(ContractError):
        ntra([_d("g0", "Target-Group", 0, True, True)], 0)


def test_efficacy_and_forgetting_rate_counts():
    decisions = [_d(f"single_0_{k}", "Target-Single", 0, True, k < 2)
                 for k in range(8)]
    assert efficacy(decisions, 0) == pytest.approx(6 / 8)
    assert forgetting_rate(decisions, 0) == pytest.approx(6 / 8)
    # forgetting_rate keys on single-image ids, not categories
    decisions.append(_d("group_0_0", "Target-Group", 0, True, False))
    assert forgetting_rate(decisions, 0) == pytest.approx(6 / 8)
    with pytest.raises(ContractError):
        forgetting_rate(decisions, 5)


# ---------------------------------------------------------------------------
# GRF-F1 properties


def test_grf_symmetry_and_fixed_points():
    assert grf_f1(40.0, 60.0) == grf_f1(60.0, 40.0)
    assert grf_f1(85.0, 85.0) == pytest.approx(85.0)
    assert grf_f1(0.0, 0.0) == 0.0
    assert grf_f1(0.0, 100.0) == 0.0


def test_grf_range_guard():
    with pytest.raises(ContractError):
        grf_f1(-1.0, 50.0)
    with pytest.raises(ContractError):
        grf_f1(50.0, 100.5)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 100), st.floats(0, 100))
def test_grf_bounded_by_min_and_mean(a, b):
    g = grf_f1(a, b)
    assert 0.0 <= g <= 100.0
    assert g <= (a + b) / 2 + 1e-9          # harmonic <= arithmetic
    assert g <= 2 * min(a, b) + 1e-9


# ---------------------------------------------------------------------------
# BLEU oracles


def test_bleu_identity():
    assert bleu(list("abcd"), list("abcd")) == pytest.approx(1.0)


def test_bleu_hand_computed():
    cand = ["a", "b", "b", "a"]
    ref = ["a", "b", "a", "c"]
    # unigram: clipped(a)=2, clipped(b)=1 -> 3/4; bigram: ab+ba, 2 of 3;
    # trigram/4-gram: zero matches -> score 0
    assert bleu(cand, ref) == 0.0
    assert bleu(cand, ref, max_n=2) == pytest.approx(
        np.sqrt((3 / 4) * (2 / 3)))


def test_bleu_brevity_penalty():
    got = bleu(["a", "b"], ["a", "b", "c", "d"], max_n=2)
    assert got == pytest.approx(np.exp(1.0 - 4 / 2))


def test_bleu_order_capped_by_length():
    # single-token caption scored at the unigram level only
    assert bleu(["a"], ["a", "b", "c"]) == pytest.approx(np.exp(1.0 - 3))
    assert bleu(["z"], ["a", "b", "c"]) == 0.0


def test_bleu_edge_cases():
    assert bleu([], ["a"]) == 0.0
    with pytest.raises(ContractError):
        bleu(["a"], [])


def test_recall_and_bleu_on_base(base_state, eval_ds):
    spec = next(s for s in eval_ds.roster if s.id != eval_ds.target_id)
    recall, b = recall_and_bleu(base_state, eval_ds, spec)
    assert recall >= 0.90
    assert 0.0 <= b <= 1.0
    with pytest.raises(ContractError):
        recall_and_bleu(base_state, eval_ds,
                        type(spec)(id=99, name=("xx", "yy"), hue=0, shape=0,
                                   stripes=0, accent=0, group=0))


# ---------------------------------------------------------------------------
# Perplexity and generality


def test_masked_perplexity_at_least_one(rng):
    roster = make_roster(4, 1, 0)
    vocab = build_vocab(roster)
    state = init_state(ModelGeometry(out_slots=4), vocab, seed=2)
    for _ in range(5):
        img = rng.random((3, 32, 32))
        ppl = masked_perplexity(state, img, roster[0].name, set())
        assert ppl >= 1.0 - 1e-12


def test_masked_perplexity_empty_reference():
    roster = make_roster(4, 1, 0)
    state = init_state(ModelGeometry(out_slots=4), build_vocab(roster), 0)
    with pytest.raises(ContractError):
        masked_perplexity(state, np.zeros((3, 32, 32)), (), set())


def test_generality_overlap_guard(base_state, heldout_ds):
    with pytest.raises(ContractError):
        generality(base_state, heldout_ds, train_ds=heldout_ds)


def test_generality_exclude_ids(base_state, heldout_ds):
    g_all = generality(base_state, heldout_ds)
    g_excl = generality(base_state, heldout_ds,
                        exclude_ids=(heldout_ds.target_id,))
    assert 0.0 <= g_excl <= 1.0 and 0.0 <= g_all <= 1.0
    # excluding every identity leaves nothing to score
    with pytest.raises(ContractError):
        generality(base_state, heldout_ds,
                   exclude_ids=tuple(s.id for s in heldout_ds.roster))


# ---------------------------------------------------------------------------
# Forgetting matrix plumbing (fake runner: fast, controllable failures)


@pytest.fixture()
def small_pair():
    roster = make_roster(4, 1, 0)
    cfg = BenchmarkConfig(n_identities=4, n_similar_pairs=1,
                          singles_per_identity=4, groups_per_identity=2,
                          queries_per_image=3, min_target_group=1,
                          min_non_target_group=1)
    train = build_benchmark(roster, cfg, seed_offset=0)
    ev = build_benchmark(roster, cfg, seed_offset=1)
    state = init_state(ModelGeometry(out_slots=4), build_vocab(roster), 0)
    return state, train, ev


def test_matrix_invalid_rows_flagged(small_pair, monkeypatch):
    state, train, ev = small_pair

    def fake_runner(task, config, base_state):
        if task.target.id == 2:
            raise RuntimeError("row blows up")
        return base_state, []

    monkeypatch.setitem(M.RUNNERS, "fake", fake_runner)
    mat, valid = forgetting_matrix(state, train, ev, method="fake")
    assert valid.tolist() == [True, True, False, True]
    assert np.all(np.isnan(mat[2]))
    assert np.all(np.isfinite(mat[valid]))


def test_matrix_parallel_matches_serial(small_pair, monkeypatch):
    state, train, ev = small_pair
    monkeypatch.setitem(M.RUNNERS, "fake", lambda t, c, b: (b, []))
    m1, v1 = forgetting_matrix(state, train, ev, method="fake", jobs=1)
    m2, v2 = forgetting_matrix(state, train, ev, method="fake", jobs=3)
    assert np.array_equal(m1, m2) and np.array_equal(v1, v2)


def test_matrix_to_csv_marks_invalid(tmp_path):
    roster = make_roster(4, 1, 0)
    mat = np.array([[0.5, 0.25, 0.0, 1.0],
                    [np.nan] * 4,
                    [0.1, 0.2, 0.3, 0.4],
                    [0.0, 0.0, 0.0, np.inf]])
    path = tmp_path / "m.csv"
    matrix_to_csv(mat, roster, path)
    lines = path.read_text().strip().split("\n")
    assert lines[0].startswith("unlearned_target,")
    assert lines[2].count("invalid") == 4
    assert lines[4].endswith("invalid")
    assert "0.2500" in lines[1]


# ---------------------------------------------------------------------------
# Tables


def _report(method="auvic"):
    return MetricsReport(method=method, target_id=0, tfa=91.53, ntra=92.40,
                         grf_f1=91.96, efficacy=1.0, generality=0.9593,
                         perplexity=35.4812)


def test_metrics_csv_column_order(tmp_path):
    path = tmp_path / "m.csv"
    write_metrics_csv([_report()], path)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == ",".join(MetricsReport.COLUMNS)
    assert lines[1] == "auvic,0,91.53,92.40,91.96,1.0000,0.9593,35.4812"


def test_markdown_table_shape():
    md = markdown_table([_report("a"), _report("b")])
    lines = md.strip().split("\n")
    assert len(lines) == 4
    assert all(line.count("|") == 8 for line in lines)
    assert "| a |" in lines[2] and "| b |" in lines[3]
