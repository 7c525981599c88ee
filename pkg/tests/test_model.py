"""Recognizer tests: forward contracts, adapters, concept readout,
captioning, base training, checkpoints, label verification."""

import json

import numpy as np
import pytest

from unlearnlab import grad as G
from unlearnlab.data import (PAD, BenchmarkConfig, build_benchmark,
                             build_vocab, make_roster)
from unlearnlab.errors import (ConfigError, ContractError, InputError,
                               TrainingFailure)
from unlearnlab.model import (CAPTION_PROMPT, BaseTrainConfig, ConceptVocab,
                              ModelGeometry, ModelOutput, attach_lora,
                              concept_logit, concept_logits_batch,
                              concept_vocab_for, encode_answer, encode_prompt,
                              forward, generate_caption, init_state,
                              load_checkpoint, recognized, save_checkpoint,
                              single_recall, train_base, verify_labels)


@pytest.fixture(scope="module")
def tiny():
    roster = make_roster(4, 1, 0)
    vocab = build_vocab(roster)
    geo = ModelGeometry(out_slots=4)
    state = init_state(geo, vocab, seed=3)
    rng = np.random.default_rng(0)
    images = rng.random((3, geo.image_size))
    prompts = np.tile(encode_prompt(CAPTION_PROMPT, vocab), (3, 1))
    return roster, vocab, geo, state, images, prompts


def _output(logits):
    t = G.constant(np.asarray(logits, dtype=float))
    return ModelOutput(logits=t, probs=G.softmax(t))


# ---------------------------------------------------------------------------
# Forward contracts


def test_forward_deterministic(tiny):
    _, _, _, state, images, prompts = tiny
    a = forward(state, images, prompts).logits.data
    b = forward(state, images, prompts).logits.data
    assert np.array_equal(a, b)


def test_probability_rows_sum_to_one(tiny):
    _, _, _, state, images, prompts = tiny
    p = forward(state, images, prompts).probs.data
    assert np.all(p >= 0)
    assert np.allclose(p.sum(axis=2), 1.0, atol=1e-9)


def test_out_of_range_pixels_rejected(tiny):
    _, _, geo, state, _, prompts = tiny
    with pytest.raises(InputError):
        forward(state, np.full((3, geo.image_size), 1.2), prompts)


def test_prompt_width_enforced(tiny):
    _, _, _, state, images, _ = tiny
    with pytest.raises(ContractError):
        forward(state, images, np.zeros((3, 5)))


def test_zero_init_lora_is_identity(tiny):
    _, _, _, state, images, prompts = tiny
    before = forward(state, images, prompts).logits.data
    adapted = attach_lora(state.clone(), rank=4, alpha=8.0, seed=9)
    after = forward(adapted, images, prompts).logits.data
    assert np.allclose(before, after, atol=1e-9)
    for a in adapted.lora:
        assert np.array_equal(a.up, np.zeros_like(a.up))


def test_attach_lora_unknown_target(tiny):
    _, _, _, state, _, _ = tiny
    with pytest.raises(ConfigError):
        attach_lora(state.clone(), targets=("not_a_layer",))


# ---------------------------------------------------------------------------
# Concept readout


def test_concept_vocab_non_empty():
    with pytest.raises(ContractError):
        ConceptVocab(0, ())


def test_concept_logit_constant_field():
    out = _output(np.full((1, 3, 5), 2.5))
    assert concept_logit(out, ConceptVocab(0, (1, 3))).item() == 2.5


def test_concept_logit_singleton_slot():
    logits = np.zeros((1, 1, 5))
    logits[0, 0, 2] = -1.7
    out = _output(logits)
    assert concept_logit(out, ConceptVocab(0, (2,))).item() == -1.7


def test_concept_logit_brute_force_oracle():
    rng = np.random.default_rng(11)
    for _ in range(20):
        logits = rng.normal(size=(1, 3, 5))
        out = _output(logits)
        z = concept_logit(out, ConceptVocab(0, (1, 3))).item()
        assert z == logits[0, :, [1, 3]].max()


def test_concept_logit_requires_single_sample():
    out = _output(np.zeros((2, 3, 5)))
    with pytest.raises(ContractError):
        concept_logit(out, ConceptVocab(0, (1,)))


def test_recognized_sign_oracle():
    rng = np.random.default_rng(7)
    cv = ConceptVocab(0, (0, 4))
    for _ in range(1000):
        logits = rng.normal(size=(1, 2, 6))
        out = _output(logits)
        assert recognized(out, cv) == (logits[0, :, [0, 4]].max() > 0.0)


def test_recognized_strict_at_zero():
    out = _output(np.zeros((1, 2, 4)))
    assert recognized(out, ConceptVocab(0, (1, 2))) is False


def test_concept_logit_monotone():
    rng = np.random.default_rng(5)
    cv = ConceptVocab(0, (1, 3))
    logits = rng.normal(size=(1, 3, 5))
    z0 = concept_logit(_output(logits), cv).item()
    for slot in range(3):
        for tok in (1, 3):
            bumped = logits.copy()
            bumped[0, slot, tok] += 1.0
            assert concept_logit(_output(bumped), cv).item() >= z0


def test_concept_logits_batch_matches_per_sample():
    rng = np.random.default_rng(9)
    logits = rng.normal(size=(4, 3, 6))
    cv = ConceptVocab(0, (2, 5))
    batched = concept_logits_batch(_output(logits), cv).data
    singles = [concept_logit(_output(logits[k:k + 1]), cv).item()
               for k in range(4)]
    assert np.allclose(batched, singles, atol=0)


# ---------------------------------------------------------------------------
# Prompt / answer encoding, captions


def test_encode_prompt_normalized_counts(tiny):
    _, vocab, _, _, _, _ = tiny
    row = encode_prompt(("the", "the", "photo"), vocab)
    assert row.sum() == pytest.approx(1.0, abs=1e-12)
    assert row[vocab.encode("the")] == pytest.approx(2 / 3)
    assert row[vocab.encode("photo")] == pytest.approx(1 / 3)


def test_encode_prompt_empty_rejected(tiny):
    _, vocab, _, _, _, _ = tiny
    with pytest.raises(ContractError):
        encode_prompt((), vocab)


def test_encode_answer_pads_to_slots(tiny):
    roster, vocab, geo, _, _, _ = tiny
    enc = encode_answer(roster[0].name, vocab, geo.out_slots)
    assert enc.shape == (geo.out_slots,)
    assert list(enc[:2]) == vocab.encode_seq(roster[0].name)
    assert all(enc[2:] == vocab.encode(PAD))


def test_caption_is_per_slot_argmax(tiny):
    _, vocab, geo, state, images, _ = tiny
    cap = generate_caption(state, images[0])
    out = forward(state, images[:1],
                  encode_prompt(CAPTION_PROMPT, vocab)[None])
    expected = [vocab.tokens[i] for i in out.logits.data[0].argmax(axis=1)]
    assert cap == [t for t in expected if t != PAD]


def test_base_captions_name_verified_singles(base_state, train_ds):
    """On verified single-identity images the base model's caption contains
    the identity's name tokens >= 90% of the time."""
    verified, _ = verify_labels(train_ds, base_state)
    recs = [r for r in verified.image_records() if len(r.members) == 1]
    by_id = {s.id: s for s in verified.roster}
    hits = sum(
        all(t in generate_caption(base_state, verified.images[r.image_id])
            for t in by_id[r.members[0]].name)
        for r in recs)
    assert hits / len(recs) >= 0.90


def test_unlearned_captions_drop_target_name(auvic_state, train_ds):
    target = next(s for s in train_ds.roster if s.id == train_ds.target_id)
    recs = [r for r in train_ds.image_records() if target.id in r.members]
    # the family-name token is shared with the sibling by design, so
    # "excludes the target" means the full name pair never appears
    misses = sum(
        not all(t in generate_caption(auvic_state,
                                      train_ds.images[r.image_id])
                for t in target.name)
        for r in recs)
    assert misses / len(recs) >= 0.90


# ---------------------------------------------------------------------------
# Base training


def test_base_single_recall_target(base_state, train_ds):
    concepts = [concept_vocab_for(s, base_state.vocab)
                for s in train_ds.roster]
    assert single_recall(base_state, train_ds, concepts) >= 0.95


@pytest.fixture(scope="module")
def small_ds():
    roster = make_roster(4, 1, 0)
    cfg = BenchmarkConfig(n_identities=4, n_similar_pairs=1,
                          singles_per_identity=6, groups_per_identity=3,
                          queries_per_image=4, min_target_group=1,
                          min_non_target_group=1)
    return build_benchmark(roster, cfg, seed_offset=0), build_vocab(roster)


def test_train_base_loss_decreases(small_ds):
    ds, vocab = small_ds
    cfg = BaseTrainConfig(max_epochs=6, min_epochs=6, hard_floor=0.0, seed=1)
    _, log = train_base(ds, ds, vocab, cfg,
                        geometry=ModelGeometry(out_slots=4))
    losses = log["epoch_loss"]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_train_base_deterministic(small_ds):
    ds, vocab = small_ds
    cfg = BaseTrainConfig(max_epochs=3, min_epochs=3, hard_floor=0.0, seed=2)
    geo = ModelGeometry(out_slots=4)
    s1, log1 = train_base(ds, ds, vocab, cfg, geometry=geo)
    s2, log2 = train_base(ds, ds, vocab, cfg, geometry=geo)
    assert log1 == log2
    for k in s1.params:
        assert np.array_equal(s1.params[k], s2.params[k])


def test_train_base_failure_reported(small_ds):
    ds, vocab = small_ds
    # over-weighted recognition term destabilizes the tiny run; recall
    # stays under the floor within the epoch budget and must be reported
    cfg = BaseTrainConfig(max_epochs=3, min_epochs=3, bce_weight=5.0, seed=0)
    with pytest.raises(TrainingFailure):
        train_base(ds, ds, vocab, cfg, geometry=ModelGeometry(out_slots=4))


# ---------------------------------------------------------------------------
# Checkpoints


def test_checkpoint_round_trip(tiny, tmp_path):
    _, _, _, state, images, prompts = tiny
    st = attach_lora(state.clone(), rank=3, alpha=6.0, seed=1)
    rng = np.random.default_rng(0)
    for a in st.lora:  # non-trivial factors must survive the round trip
        a.up[:] = rng.normal(size=a.up.shape)
    path = tmp_path / "model.npz"
    save_checkpoint(st, path)
    back = load_checkpoint(path)
    assert back.vocab.tokens == st.vocab.tokens
    assert back.geometry == st.geometry
    for k in st.params:
        assert np.array_equal(back.params[k], st.params[k])
    for a, b in zip(st.lora, back.lora):
        assert (a.target, a.rank, a.alpha) == (b.target, b.rank, b.alpha)
        assert np.array_equal(a.down, b.down)
        assert np.array_equal(a.up, b.up)
    assert np.array_equal(forward(st, images, prompts).logits.data,
                          forward(back, images, prompts).logits.data)


def test_checkpoint_version_check(tiny, tmp_path):
    _, _, _, state, _, _ = tiny
    path = tmp_path / "model.npz"
    save_checkpoint(state, path)
    with np.load(path) as z:
        arrays = {k: z[k].copy() for k in z.files}
    meta = json.loads(bytes(arrays["meta"]).decode())
    meta["version"] = 999
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(path, **arrays)
    with pytest.raises(ConfigError):
        load_checkpoint(path)


# ---------------------------------------------------------------------------
# Label verification


def test_verify_labels_low_rejection(base_state, train_ds):
    verified, report = verify_labels(train_ds, base_state)
    assert report["rejection_rate"] < 0.10
    assert report["total_images"] == len(train_ds.image_records())
    rejected = set(report["rejected_ids"])
    assert len(rejected) == report["rejected_images"]
    assert not rejected & set(verified.images)
    assert all(s.image_id not in rejected for s in verified.samples)


def test_verify_labels_threshold(base_state, train_ds):
    with pytest.raises(TrainingFailure):
        verify_labels(train_ds, base_state, max_rejection=0.0)
