"""Min-max unlearning trainer and the gradient-ascent style baselines.

The adversarial loop alternates a generator phase (ascent on the target
forgetting loss w.r.t. the perturbation MLP) with a discriminator phase
(descent on forgetting + weighted preservation + consistency w.r.t. the
low-rank adapters only). Baselines: plain gradient ascent (ga), gradient
ascent with a KL penalty to the frozen original model (ga_kl), and
preference optimization toward abstention answers (po).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from unlearnlab import grad as G
from unlearnlab import nnops
from unlearnlab.advgen import (EPSILON_DEFAULT, FrozenEncoder, GeneratorParams,
                               init_generator, load_prompt_templates,
                               perturb_image, perturb_prompt)
from unlearnlab.anchor import (AnchorConfig, AnchorSelection,
                               mean_token_embedding, select_anchors,
                               similarity_scores)
from unlearnlab.data import Dataset, IdentitySpec, Vocab, caption_reference
from unlearnlab.errors import ConfigError, ContractError, DivergenceError
from unlearnlab.model import (CAPTION_PROMPT, ConceptVocab, ModelState,
                              attach_lora, concept_logits_batch,
                              concept_vocab_for, encode_answer, encode_prompt,
                              forward)
from unlearnlab.optim import AdamW, ReduceLROnPlateau


@dataclass
class UnlearnConfig:
    lam: float = 1.0                     # preservation weight
    beta: float = 0.5                    # consistency weight
    ell_minus: float = 0.0               # BCE suppression target
    ell_plus: float = 1.0                # BCE retention target
    steps: int = 70
    gen_steps: int = 1
    disc_steps: int = 1
    lr_gen: float = 1e-3
    lr_disc: float = 5e-4
    batch_size: int = 16
    weight_decay: float = 0.0
    plateau_patience: int = 20
    plateau_factor: float = 0.5
    min_lr: float = 1e-6
    generator_objective: str = "forget-only"  # or "full"
    gen_optimizer: str = "adamw"              # or "sgd" (plain gradient)
    use_adv_perturb: bool = True              # ablation switch
    lora_rank: int = 16
    lora_alpha: float = 16.0
    lora_targets: tuple[str, ...] | None = None  # None: model default
    gen_hidden: int = 1024
    epsilon: float = EPSILON_DEFAULT
    anchor: AnchorConfig = field(default_factory=AnchorConfig)
    ga_kl_beta: float = 5.0
    ga_kl_reference: str = "frozen"           # or "current"
    seed: int = 0

    def validate(self):
        if self.lam < 0 or self.beta < 0:
            raise ConfigError("loss weights must be non-negative")
        if not (0.0 <= self.ell_minus < self.ell_plus <= 1.0):
            raise ConfigError("need 0 <= ell_minus < ell_plus <= 1")
        if self.generator_objective not in ("forget-only", "full"):
            raise ConfigError(f"bad generator objective {self.generator_objective!r}")
        if self.gen_optimizer not in ("adamw", "sgd"):
            raise ConfigError(f"bad generator optimizer {self.gen_optimizer!r}")
        if self.ga_kl_reference not in ("frozen", "current"):
            raise ConfigError(f"bad ga_kl reference {self.ga_kl_reference!r}")


@dataclass
class UnlearnTask:
    """Forget / retain splits plus the references the trainers need."""

    target: IdentitySpec
    roster: list[IdentitySpec]
    vocab: Vocab
    forget_images: np.ndarray       # (Nf, image_size), all contain the target
    forget_answers: np.ndarray      # (Nf, T_out) reference caption slots
    forget_presence: np.ndarray     # (Nf, n_identities)
    retain_images: np.ndarray
    retain_answers: np.ndarray
    retain_presence: np.ndarray
    prompt_templates: list[str]

    @property
    def candidate_ids(self):
        return tuple(s.id for s in self.roster if s.id != self.target.id)

    def concept(self, cid) -> ConceptVocab:
        spec = next(s for s in self.roster if s.id == cid)
        return concept_vocab_for(spec, self.vocab)


def build_task(ds: Dataset, vocab: Vocab, target_id: int, out_slots: int,
               prompt_templates=None, singles_only=False) -> UnlearnTask:
    roster = ds.roster
    target = next((s for s in roster if s.id == target_id), None)
    if target is None:
        raise ConfigError(f"unknown target id {target_id}")
    id_index = {s.id: k for k, s in enumerate(roster)}

    def pack(recs):
        imgs, answers, presence = [], [], []
        for r in recs:
            imgs.append(ds.images[r.image_id].reshape(-1))
            ref = caption_reference(r.members, r.positions, roster)
            answers.append(encode_answer(ref, vocab, out_slots))
            row = np.zeros(len(roster))
            for m in r.members:
                row[id_index[m]] = 1.0
            presence.append(row)
        return (np.array(imgs), np.array(answers, dtype=np.intp),
                np.array(presence))

    recs = ds.image_records()
    forget = [r for r in recs if target_id in r.members
              and (not singles_only or len(r.members) == 1)]
    retain = [r for r in recs if target_id not in r.members]
    if not forget:
        raise ContractError("forget set is empty")
    fi, fa, fp = pack(forget)
    ri, ra, rp = pack(retain)
    return UnlearnTask(target, list(roster), vocab, fi, fa, fp, ri, ra, rp,
                       prompt_templates or load_prompt_templates())


# ---------------------------------------------------------------------------
# Losses


def forgetting_loss(output, target_concept: ConceptVocab, ell_minus: float):
    """Mean BCE between the target's max concept logit and the suppression
    target."""
    z = concept_logits_batch(output, target_concept)
    return G.mean(nnops.bce_with_logits(z, ell_minus))


def preservation_loss(output, selection: AnchorSelection, task: UnlearnTask,
                      ell_plus: float):
    """Anchor-weighted BCE pulling preserved concepts toward retention."""
    if not selection.ids:
        raise ContractError("anchor selection is empty")
    terms = []
    for cid, w in zip(selection.ids, selection.weights):
        z = concept_logits_batch(output, task.concept(cid))
        terms.append(G.scalar_mul(G.mean(nnops.bce_with_logits(z, ell_plus)),
                                  float(w)))
    total = terms[0]
    for t in terms[1:]:
        total = G.add(total, t)
    return total


def consistency_loss(p_adv, p_clean):
    """Mean per-slot KL(p_adv || p_clean); the clean branch is constant."""
    b, t, v = p_adv.shape
    clean = np.asarray(p_clean, dtype=np.float64).reshape(b * t, v)
    return nnops.kl_rows(G.reshape(p_adv, (b * t, v)), clean)


def total_objective(state: ModelState, gen: GeneratorParams,
                    encoder: FrozenEncoder, images, prompt_rows,
                    task: UnlearnTask, selection: AnchorSelection,
                    config: UnlearnConfig, *, trainable="lora",
                    gen_trainable=False):
    """Full objective on one batch: L_f + lam*L_p + beta*L_c.

    Returns (total, components dict, model output, generator tensors).
    The clean forward pass never contributes gradients.
    """
    target_cv = task.concept(task.target.id)
    clean_out = forward(state, images, prompt_rows, check_range=False)
    p_clean = clean_out.probs.data

    if config.use_adv_perturb:
        x_adv, gen_tensors = perturb_image(images, gen, encoder,
                                           trainable=gen_trainable)
        out = forward(state, None, prompt_rows, trainable=trainable,
                      image_tensor=x_adv)
    else:
        gen_tensors = {}
        out = forward(state, images, prompt_rows, trainable=trainable,
                      check_range=False)

    lf = forgetting_loss(out, target_cv, config.ell_minus)
    lp = preservation_loss(out, selection, task, config.ell_plus)
    lc = consistency_loss(out.probs, p_clean)
    total = G.add(G.add(lf, G.scalar_mul(lp, config.lam)),
                  G.scalar_mul(lc, config.beta))
    parts = {"lf": lf.item(), "lp": lp.item(), "lc": lc.item(),
             "total": total.item()}
    return total, parts, out, gen_tensors


# ---------------------------------------------------------------------------
# Shared helpers


def _perturbed_prompt_rows(task: UnlearnTask, n: int, rng) -> np.ndarray:
    rows = np.empty((n, task.vocab.size))
    for i in range(n):
        toks = perturb_prompt(task.target, task.prompt_templates, rng)
        rows[i] = encode_prompt(toks, task.vocab)
    return rows


def _probe_rows(task: UnlearnTask, n: int) -> np.ndarray:
    row = encode_prompt(CAPTION_PROMPT, task.vocab)
    return np.tile(row, (n, 1))


def _lora_grads(gmap, output):
    return {name: gmap[t] for name, t in output._lora_tensors.items()
            if t in gmap}


def _check_finite(value, log):
    if not np.isfinite(value):
        raise DivergenceError(f"objective diverged (last steps: {log[-3:]})")


def _ga_style_loss(state, task, images, *, prompt_rows):
    """Forget-set recognition loss of the target: BCE of its concept logit
    against presence. Gradient *ascent* on this quantity is unbounded (the
    logit is driven toward -inf), which is what makes plain GA collateral-
    heavy compared to the saturating suppression target of the min-max
    trainer."""
    out = forward(state, images, prompt_rows, trainable="lora",
                  check_range=False)
    z = concept_logits_batch(out, task.concept(task.target.id))
    return G.mean(nnops.bce_with_logits(z, 1.0)), out


def _fresh_state(base_state: ModelState, config: UnlearnConfig) -> ModelState:
    state = base_state.clone()
    attach_lora(state, rank=config.lora_rank, alpha=config.lora_alpha,
                seed=config.seed, targets=config.lora_targets)
    return state


class _GenOpt:
    """Ascent wrapper: AdamW or plain gradient, sign handled here."""

    def __init__(self, gen: GeneratorParams, config: UnlearnConfig):
        self.kind = config.gen_optimizer
        self.lr = config.lr_gen
        self.gen = gen
        if self.kind == "adamw":
            self.opt = AdamW(gen.params, lr=config.lr_gen,
                             weight_decay=config.weight_decay)

    def ascend(self, grads):
        if self.kind == "adamw":
            self.opt.step({k: -g for k, g in grads.items()})
        else:
            for k, g in grads.items():
                if not np.all(np.isfinite(g)):
                    raise DivergenceError(f"non-finite generator gradient {k}")
                self.gen.params[k] += self.lr * g


# ---------------------------------------------------------------------------
# Runners


def run_auvic(task: UnlearnTask, config: UnlearnConfig,
              base_state: ModelState):
    """Alternating adversarial unlearning; returns (state, train log)."""
    config.validate()
    state = _fresh_state(base_state, config)
    geo = state.geometry
    encoder = FrozenEncoder(geo.image_size, seed=config.seed)
    gen = init_generator(encoder.d_h, geo.image_size, hidden=config.gen_hidden,
                         epsilon=config.epsilon, seed=config.seed)
    gen_opt = _GenOpt(gen, config)
    disc_opt = AdamW(state.lora_params(), lr=config.lr_disc,
                     weight_decay=config.weight_decay)
    plateau = ReduceLROnPlateau(disc_opt, factor=config.plateau_factor,
                                patience=config.plateau_patience,
                                min_lr=config.min_lr)
    rng = np.random.default_rng([config.seed & 0x7FFFFFFF, task.target.id, 40231])

    emb = state.params["prompt_E"]
    target_emb = mean_token_embedding(task.target.name, task.vocab, emb)
    cand = [s for s in task.roster if s.id != task.target.id]
    scores = similarity_scores(
        target_emb, [mean_token_embedding(s.name, task.vocab, emb) for s in cand])
    cand_ids = [s.id for s in cand]

    n_forget = task.forget_images.shape[0]
    selection = None
    log = []
    for step in range(config.steps):
        if step % config.anchor.resample_period == 0:
            selection = select_anchors(scores, cand_ids, config.anchor, rng)
        idx = rng.choice(n_forget, size=min(config.batch_size, n_forget),
                         replace=False)
        images = task.forget_images[idx]
        prompt_rows = _perturbed_prompt_rows(task, len(idx), rng)

        for _ in range(config.gen_steps):
            if not config.use_adv_perturb:
                break
            total, parts, out, gen_tensors = total_objective(
                state, gen, encoder, images, prompt_rows, task, selection,
                config, trainable="none", gen_trainable=True)
            objective = total if config.generator_objective == "full" else None
            if objective is None:
                # Rebuild just L_f? The full graph already contains it; take
                # gradients of L_f alone by backprop from that node.
                target_cv = task.concept(task.target.id)
                lf = forgetting_loss(out, target_cv, config.ell_minus)
                gmap = G.backward(lf)
            else:
                gmap = G.backward(objective)
            grads = {name: gmap[t] for name, t in gen_tensors.items()
                     if t in gmap}
            gen_opt.ascend(grads)

        parts = {}
        for _ in range(config.disc_steps):
            total, parts, out, _ = total_objective(
                state, gen, encoder, images, prompt_rows, task, selection,
                config, trainable="lora", gen_trainable=False)
            _check_finite(parts["total"], log)
            gmap = G.backward(total)
            disc_opt.step(_lora_grads(gmap, out))
            plateau.step(parts["total"])

        log.append({"step": step, **parts, "lr_disc": disc_opt.lr,
                    "lr_gen": gen_opt.lr if gen_opt.kind == "sgd"
                    else gen_opt.opt.lr,
                    "anchors": list(selection.ids)})
    return state, log


def run_ga(task: UnlearnTask, config: UnlearnConfig, base_state: ModelState):
    """Gradient ascent on the true-label prediction loss of forget samples."""
    config.validate()
    state = _fresh_state(base_state, config)
    opt = AdamW(state.lora_params(), lr=config.lr_disc,
                weight_decay=config.weight_decay)
    rng = np.random.default_rng([config.seed & 0x7FFFFFFF, task.target.id, 50287])
    n = task.forget_images.shape[0]
    log = []
    for step in range(config.steps):
        idx = rng.choice(n, size=min(config.batch_size, n), replace=False)
        loss, out = _ga_style_loss(state, task, task.forget_images[idx],
                                   prompt_rows=_probe_rows(task, len(idx)))
        value = loss.item()
        _check_finite(value, log)
        gmap = G.backward(loss)
        opt.step({k: -g for k, g in _lora_grads(gmap, out).items()})
        log.append({"step": step, "forget_loss": value, "lr": opt.lr})
    return state, log


def run_ga_kl(task: UnlearnTask, config: UnlearnConfig,
              base_state: ModelState):
    """GA plus a KL penalty tying retain-sample predictions to a reference
    distribution (frozen original model by default)."""
    config.validate()
    state = _fresh_state(base_state, config)
    opt = AdamW(state.lora_params(), lr=config.lr_disc,
                weight_decay=config.weight_decay)
    rng = np.random.default_rng([config.seed & 0x7FFFFFFF, task.target.id, 60317])
    nf, nr = task.forget_images.shape[0], task.retain_images.shape[0]
    log = []
    for step in range(config.steps):
        fidx = rng.choice(nf, size=min(config.batch_size, nf), replace=False)
        ridx = rng.choice(nr, size=min(config.batch_size, nr), replace=False)
        floss, fout = _ga_style_loss(state, task, task.forget_images[fidx],
                                     prompt_rows=_probe_rows(task, len(fidx)))

        retain_rows = _probe_rows(task, len(ridx))
        ref_state = base_state if config.ga_kl_reference == "frozen" else state
        ref = forward(ref_state, task.retain_images[ridx], retain_rows,
                      check_range=False).probs.data
        cur = forward(state, task.retain_images[ridx], retain_rows,
                      trainable="lora", check_range=False)
        b, t, v = cur.probs.shape
        kl = nnops.kl_rows(G.reshape(cur.probs, (b * t, v)),
                           ref.reshape(b * t, v))
        objective = G.add(G.scalar_mul(floss, -1.0),
                          G.scalar_mul(kl, config.ga_kl_beta))
        value = objective.item()
        _check_finite(value, log)
        gmap = G.backward(objective)
        grads = _lora_grads(gmap, fout)
        for name, g in _lora_grads(gmap, cur).items():
            grads[name] = grads.get(name, 0.0) + g
        opt.step(grads)
        log.append({"step": step, "forget_loss": floss.item(),
                    "kl": kl.item(), "lr": opt.lr})
    return state, log


def run_po(task: UnlearnTask, config: UnlearnConfig, base_state: ModelState):
    """Preference optimization: steer forget-query answers to abstention."""
    config.validate()
    state = _fresh_state(base_state, config)
    opt = AdamW(state.lora_params(), lr=config.lr_disc,
                weight_decay=config.weight_decay)
    rng = np.random.default_rng([config.seed & 0x7FFFFFFF, task.target.id, 70423])
    n = task.forget_images.shape[0]
    abstain = encode_answer(("unknown",), task.vocab, state.geometry.out_slots)
    log = []
    for step in range(config.steps):
        idx = rng.choice(n, size=min(config.batch_size, n), replace=False)
        out = forward(state, task.forget_images[idx],
                      _perturbed_prompt_rows(task, len(idx), rng),
                      trainable="lora", check_range=False)
        b, t, v = out.logits.shape
        targets = np.tile(abstain, (b, 1)).reshape(-1)
        loss = nnops.cross_entropy_rows(G.reshape(out.logits, (b * t, v)),
                                        targets)
        value = loss.item()
        _check_finite(value, log)
        gmap = G.backward(loss)
        opt.step(_lora_grads(gmap, out))
        log.append({"step": step, "po_loss": value, "lr": opt.lr})
    return state, log


RUNNERS = {"auvic": run_auvic, "ga": run_ga, "ga_kl": run_ga_kl, "po": run_po}


def matrix_config(seed=0) -> UnlearnConfig:
    """Gradient-ascent setting for cross-concept forgetting-matrix rows:
    tiny adapters on the patch embedding at a gentle learning rate, so the
    ascent's collateral damage travels along pixel-level similarity instead
    of being absorbed by high-rank adapter capacity."""
    return UnlearnConfig(steps=65, lora_rank=2, lora_alpha=4.0, lr_disc=1e-3,
                         lora_targets=("patch_W",), seed=seed)


def save_train_log(log, path):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_train_log(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
