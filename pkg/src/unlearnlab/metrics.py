"""Evaluation suite: forgetting rate/matrix, TFA, NTRA, GRF-F1, efficacy,
generality, masked perplexity, recall and BLEU.

Rate metrics are computed from per-image recognition decisions, which can
be dumped to CSV so every aggregate is recountable from raw decisions.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from unlearnlab.data import (HUE_NAMES, SHAPE_NAMES, Dataset, IdentitySpec,
                             caption_reference)
from unlearnlab.errors import ContractError
from unlearnlab.model import (CAPTION_PROMPT, ModelState, concept_logits_batch,
                              concept_vocab_for, encode_prompt, forward,
                              generate_caption)
from unlearnlab.unlearn import (RUNNERS, UnlearnConfig, build_task,
                                matrix_config)


@dataclass
class Decision:
    """One (image, concept) recognition decision."""
    image_id: str
    category: str
    concept_id: int
    present: bool
    logit: float
    recognized: bool


@dataclass
class MetricsReport:
    method: str
    target_id: int
    tfa: float
    ntra: float
    grf_f1: float
    efficacy: float
    generality: float
    perplexity: float
    extras: dict = field(default_factory=dict)

    COLUMNS = ("method", "target_id", "tfa", "ntra", "grf_f1", "efficacy",
               "generality", "perplexity")

    def row(self):
        return [self.method, self.target_id,
                f"{self.tfa:.2f}", f"{self.ntra:.2f}", f"{self.grf_f1:.2f}",
                f"{self.efficacy:.4f}", f"{self.generality:.4f}",
                f"{self.perplexity:.4f}"]


# ---------------------------------------------------------------------------
# Decisions


def evaluate_decisions(state: ModelState, ds: Dataset,
                       prompt=CAPTION_PROMPT) -> list[Decision]:
    """Recognition decision for every (unique image, roster concept) pair."""
    recs = ds.image_records()
    concepts = [(s.id, concept_vocab_for(s, state.vocab)) for s in ds.roster]
    probe = encode_prompt(prompt, state.vocab)
    out_rows: list[Decision] = []
    for start in range(0, len(recs), 128):
        chunk = recs[start:start + 128]
        imgs = np.array([ds.images[r.image_id].reshape(-1) for r in chunk])
        out = forward(state, imgs, np.tile(probe, (len(chunk), 1)),
                      check_range=False)
        for cid, cv in concepts:
            z = concept_logits_batch(out, cv).data
            for k, r in enumerate(chunk):
                out_rows.append(Decision(r.image_id, r.category, cid,
                                         cid in r.members, float(z[k]),
                                         bool(z[k] > 0.0)))
    return out_rows


def save_decisions(decisions, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "category", "concept_id", "present",
                    "logit", "recognized"])
        for d in decisions:
            w.writerow([d.image_id, d.category, d.concept_id, int(d.present),
                        repr(d.logit), int(d.recognized)])


def load_decisions(path) -> list[Decision]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            out.append(Decision(rec["image_id"], rec["category"],
                                int(rec["concept_id"]), bool(int(rec["present"])),
                                float(rec["logit"]), bool(int(rec["recognized"]))))
    return out


# ---------------------------------------------------------------------------
# Rate metrics (aggregations over decisions)


def tfa(decisions, target_id) -> float:
    """Percent of target-containing group images where the target is not
    recognized."""
    rows = [d for d in decisions
            if d.category == "Target-Group" and d.concept_id == target_id]
    if not rows:
        raise ContractError("no Target-Group decisions")
    return 100.0 * sum(not d.recognized for d in rows) / len(rows)


def ntra(decisions, target_id) -> float:
    """Percent of present non-target members of group scenes still
    recognized."""
    rows = [d for d in decisions
            if d.category in ("Target-Group", "Non-Target-Group")
            and d.concept_id != target_id and d.present]
    if not rows:
        raise ContractError("no non-target group decisions")
    return 100.0 * sum(d.recognized for d in rows) / len(rows)


def grf_f1(tfa_pct: float, ntra_pct: float) -> float:
    """Harmonic mean of TFA and NTRA (percent)."""
    for v in (tfa_pct, ntra_pct):
        if not 0.0 <= v <= 100.0:
            raise ContractError(f"rate {v} outside [0, 100]")
    if tfa_pct == 0.0 and ntra_pct == 0.0:
        return 0.0
    return 2.0 * tfa_pct * ntra_pct / (tfa_pct + ntra_pct)


def efficacy(decisions, target_id) -> float:
    """Fraction of target single images where the target is not recognized."""
    rows = [d for d in decisions
            if d.category == "Target-Single" and d.concept_id == target_id]
    if not rows:
        raise ContractError("no Target-Single decisions")
    return sum(not d.recognized for d in rows) / len(rows)


def forgetting_rate(decisions, concept_id) -> float:
    """Fraction of the concept's single images where it is misrecognized."""
    rows = [d for d in decisions
            if d.concept_id == concept_id and d.present
            and d.image_id.startswith("single")]
    if not rows:
        raise ContractError(f"no single-image decisions for concept {concept_id}")
    return sum(not d.recognized for d in rows) / len(rows)


# ---------------------------------------------------------------------------
# Forgetting matrix


def forgetting_matrix(base_state: ModelState, train_ds: Dataset,
                      eval_ds: Dataset, config: UnlearnConfig | None = None,
                      method="ga", jobs=1):
    """Row i: model unlearned on concept i; column j: forgetting rate of j.

    Rows train on the concept's single images only, so spillover measures
    representational overlap rather than scene co-occurrence. Returns
    (matrix, row_valid flags); a row that fails to train is flagged
    invalid and left as NaN. Rows are independent, so ``jobs`` workers may
    compute them concurrently without changing the result.
    """
    config = config or matrix_config()
    roster = train_ds.roster
    n = len(roster)
    mat = np.full((n, n), np.nan)
    valid = np.ones(n, dtype=bool)
    runner = RUNNERS[method]

    def row(i):
        spec = roster[i]
        task = build_task(train_ds, base_state.vocab, spec.id,
                          base_state.geometry.out_slots, singles_only=True)
        state, _ = runner(task, config, base_state)
        decisions = evaluate_decisions(state, eval_ds)
        return [forgetting_rate(decisions, other.id) for other in roster]

    def fill(i, fn):
        try:
            mat[i, :] = fn()
        except Exception:  # noqa: BLE001 - row flagged, matrix continues
            valid[i] = False

    if jobs and jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = {i: pool.submit(row, i) for i in range(n)}
        for i, fut in futures.items():
            fill(i, fut.result)
    else:
        for i in range(n):
            fill(i, lambda i=i: row(i))
    return mat, valid


ABLATION_VARIANTS = ("full", "wo_gumbel", "wo_adv_perturb", "wo_both")


def ablation_table(base_state: ModelState, train_ds: Dataset,
                   eval_ds: Dataset, config: UnlearnConfig,
                   target_id: int | None = None):
    """Run the four adversarial-unlearning variants and score each.

    Variants toggle the Gumbel anchor sampling (replaced by fixed cosine
    top-m) and the adversarial perturbation generator (replaced by clean
    images). Returns one dict per variant with tfa/ntra/grf_f1.
    """
    import dataclasses

    target = train_ds.target_id if target_id is None else target_id
    task = build_task(train_ds, base_state.vocab, target,
                      base_state.geometry.out_slots)
    rows = []
    for variant in ABLATION_VARIANTS:
        gumbel = variant in ("full", "wo_adv_perturb")
        adv = variant in ("full", "wo_gumbel")
        cfg = dataclasses.replace(
            config, use_adv_perturb=adv,
            anchor=dataclasses.replace(config.anchor, use_gumbel=gumbel))
        state, _ = RUNNERS["auvic"](task, cfg, base_state)
        decisions = evaluate_decisions(state, eval_ds)
        t, n = tfa(decisions, target), ntra(decisions, target)
        rows.append({"variant": variant, "tfa": t, "ntra": n,
                     "grf_f1": grf_f1(t, n)})
    return rows


def ablation_to_csv(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "tfa", "ntra", "grf_f1"])
        for r in rows:
            w.writerow([r["variant"], f"{r['tfa']:.2f}", f"{r['ntra']:.2f}",
                        f"{r['grf_f1']:.2f}"])


def ablation_markdown(rows) -> str:
    lines = ["| Variant | TFA (%) | NTRA (%) | GRF-F1 (%) |", "|---|---|---|---|"]
    for r in rows:
        lines.append(f"| {r['variant']} | {r['tfa']:.2f} | {r['ntra']:.2f} | "
                     f"{r['grf_f1']:.2f} |")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Generality (held-out attribute task)


def generality(state: ModelState, heldout_ds: Dataset,
               train_ds: Dataset | None = None,
               exclude_ids: tuple[int, ...] = ()) -> float:
    """Exact-match accuracy on held-out attribute (color/shape) queries.

    ``exclude_ids`` drops queries that probe the named identities, so the
    metric measures retention on tasks unrelated to the unlearning target.
    """
    if train_ds is not None:
        train_keys = {ds_img.tobytes() for ds_img in train_ds.images.values()}
        for img in heldout_ds.images.values():
            if img.tobytes() in train_keys:
                raise ContractError("held-out set overlaps training images")
    answerable = {"color": set(HUE_NAMES), "shape": set(SHAPE_NAMES)}
    # Only answerable queries count: asking the color of an identity that is
    # absent from the image has the answer "unknown", which is outside the
    # attribute class sets this metric scores against.
    excluded_names = [tuple(s.name) for s in heldout_ds.roster
                      if s.id in set(exclude_ids)]
    samples = [s for s in heldout_ds.samples
               if s.kind in ("color", "shape")
               and s.answer[0] in answerable[s.kind]
               and not any(s.query[-len(n):] == n for n in excluded_names)]
    if not samples:
        raise ContractError("held-out set has no attribute queries")
    class_ids = {
        "color": np.array(state.vocab.encode_seq(HUE_NAMES), dtype=np.intp),
        "shape": np.array(state.vocab.encode_seq(SHAPE_NAMES), dtype=np.intp),
    }
    hits = 0
    for start in range(0, len(samples), 128):
        chunk = samples[start:start + 128]
        imgs = np.array([heldout_ds.images[s.image_id].reshape(-1)
                         for s in chunk])
        prompts = np.array([encode_prompt(s.query, state.vocab) for s in chunk])
        out = forward(state, imgs, prompts, check_range=False)
        for k, s in enumerate(chunk):
            # Scored against the query's attribute class set (max logit over
            # answer slots per class), so a random model sits at chance =
            # 1 / #classes.
            ids = class_ids[s.kind]
            pred = ids[out.logits.data[k][:, ids].max(axis=0).argmax()]
            hits += state.vocab.tokens[pred] == s.answer[0]
    return hits / len(samples)


# ---------------------------------------------------------------------------
# Perplexity


def masked_perplexity(state: ModelState, image, reference_tokens,
                      forget_tokens, prompt=CAPTION_PROMPT,
                      floor=1e-12) -> float:
    """Teacher-forced caption perplexity with forget-set tokens scored at
    uniform probability 1/V."""
    refs = list(reference_tokens)
    if not refs:
        raise ContractError("empty reference caption")
    slots = state.geometry.out_slots
    if len(refs) > slots:
        refs = refs[:slots]
    row = encode_prompt(prompt, state.vocab)
    out = forward(state, np.asarray(image)[None], row[None], check_range=False)
    probs = out.probs.data[0]
    v = state.vocab.size
    forget = set(forget_tokens)
    logps = []
    for t, tok in enumerate(refs):
        if tok in forget:
            p = 1.0 / v
        else:
            p = probs[t, state.vocab.encode(tok)]
        logps.append(np.log(max(p, floor)))
    return float(np.exp(-np.mean(logps)))


def perplexity_over(state: ModelState, ds: Dataset, target: IdentitySpec,
                    max_images=60) -> float:
    """Mean masked caption perplexity over benchmark images; the mask holds
    the target's name tokens."""
    recs = ds.image_records()[:max_images]
    forget = set(target.name)
    vals = [masked_perplexity(
        state, ds.images[r.image_id],
        caption_reference(r.members, r.positions, ds.roster), forget)
        for r in recs]
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# Recall and BLEU


def _ngram_counts(tokens, n):
    counts = {}
    for i in range(len(tokens) - n + 1):
        g = tuple(tokens[i:i + n])
        counts[g] = counts.get(g, 0) + 1
    return counts


def bleu(candidate, reference, max_n=4) -> float:
    """Smoothing-free BLEU: geometric mean of modified n-gram precisions
    times the brevity penalty; zero when any n-gram level has zero matches.
    The order is capped at the shorter sequence length so short captions
    are scored on the levels they can actually populate."""
    if not reference:
        raise ContractError("empty reference")
    cand, ref = list(candidate), list(reference)
    if not cand:
        return 0.0
    precisions = []
    for n in range(1, min(max_n, len(cand), len(ref)) + 1):
        cc = _ngram_counts(cand, n)
        rc = _ngram_counts(ref, n)
        clipped = sum(min(c, rc.get(g, 0)) for g, c in cc.items())
        precisions.append(clipped / sum(cc.values()))
    if any(p == 0.0 for p in precisions):
        return 0.0
    bp = 1.0 if len(cand) > len(ref) else np.exp(1.0 - len(ref) / len(cand))
    return float(bp * np.exp(np.mean(np.log(precisions))))


def recall_and_bleu(state: ModelState, ds: Dataset, spec: IdentitySpec):
    """Recognition recall on the concept's singles plus mean caption BLEU
    against the reference caption."""
    recs = [r for r in ds.image_records()
            if r.members == (spec.id,)]
    if not recs:
        raise ContractError(f"no single images for concept {spec.id}")
    decisions = evaluate_decisions(state, ds)
    single_ids = {r.image_id for r in recs}
    rows = [d for d in decisions
            if d.image_id in single_ids and d.concept_id == spec.id]
    recall = sum(d.recognized for d in rows) / len(rows)
    scores = []
    for r in recs:
        cap = generate_caption(state, ds.images[r.image_id])
        ref = list(caption_reference(r.members, r.positions, ds.roster))
        scores.append(bleu(cap, ref))
    return recall, float(np.mean(scores))


# ---------------------------------------------------------------------------
# Full report


def metrics_report(state: ModelState, eval_ds: Dataset, heldout_ds: Dataset,
                   target: IdentitySpec, method: str,
                   decisions=None) -> MetricsReport:
    decisions = decisions if decisions is not None else \
        evaluate_decisions(state, eval_ds)
    t = tfa(decisions, target.id)
    r = ntra(decisions, target.id)
    return MetricsReport(
        method=method, target_id=target.id, tfa=t, ntra=r,
        grf_f1=grf_f1(t, r), efficacy=efficacy(decisions, target.id),
        generality=generality(state, heldout_ds,
                              exclude_ids=(target.id,)),
        perplexity=perplexity_over(state, eval_ds, target))


def write_metrics_csv(reports, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(MetricsReport.COLUMNS)
        for rep in reports:
            w.writerow(rep.row())


def markdown_table(reports) -> str:
    header = "| Method | TFA (%) | NTRA (%) | GRF-F1 (%) | Efficacy | Generality | Perplexity |"
    sep = "|---" * 7 + "|"
    lines = [header, sep]
    for rep in reports:
        lines.append(f"| {rep.method} | {rep.tfa:.2f} | {rep.ntra:.2f} | "
                     f"{rep.grf_f1:.2f} | {rep.efficacy:.4f} | "
                     f"{rep.generality:.4f} | {rep.perplexity:.4f} |")
    return "\n".join(lines) + "\n"


def matrix_to_csv(mat, roster, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["unlearned_target"] + [s.full_name for s in roster])
        for i, spec in enumerate(roster):
            w.writerow([spec.full_name] +
                       [f"{v:.4f}" if np.isfinite(v) else "invalid"
                        for v in mat[i]])
