"""Toy multimodal recognizer: frozen base weights + low-rank adapters.

Maps (image, prompt) to per-slot vocabulary logits. The vision path is a
patch embedding followed by a two-layer MLP (the adapter targets); patch
features are max+mean pooled, fused with a bag-of-words prompt embedding,
and decoded by a fixed-slot output head. Concept recognition reads the
max logit over the concept's name tokens across all output slots.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from unlearnlab import grad as G
from unlearnlab import nnops
from unlearnlab.data import PAD, Dataset, IdentitySpec, Vocab, caption_reference
from unlearnlab.errors import (ConfigError, ContractError, InputError,
                               TrainingFailure)
from unlearnlab.optim import AdamW

CAPTION_PROMPT = ("who", "is", "in", "the", "photo")


@dataclass(frozen=True)
class ModelGeometry:
    height: int = 32
    width: int = 32
    patch: int = 4
    feat: int = 64
    out_slots: int = 8

    @property
    def n_patches(self):
        return (self.height // self.patch) * (self.width // self.patch)

    @property
    def patch_dim(self):
        return 3 * self.patch * self.patch

    @property
    def image_size(self):
        return 3 * self.height * self.width


@dataclass
class LoraAdapter:
    """Additive low-rank factor pair for one base weight matrix.

    Stored in (d_in x r) @ (r x d_out) orientation to match the x @ W
    forward convention; ``up`` starts at zero so a fresh adapter is the
    identity.
    """
    target: str
    down: np.ndarray  # (d_in, r)
    up: np.ndarray    # (r, d_out)
    rank: int
    alpha: float

    @property
    def scaling(self):
        return self.alpha / self.rank


@dataclass(frozen=True)
class ConceptVocab:
    concept_id: int
    token_ids: tuple[int, ...]

    def __post_init__(self):
        if not self.token_ids:
            raise ContractError("concept token set must be non-empty")


@dataclass
class ModelState:
    geometry: ModelGeometry
    vocab: Vocab
    params: dict[str, np.ndarray]
    lora: list[LoraAdapter] = field(default_factory=list)

    LORA_TARGETS = ("v1_W", "v2_W")

    def base_fingerprint(self):
        return {k: v.tobytes() for k, v in sorted(self.params.items())}

    def lora_params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, ad in enumerate(self.lora):
            out[f"lora{i}_down"] = ad.down
            out[f"lora{i}_up"] = ad.up
        return out

    def clone(self):
        st = ModelState(self.geometry, self.vocab,
                        {k: v.copy() for k, v in self.params.items()})
        st.lora = [LoraAdapter(a.target, a.down.copy(), a.up.copy(), a.rank, a.alpha)
                   for a in self.lora]
        return st


@dataclass
class ModelOutput:
    logits: G.Tensor  # (B, T_out, V)
    probs: G.Tensor   # softmax per slot

    @property
    def batch(self):
        return self.logits.shape[0]


def init_state(geometry: ModelGeometry, vocab: Vocab, seed: int) -> ModelState:
    rng = np.random.default_rng([seed & 0x7FFFFFFF, 20511])
    d = geometry.feat
    pdim = geometry.patch_dim + 2  # patch pixels + normalized grid coords
    v = vocab.size

    def glorot(shape):
        lim = np.sqrt(6.0 / (shape[0] + shape[1]))
        return rng.uniform(-lim, lim, size=shape)

    params = {
        "patch_W": glorot((pdim, d)), "patch_b": np.zeros(d),
        "v1_W": glorot((d, d)), "v1_b": np.zeros(d),
        "v2_W": glorot((d, d)), "v2_b": np.zeros(d),
        "prompt_E": rng.normal(scale=0.1, size=(v, d)),
        "fuse_W": glorot((3 * d, d)), "fuse_b": np.zeros(d),
        "head_W": glorot((d, geometry.out_slots * v)),
        "head_b": np.zeros(geometry.out_slots * v),
    }
    return ModelState(geometry, vocab, params)


def attach_lora(state: ModelState, rank=32, alpha=32.0, seed=0,
                targets=None) -> ModelState:
    """Attach zero-initialized adapters to the given weight matrices
    (default: the vision-MLP weights)."""
    rng = np.random.default_rng([seed & 0x7FFFFFFF, 7177])
    state.lora = []
    for target in targets or ModelState.LORA_TARGETS:
        if target not in state.params:
            raise ConfigError(f"unknown adapter target {target!r}")
        d_in, d_out = state.params[target].shape
        down = rng.normal(scale=1.0 / np.sqrt(d_in), size=(d_in, rank))
        up = np.zeros((rank, d_out))
        state.lora.append(LoraAdapter(target, down, up, rank, float(alpha)))
    return state


# ---------------------------------------------------------------------------
# Patch extraction


_PERM_CACHE: dict[tuple, np.ndarray] = {}
_COORD_CACHE: dict[tuple, np.ndarray] = {}


def _patch_permutation(geo: ModelGeometry) -> np.ndarray:
    key = (geo.height, geo.width, geo.patch)
    if key not in _PERM_CACHE:
        idx = np.arange(geo.image_size).reshape(3, geo.height, geo.width)
        cols = []
        for py in range(geo.height // geo.patch):
            for px in range(geo.width // geo.patch):
                block = idx[:, py * geo.patch:(py + 1) * geo.patch,
                            px * geo.patch:(px + 1) * geo.patch]
                cols.append(block.reshape(-1))
        _PERM_CACHE[key] = np.concatenate(cols)
    return _PERM_CACHE[key]


def _patch_coords(geo: ModelGeometry, batch: int) -> np.ndarray:
    key = (geo.height, geo.width, geo.patch, batch)
    if key not in _COORD_CACHE:
        ny, nx = geo.height // geo.patch, geo.width // geo.patch
        coords = np.array([[py / (ny - 1), px / (nx - 1)]
                           for py in range(ny) for px in range(nx)])
        _COORD_CACHE[key] = np.tile(coords, (batch, 1))
    return _COORD_CACHE[key]


# ---------------------------------------------------------------------------
# Forward


def _param_tensors(state: ModelState, trainable: str):
    if trainable not in ("none", "base", "lora"):
        raise ContractError(f"unknown trainable mode {trainable!r}")
    base_grad = trainable == "base"
    tensors = {k: G.Tensor(v, requires_grad=base_grad)
               for k, v in state.params.items()}
    lora_tensors = {}
    for i, ad in enumerate(state.lora):
        lg = trainable == "lora"
        dt = G.Tensor(ad.down, requires_grad=lg)
        ut = G.Tensor(ad.up, requires_grad=lg)
        lora_tensors[f"lora{i}_down"] = dt
        lora_tensors[f"lora{i}_up"] = ut
        base = tensors[ad.target]
        tensors[ad.target] = G.add(base, G.scalar_mul(G.matmul(dt, ut), ad.scaling))
    return tensors, lora_tensors


def encode_prompt(tokens, vocab: Vocab) -> np.ndarray:
    """Bag-of-words row: token counts normalized by length."""
    row = np.zeros(vocab.size)
    ids = vocab.encode_seq(tokens)
    if not ids:
        raise ContractError("empty prompt")
    for i in ids:
        row[i] += 1.0
    return row / len(ids)


def encode_answer(tokens, vocab: Vocab, out_slots: int) -> np.ndarray:
    ids = vocab.encode_seq(tokens)[:out_slots]
    pad = vocab.encode(PAD)
    return np.array(ids + [pad] * (out_slots - len(ids)), dtype=np.intp)


def forward(state: ModelState, images, prompt_rows, *, trainable="none",
            image_tensor: G.Tensor | None = None, check_range=True):
    """Run the recognizer.

    images: (B, 3, H, W) or (B, 3*H*W) array (ignored when image_tensor is
    given); prompt_rows: (B, V) bag-of-words rows.
    """
    geo = state.geometry
    if image_tensor is not None:
        x = image_tensor
        batch = x.shape[0]
    else:
        arr = np.asarray(images, dtype=np.float64).reshape(-1, geo.image_size)
        if check_range and (arr.min() < -1e-12 or arr.max() > 1.0 + 1e-12):
            raise InputError("pixel values must lie in [0, 1]")
        x = G.constant(arr)
        batch = arr.shape[0]
    prompt_rows = np.asarray(prompt_rows, dtype=np.float64).reshape(batch, -1)
    if prompt_rows.shape[1] != state.vocab.size:
        raise ContractError("prompt row width must equal vocab size")

    tensors, lora_tensors = _param_tensors(state, trainable)
    p = geo.n_patches

    patches = G.reshape(G.permute_cols(x, _patch_permutation(geo)),
                        (batch * p, geo.patch_dim))
    inp = G.concat([patches, G.constant(_patch_coords(geo, batch))], axis=1)
    f0 = G.relu(nnops.affine(inp, tensors["patch_W"], tensors["patch_b"]))
    h1 = G.relu(nnops.affine(f0, tensors["v1_W"], tensors["v1_b"]))
    h2 = G.relu(nnops.affine(h1, tensors["v2_W"], tensors["v2_b"]))
    h3 = G.reshape(h2, (batch, p, geo.feat))
    pooled = G.concat([G.max_reduce(h3, axis=1), G.mean(h3, axis=1)], axis=1)

    prompt_feat = G.matmul(G.constant(prompt_rows), tensors["prompt_E"])
    fused = G.relu(nnops.affine(G.concat([pooled, prompt_feat], axis=1),
                                tensors["fuse_W"], tensors["fuse_b"]))
    logits_flat = nnops.affine(fused, tensors["head_W"], tensors["head_b"])
    logits = G.reshape(logits_flat, (batch, geo.out_slots, state.vocab.size))
    out = ModelOutput(logits=logits, probs=G.softmax(logits))
    out._lora_tensors = lora_tensors  # noqa: SLF001 - used by the trainers
    out._base_tensors = tensors
    return out


def concept_vocab_for(spec: IdentitySpec, vocab: Vocab) -> ConceptVocab:
    return ConceptVocab(spec.id, tuple(vocab.encode_seq(spec.name)))


def concept_logits_batch(output: ModelOutput, concept: ConceptVocab) -> G.Tensor:
    """Per-sample max logit over the concept's tokens and all slots: (B,)."""
    b, t, v = output.logits.shape
    flat = G.reshape(output.logits, (b * t, v))
    sel = G.permute_cols(flat, np.asarray(concept.token_ids, dtype=np.intp))
    return G.max_reduce(G.reshape(sel, (b, t * len(concept.token_ids))), axis=1)


def concept_logit(output: ModelOutput, concept: ConceptVocab) -> G.Tensor:
    if output.batch != 1:
        raise ContractError("concept_logit expects a single-sample output")
    return G.reshape(concept_logits_batch(output, concept), ())


def recognized(output: ModelOutput, concept: ConceptVocab) -> bool:
    """Strict decision rule: sigmoid(z) > 0.5, i.e. z > 0."""
    return bool(concept_logit(output, concept).data > 0.0)


def recognized_batch(output: ModelOutput, concept: ConceptVocab) -> np.ndarray:
    return concept_logits_batch(output, concept).data > 0.0


def generate_caption(state: ModelState, image, prompt_tokens=CAPTION_PROMPT):
    """Per-slot argmax tokens with padding stripped."""
    row = encode_prompt(prompt_tokens, state.vocab)
    out = forward(state, np.asarray(image)[None], row[None])
    idx = out.logits.data[0].argmax(axis=1)
    toks = [state.vocab.tokens[i] for i in idx]
    return [t for t in toks if t != PAD]


# ---------------------------------------------------------------------------
# Base training


@dataclass
class BaseTrainConfig:
    lr: float = 2e-3
    batch_size: int = 32
    max_epochs: int = 60
    min_epochs: int = 4
    weight_decay: float = 1e-5
    bce_weight: float = 1.0
    target_single_recall: float = 0.95
    target_group_recall: float = 0.90
    hard_floor: float = 0.90
    seed: int = 0


@dataclass
class EncodedSet:
    """Dataset flattened to dense arrays for batched training."""
    images: np.ndarray        # (N, 3*H*W)
    prompts: np.ndarray       # (N, V)
    answers: np.ndarray       # (N, T_out)
    presence: np.ndarray      # (N, n_identities)
    sample_refs: list


def encode_dataset(ds: Dataset, vocab: Vocab, geo: ModelGeometry) -> EncodedSet:
    n_id = len(ds.roster)
    id_index = {s.id: k for k, s in enumerate(ds.roster)}
    imgs, prompts, answers, presence = [], [], [], []
    for s in ds.samples:
        imgs.append(ds.images[s.image_id].reshape(-1))
        prompts.append(encode_prompt(s.query, vocab))
        answers.append(encode_answer(s.answer, vocab, geo.out_slots))
        row = np.zeros(n_id)
        for m in s.members:
            row[id_index[m]] = 1.0
        presence.append(row)
    return EncodedSet(np.array(imgs), np.array(prompts),
                      np.array(answers, dtype=np.intp), np.array(presence),
                      list(ds.samples))


def _batch_loss(state, enc: EncodedSet, idx, concepts, trainable, bce_weight,
                pos_target=1.0, neg_target=0.0):
    out = forward(state, enc.images[idx], enc.prompts[idx], trainable=trainable,
                  check_range=False)
    b, t, v = out.logits.shape
    ce = nnops.cross_entropy_rows(G.reshape(out.logits, (b * t, v)),
                                  enc.answers[idx].reshape(-1))
    zs = [G.reshape(concept_logits_batch(out, cv), (b, 1)) for cv in concepts]
    zmat = G.concat(zs, axis=1)
    targets = np.where(enc.presence[idx] > 0, pos_target, neg_target)
    bce = G.mean(nnops.bce_with_logits_array(zmat, targets))
    return G.add(ce, G.scalar_mul(bce, bce_weight)), out


def single_recall(state: ModelState, ds: Dataset, concepts) -> float:
    """Fraction of single images whose identity is recognized."""
    recs = [r for r in ds.image_records() if len(r.members) == 1]
    return _recall(state, ds, recs, concepts)


def group_recall(state: ModelState, ds: Dataset, concepts) -> float:
    """Fraction of (group image, member) pairs recognized."""
    recs = [r for r in ds.image_records() if len(r.members) > 1]
    return _recall(state, ds, recs, concepts)


def _recall(state, ds, recs, concepts):
    if not recs:
        return float("nan")
    by_id = {cv.concept_id: cv for cv in concepts}
    probe = encode_prompt(CAPTION_PROMPT, state.vocab)
    hits = total = 0
    for start in range(0, len(recs), 128):
        chunk = recs[start:start + 128]
        imgs = np.array([ds.images[r.image_id].reshape(-1) for r in chunk])
        out = forward(state, imgs, np.tile(probe, (len(chunk), 1)),
                      check_range=False)
        for cid, cv in by_id.items():
            flags = recognized_batch(out, cv)
            for k, r in enumerate(chunk):
                if cid in r.members:
                    total += 1
                    hits += bool(flags[k])
    return hits / total


def verify_labels(ds: Dataset, state: ModelState, max_rejection=0.5):
    """Filter out images whose ground-truth members the model misrecognizes.

    Returns (filtered dataset, report). The report counts verified and
    rejected images and lists rejected image ids. A rejection rate above
    ``max_rejection`` means the recognizer is inadequate for labeling and
    raises TrainingFailure.
    """
    concepts = [concept_vocab_for(s, state.vocab) for s in ds.roster]
    by_id = {cv.concept_id: cv for cv in concepts}
    probe = encode_prompt(CAPTION_PROMPT, state.vocab)
    recs = ds.image_records()
    rejected: set[str] = set()
    for start in range(0, len(recs), 128):
        chunk = recs[start:start + 128]
        imgs = np.array([ds.images[r.image_id].reshape(-1) for r in chunk])
        out = forward(state, imgs, np.tile(probe, (len(chunk), 1)),
                      check_range=False)
        for cid, cv in by_id.items():
            flags = recognized_batch(out, cv)
            for k, r in enumerate(chunk):
                if cid in r.members and not flags[k]:
                    rejected.add(r.image_id)
    rate = len(rejected) / len(recs) if recs else 0.0
    report = {
        "total_images": len(recs),
        "rejected_images": len(rejected),
        "rejection_rate": rate,
        "rejected_ids": sorted(rejected),
    }
    if rate > max_rejection:
        raise TrainingFailure(
            f"label verification rejected {rate:.1%} of images "
            f"(limit {max_rejection:.0%}): base model inadequate")
    filtered = Dataset(
        roster=ds.roster,
        samples=[s for s in ds.samples if s.image_id not in rejected],
        images={k: v for k, v in ds.images.items() if k not in rejected},
        target_id=ds.target_id,
        image_members={k: v for k, v in ds.image_members.items()
                       if k not in rejected},
    )
    return filtered, report


def train_base(train_ds: Dataset, val_ds: Dataset, vocab: Vocab,
               config: BaseTrainConfig, geometry: ModelGeometry | None = None):
    """Multi-label recognition + per-slot answer cross-entropy pretraining.

    Returns (state, log). Raises TrainingFailure when the recognition
    floor is not reached within the epoch budget.
    """
    geo = geometry or ModelGeometry()
    state = init_state(geo, vocab, config.seed)
    concepts = [concept_vocab_for(s, vocab) for s in train_ds.roster]
    enc = encode_dataset(train_ds, vocab, geo)
    opt = AdamW(state.params, lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng([config.seed & 0x7FFFFFFF, 3301])
    n = enc.images.shape[0]
    log = {"epoch_loss": [], "single_recall": [], "group_recall": []}

    for epoch in range(config.max_epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, out = _batch_loss(state, enc, idx, concepts, "base",
                                    config.bce_weight)
            gmap = G.backward(loss)
            named = {name: gmap[t] for name, t in out._base_tensors.items()
                     if t in gmap}
            opt.step(named)
            losses.append(loss.item())
        sr = single_recall(state, val_ds, concepts)
        gr = group_recall(state, val_ds, concepts)
        log["epoch_loss"].append(float(np.mean(losses)))
        log["single_recall"].append(sr)
        log["group_recall"].append(gr)
        if (epoch + 1 >= config.min_epochs
                and sr >= config.target_single_recall
                and (np.isnan(gr) or gr >= config.target_group_recall)):
            break

    sr = log["single_recall"][-1]
    if sr < config.hard_floor:
        raise TrainingFailure(
            f"base training stalled: single recall {sr:.3f} < "
            f"{config.hard_floor} after {len(log['epoch_loss'])} epochs")
    return state, log


# ---------------------------------------------------------------------------
# Checkpoints


CHECKPOINT_VERSION = 1


def save_checkpoint(state: ModelState, path):
    meta = {
        "version": CHECKPOINT_VERSION,
        "geometry": {"height": state.geometry.height, "width": state.geometry.width,
                     "patch": state.geometry.patch, "feat": state.geometry.feat,
                     "out_slots": state.geometry.out_slots},
        "vocab": state.vocab.tokens,
        "lora": [{"target": a.target, "rank": a.rank, "alpha": a.alpha}
                 for a in state.lora],
    }
    arrays = {f"p_{k}": v for k, v in state.params.items()}
    for i, a in enumerate(state.lora):
        arrays[f"l{i}_down"] = a.down
        arrays[f"l{i}_up"] = a.up
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(),
                                   dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path) -> ModelState:
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        if meta["version"] != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {meta['version']}")
        geo = ModelGeometry(**meta["geometry"])
        state = ModelState(geo, Vocab(meta["vocab"]),
                           {k[2:]: z[k].copy() for k in z.files
                            if k.startswith("p_")})
        for i, a in enumerate(meta["lora"]):
            state.lora.append(LoraAdapter(a["target"], z[f"l{i}_down"].copy(),
                                          z[f"l{i}_up"].copy(), a["rank"],
                                          a["alpha"]))
    return state
