"""Dynamic anchor preservation: pick the concepts most similar to the
unlearning target via Gumbel-perturbed softmax over embedding cosines."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from unlearnlab.data import Vocab
from unlearnlab.errors import ConfigError, ContractError, DomainError


@dataclass
class AnchorConfig:
    tau: float = 1.0
    m: int = 2
    resample_period: int = 1
    use_gumbel: bool = True  # False: deterministic top-m by raw cosine

    def validate(self, k: int):
        if self.tau <= 0:
            raise ConfigError("anchor temperature must be positive")
        if not 1 <= self.m <= k:
            raise ConfigError(f"preserve-set size m={self.m} out of range for K={k}")
        if self.resample_period < 1:
            raise ConfigError("resample period must be >= 1")


@dataclass
class AnchorSelection:
    ids: tuple[int, ...]          # selected concept ids, best first
    weights: np.ndarray           # per-selected weight, renormalized over ids
    full_weights: np.ndarray      # softmax over all K candidates


def mean_token_embedding(name_tokens, vocab: Vocab, table: np.ndarray) -> np.ndarray:
    """Arithmetic mean of the name's token embedding rows."""
    ids = vocab.encode_seq(name_tokens)
    if not ids:
        raise ContractError("name must tokenize to at least one token")
    return np.asarray(table)[ids].mean(axis=0)


def similarity_scores(target_emb, candidate_embs) -> np.ndarray:
    """Cosine similarity between the target and each candidate embedding."""
    t = np.asarray(target_emb, dtype=np.float64)
    tn = np.linalg.norm(t)
    if tn == 0.0:
        raise DomainError("target embedding has zero norm")
    scores = np.empty(len(candidate_embs))
    for i, c in enumerate(candidate_embs):
        c = np.asarray(c, dtype=np.float64)
        cn = np.linalg.norm(c)
        if cn == 0.0:
            raise DomainError(f"candidate {i} embedding has zero norm")
        scores[i] = float(t @ c) / (tn * cn)
    return scores


def gumbel_softmax_weights(scores, tau: float, rng=None) -> np.ndarray:
    """softmax((s + g) / tau) with standard Gumbel noise g (zero if rng is None)."""
    s = np.asarray(scores, dtype=np.float64)
    if rng is not None:
        u = rng.random(s.shape)
        s = s + (-np.log(-np.log(np.clip(u, 1e-300, 1.0 - 1e-16))))
    z = s / tau
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def select_anchors(scores, candidate_ids, config: AnchorConfig,
                   rng=None) -> AnchorSelection:
    """Draw the preserve set: top-m of the Gumbel-softmax weights.

    With ``use_gumbel`` off (or rng None) the choice degenerates to the
    deterministic top-m by raw cosine score.
    """
    scores = np.asarray(scores, dtype=np.float64)
    candidate_ids = list(candidate_ids)
    if scores.shape[0] != len(candidate_ids):
        raise ContractError("scores and candidate ids must align")
    config.validate(len(candidate_ids))
    noise_rng = rng if config.use_gumbel else None
    w = gumbel_softmax_weights(scores, config.tau, noise_rng)
    top = np.argsort(-w, kind="stable")[:config.m]
    sel_w = w[top]
    return AnchorSelection(ids=tuple(candidate_ids[i] for i in top),
                           weights=sel_w / sel_w.sum(), full_weights=w)
