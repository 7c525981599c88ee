"""Multimodal perturbation engine: frozen feature encoder, feature-to-
perturbation MLP, l-infinity bounded image perturbation, prompt perturbation.

The encoder is a seeded random projection (a stand-in for a pretrained
feature extractor): it only needs to be a fixed, identity-discriminating
map, and it never receives gradients. The generator is three affine
layers with ReLU between and a final tanh scaled by the pixel budget, so
the bound |delta| <= eps holds by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from unlearnlab import grad as G
from unlearnlab import nnops
from unlearnlab.data import IdentitySpec
from unlearnlab.errors import ConfigError, InputError

EPSILON_DEFAULT = 8.0 / 255.0

DEFAULT_PROMPT_TEMPLATES = [
    "hello is {name} in the photo",
    "hi tell me is {name} in the picture",
    "can you see {name} in this picture",
    "please describe who is in the photo",
    "nice day please describe the photo",
    "quick look now who is at slot zero",
    "is {name} in the photo",
    "describe the picture",
]


@dataclass
class FrozenEncoder:
    """Seeded random patch projection producing a d_h feature vector."""

    image_size: int
    d_h: int = 64
    seed: int = 0
    _w: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        rng = np.random.default_rng([self.seed & 0x7FFFFFFF, 60913])
        self._w = rng.normal(scale=1.0 / np.sqrt(self.image_size),
                             size=(self.image_size, self.d_h))
        self._w.setflags(write=False)

    def features(self, images) -> np.ndarray:
        """(B, d_h) features; pure numpy, never on the gradient tape."""
        arr = np.asarray(images, dtype=np.float64).reshape(-1, self.image_size)
        if arr.shape[1] != self.image_size:
            raise InputError(f"expected flattened images of size {self.image_size}")
        return np.tanh(arr @ self._w)


@dataclass
class GeneratorParams:
    """Three-layer perturbation MLP. Final layer zero-initialized so a
    fresh generator perturbs nothing."""

    params: dict[str, np.ndarray]
    epsilon: float
    d_h: int
    hidden: int
    image_size: int

    def param_names(self):
        return sorted(self.params)


def init_generator(d_h: int, image_size: int, hidden=1024,
                   epsilon=EPSILON_DEFAULT, seed=0) -> GeneratorParams:
    rng = np.random.default_rng([seed & 0x7FFFFFFF, 90617])

    def scaled(shape):
        return rng.uniform(-1.0, 1.0, size=shape) * np.sqrt(3.0 / shape[0])

    params = {
        "g1_W": scaled((d_h, hidden)), "g1_b": np.zeros(hidden),
        "g2_W": scaled((hidden, hidden)), "g2_b": np.zeros(hidden),
        "g3_W": np.zeros((hidden, image_size)), "g3_b": np.zeros(image_size),
    }
    return GeneratorParams(params, float(epsilon), d_h, hidden, image_size)


def generate_perturbation(h, gen: GeneratorParams, *, trainable=False):
    """delta = eps * tanh(MLP(h)), shape (B, image_size).

    Returns (delta tensor, {name: leaf tensor}) so trainers can read
    gradients for the generator parameters.
    """
    h = np.asarray(h, dtype=np.float64).reshape(-1, gen.d_h)
    tensors = {k: G.Tensor(v, requires_grad=trainable)
               for k, v in gen.params.items()}
    z1 = G.relu(nnops.affine(G.constant(h), tensors["g1_W"], tensors["g1_b"]))
    z2 = G.relu(nnops.affine(z1, tensors["g2_W"], tensors["g2_b"]))
    raw = nnops.affine(z2, tensors["g3_W"], tensors["g3_b"])
    delta = G.scalar_mul(G.tanh(raw), gen.epsilon)
    return delta, tensors


def perturb_image(images, gen: GeneratorParams, encoder: FrozenEncoder,
                  *, trainable=False):
    """x' = clip(x + delta, 0, 1); returns (x' tensor, generator tensors)."""
    arr = np.asarray(images, dtype=np.float64).reshape(-1, gen.image_size)
    if arr.min() < -1e-12 or arr.max() > 1.0 + 1e-12:
        raise InputError("pixel values must lie in [0, 1]")
    delta, tensors = generate_perturbation(encoder.features(arr), gen,
                                           trainable=trainable)
    x_adv = G.clip(G.add(G.constant(arr), delta), 0.0, 1.0)
    return x_adv, tensors


def load_prompt_templates(path=None) -> list[str]:
    if path is None:
        return list(DEFAULT_PROMPT_TEMPLATES)
    lines = [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines()]
    templates = [ln for ln in lines if ln and not ln.startswith("#")]
    if not templates:
        raise ConfigError(f"prompt template pool {path} is empty")
    return templates


def save_prompt_templates(templates, path):
    Path(path).write_text("\n".join(templates) + "\n", encoding="utf-8")


def perturb_prompt(target: IdentitySpec, templates, rng) -> tuple[str, ...]:
    """Sample a template and prepend the target's name tokens."""
    if not templates:
        raise ConfigError("prompt template pool is empty")
    template = templates[int(rng.integers(len(templates)))]
    body = template.format(name=target.full_name)
    return tuple(target.name) + tuple(body.split())
