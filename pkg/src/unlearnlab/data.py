"""Procedural benchmark: parametric glyph identities, scene rendering,
VQA-style queries, dataset serialization.

Identities are small parametric "faces" (hue, shape, stripe count, accent
mark). Visual similarity is a controlled variable: a designated similar
pair differs in exactly one appearance parameter, dissimilar identities
differ in at least three. Images are 3x32x32 float64 in [0, 1], quantized
to 8 bits at render time so the PPM round trip is bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from unlearnlab.errors import ConfigError, ContractError, LayoutError

H = W = 32
CELL = 16  # group scenes are a 2x2 grid of 16x16 cells

HUE_NAMES = ["crimson", "orange", "gold", "lime", "green",
             "teal", "azure", "violet", "magenta", "brown"]
HUE_PALETTE = np.array([
    [0.86, 0.08, 0.24], [1.00, 0.55, 0.00], [1.00, 0.84, 0.00],
    [0.60, 0.98, 0.20], [0.00, 0.60, 0.00], [0.00, 0.50, 0.50],
    [0.00, 0.50, 1.00], [0.56, 0.00, 1.00], [1.00, 0.00, 1.00],
    [0.55, 0.27, 0.07],
])
SHAPE_NAMES = ["circle", "square", "triangle", "diamond"]
ACCENT_PALETTE = np.array([
    [1.00, 1.00, 1.00], [0.05, 0.05, 0.05], [1.00, 0.10, 0.10],
    [0.10, 0.10, 1.00], [1.00, 1.00, 0.10], [0.10, 1.00, 1.00],
])
SLOT_WORDS = ["zero", "one", "two", "three"]

GIVEN_NAMES = ["bimo", "caro", "dena", "farn", "golo", "hila", "jori",
               "kemu", "lira", "mopa", "nuvo", "orin"]
FAMILY_NAMES = ["quish", "renn", "sarv", "tullo", "veck", "wemb", "yalt",
                "zogg", "prell", "numb", "ostik", "pavel"]

PAD, UNKNOWN = "<pad>", "unknown"
QUERY_WORDS = ["is", "in", "the", "photo", "who", "at", "slot", "what",
               "color", "shape", "yes", "no", "nobody"]
EXTRA_WORDS = ["hello", "hi", "please", "tell", "me", "describe", "you",
               "see", "can", "picture", "this", "nice", "day", "quick",
               "look", "now"]

QUERY_KINDS = ("presence", "who", "spatial", "color", "shape")

DEFAULT_QUERY_TEMPLATES = {
    "presence": "is {name} in the photo",
    "who": "who is in the photo",
    "spatial": "who is at slot {slot}",
    "color": "what color is {name}",
    "shape": "what shape is {name}",
}


@dataclass(frozen=True)
class IdentitySpec:
    id: int
    name: tuple[str, str]
    hue: int
    shape: int
    stripes: int
    accent: int
    group: int

    @property
    def params(self):
        return (self.hue, self.shape, self.stripes, self.accent)

    @property
    def full_name(self):
        return " ".join(self.name)


@dataclass(frozen=True)
class SceneSpec:
    members: tuple[int, ...]
    positions: tuple[int, ...]  # grid cell index 0..3 per member
    background_seed: int

    def __post_init__(self):
        if len(set(self.members)) != len(self.members):
            raise LayoutError("scene members must be distinct")
        if len(set(self.positions)) != len(self.positions):
            raise LayoutError("scene grid positions overlap")
        if not 1 <= len(self.members) <= 4:
            raise LayoutError("scene holds 1..4 members")


@dataclass
class Sample:
    image_id: str
    members: tuple[int, ...]
    positions: tuple[int, ...]
    category: str  # Target-Single / Non-Target-Single / Target-Group / Non-Target-Group
    kind: str
    query: tuple[str, ...]
    answer: tuple[str, ...]


@dataclass
class BenchmarkConfig:
    n_identities: int = 8
    n_similar_pairs: int = 2
    singles_per_identity: int = 30
    groups_per_identity: int = 20
    queries_per_image: int = 20
    target_id: int = 0
    seed: int = 0
    min_target_group: int = 50
    min_non_target_group: int = 50


@dataclass
class Dataset:
    roster: list[IdentitySpec]
    samples: list[Sample]
    images: dict[str, np.ndarray]
    target_id: int
    image_members: dict[str, tuple[int, ...]] = field(default_factory=dict)

    def image_records(self):
        """One representative record per image (members, positions, category)."""
        seen, out = set(), []
        for s in self.samples:
            if s.image_id not in seen:
                seen.add(s.image_id)
                out.append(s)
        return out


def param_distance(a: IdentitySpec, b: IdentitySpec) -> int:
    return sum(int(x != y) for x, y in zip(a.params, b.params))


def make_roster(n_identities: int, n_similar_pairs: int, seed: int) -> list[IdentitySpec]:
    """Deterministic roster; designated similar pairs occupy consecutive ids."""
    if n_identities < 2:
        raise ConfigError("need at least 2 identities")
    if n_similar_pairs > n_identities // 2:
        raise ConfigError("too many similar pairs for the roster size")
    n_groups = n_identities - n_similar_pairs
    if n_groups > len(HUE_NAMES) or n_identities > len(GIVEN_NAMES):
        raise ConfigError("roster larger than the appearance/name space")

    protos = [(g % len(HUE_PALETTE), g % 4, (g + g // 4) % 4, g % len(ACCENT_PALETTE))
              for g in range(n_groups)]

    specs: list[IdentitySpec] = []
    next_id = 0

    def add(params, group, family=None):
        nonlocal next_id
        # Similar siblings share a family name: the concept vocabularies of
        # a designated pair overlap on one token, like relatives on a real
        # public-figure roster.
        spec = IdentitySpec(
            id=next_id,
            name=(GIVEN_NAMES[next_id],
                  FAMILY_NAMES[next_id if family is None else family]),
            hue=params[0], shape=params[1], stripes=params[2], accent=params[3],
            group=group)
        specs.append(spec)
        next_id += 1

    def hamming(p, q):
        return sum(int(x != y) for x, y in zip(p, q))

    for g, proto in enumerate(protos):
        proto_id = next_id
        add(proto, g)
        if g < n_similar_pairs:
            sibling = None
            # Prefer changing the accent mark, then stripes, then hue/shape.
            for pi, space in ((3, len(ACCENT_PALETTE)), (2, 4),
                              (0, len(HUE_PALETTE)), (1, 4)):
                for delta in range(1, space):
                    cand = list(proto)
                    cand[pi] = (proto[pi] + delta) % space
                    cand = tuple(cand)
                    others = [p for gg, p in enumerate(protos) if gg != g]
                    if all(hamming(cand, p) >= 3 for p in others):
                        sibling = cand
                        break
                if sibling:
                    break
            if sibling is None:
                raise ConfigError("could not place a similar sibling; shrink the roster")
            add(sibling, g, family=proto_id)

    for a in specs:
        for b in specs:
            if a.id < b.id:
                d = param_distance(a, b)
                if a.group == b.group and d != 1:
                    raise ConfigError("similar pair construction failed")
                if a.group != b.group and d < 3:
                    raise ConfigError("dissimilar identities too close in parameter space")
    return specs


def similar_pairs(roster: list[IdentitySpec]) -> list[tuple[int, int]]:
    by_group: dict[int, list[int]] = {}
    for s in roster:
        by_group.setdefault(s.group, []).append(s.id)
    return [tuple(ids) for ids in by_group.values() if len(ids) == 2]


# ---------------------------------------------------------------------------
# Rendering


def _quantize(img):
    return np.round(img * 255.0) / 255.0


def _draw_glyph(img, spec: IdentitySpec, cx: float, cy: float, r: float):
    yy, xx = np.mgrid[0:img.shape[1], 0:img.shape[2]].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    if spec.shape == 0:  # circle
        mask = dx * dx + dy * dy < r * r
    elif spec.shape == 1:  # square
        mask = np.maximum(np.abs(dx), np.abs(dy)) < 0.85 * r
    elif spec.shape == 2:  # triangle, apex up
        mask = (dy < 0.8 * r) & (dy > -r) & (np.abs(dx) < (dy + r) * 0.55)
    else:  # diamond
        mask = np.abs(dx) + np.abs(dy) < 1.15 * r

    color = HUE_PALETTE[spec.hue]
    for c in range(3):
        img[c][mask] = color[c]

    if spec.stripes > 0:
        band = np.floor((dy + r) / (2.0 * r) * (2 * spec.stripes + 1)).astype(int)
        stripe = mask & (band % 2 == 1)
        for c in range(3):
            img[c][stripe] = color[c] * 0.25

    ar = max(1.4, 0.24 * r)
    ax, ay = cx - 0.55 * r, cy - 0.55 * r
    accent = (xx - ax) ** 2 + (yy - ay) ** 2 < ar * ar
    for c in range(3):
        img[c][accent] = ACCENT_PALETTE[spec.accent][c]


def _background(rng, shape):
    base = 0.10 + 0.08 * rng.random()
    tint = rng.uniform(-0.03, 0.03, size=3)
    img = np.empty(shape)
    for c in range(3):
        img[c] = np.clip(base + tint[c], 0.0, 1.0)
    return img


def render_single(spec: IdentitySpec, variation_seed: int) -> np.ndarray:
    rng = np.random.default_rng([variation_seed & 0x7FFFFFFF, spec.id, 977])
    img = _background(rng, (3, H, W))
    cx = W / 2 + rng.uniform(-2, 2)
    cy = H / 2 + rng.uniform(-2, 2)
    r = 10.0 * rng.uniform(0.9, 1.1)
    _draw_glyph(img, spec, cx, cy, r)
    return _quantize(img)


def render_group(scene: SceneSpec, roster: list[IdentitySpec]) -> np.ndarray:
    by_id = {s.id: s for s in roster}
    rng = np.random.default_rng([scene.background_seed & 0x7FFFFFFF, 1553])
    img = _background(rng, (3, H, W))
    # Render in position order so member-list permutations are no-ops.
    for member, pos in sorted(zip(scene.members, scene.positions), key=lambda mp: mp[1]):
        mrng = np.random.default_rng([scene.background_seed & 0x7FFFFFFF, member, pos, 733])
        row, col = divmod(pos, 2)
        cx = col * CELL + CELL / 2 + mrng.uniform(-1, 1)
        cy = row * CELL + CELL / 2 + mrng.uniform(-1, 1)
        r = 5.0 * mrng.uniform(0.9, 1.1)
        _draw_glyph(img, by_id[member], cx, cy, r)
    return _quantize(img)


# ---------------------------------------------------------------------------
# Vocabulary


class Vocab:
    """Token table: specials, attribute/query words, identity name tokens."""

    def __init__(self, tokens: list[str]):
        if len(set(tokens)) != len(tokens):
            raise ConfigError("vocab tokens must be unique")
        if len(tokens) < 2:
            raise ConfigError("vocab too small")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(tokens)}

    @property
    def size(self):
        return len(self.tokens)

    def encode(self, token: str) -> int:
        from unlearnlab.errors import VocabError
        if token not in self.index:
            raise VocabError(f"unknown token {token!r}")
        return self.index[token]

    def encode_seq(self, tokens) -> list[int]:
        return [self.encode(t) for t in tokens]


def build_vocab(roster: list[IdentitySpec]) -> Vocab:
    tokens = [PAD, UNKNOWN]
    tokens += QUERY_WORDS + SLOT_WORDS + HUE_NAMES + SHAPE_NAMES + EXTRA_WORDS
    for spec in roster:
        for t in spec.name:
            if t not in tokens:
                tokens.append(t)
    return Vocab(tokens)


def name_token_ids(spec: IdentitySpec, vocab: Vocab) -> list[int]:
    return vocab.encode_seq(spec.name)


# ---------------------------------------------------------------------------
# Queries


def load_query_templates(path=None) -> dict[str, str]:
    if path is None:
        return dict(DEFAULT_QUERY_TEMPLATES)
    templates = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        kind, _, template = line.partition("\t")
        templates[kind.strip()] = template.strip()
    missing = [k for k in QUERY_KINDS if k not in templates]
    if missing:
        raise ConfigError(f"query template file missing kinds: {missing}")
    return templates


def _tokenize(text: str) -> tuple[str, ...]:
    return tuple(text.split())


def make_queries(members, positions, roster, templates, count=20, seed=0):
    """Instantiate (query, answer, kind) triples for one image.

    Answers are derived from the scene metadata. Group images cycle through
    presence / who / spatial / attribute probes; singles replace the
    spatial probe (no grid) with extra attribute probes.
    """
    if count < 1:
        raise ConfigError("query count must be >= 1")
    by_id = {s.id: s for s in roster}
    member_specs = [by_id[m] for m in members]
    pos_of = dict(zip(members, positions))
    rng = np.random.default_rng([seed & 0x7FFFFFFF, 411])
    kinds = ["presence", "who", "spatial", "color", "shape"]
    has_grid = len(members) > 1
    out = []
    who_answer = tuple(t for _, m in sorted((pos_of[m], m) for m in members)
                       for t in by_id[m].name)
    for qi in range(count):
        kind = kinds[qi % len(kinds)]
        if kind == "spatial" and not has_grid:
            kind = "color" if qi % 2 == 0 else "shape"
        if kind == "presence":
            probe = roster[int(rng.integers(len(roster)))]
            q = templates["presence"].format(name=probe.full_name)
            a = ("yes",) if probe.id in members else ("no",)
        elif kind == "who":
            q = templates["who"]
            a = who_answer
        elif kind == "spatial":
            slot = int(rng.integers(4))
            q = templates["spatial"].format(slot=SLOT_WORDS[slot])
            holder = [m for m in members if pos_of[m] == slot]
            a = by_id[holder[0]].name if holder else ("nobody",)
        else:
            probe = member_specs[int(rng.integers(len(member_specs)))] \
                if rng.random() < 0.75 else roster[int(rng.integers(len(roster)))]
            q = templates[kind].format(name=probe.full_name)
            if probe.id not in members:
                a = (UNKNOWN,)
            elif kind == "color":
                a = (HUE_NAMES[probe.hue],)
            else:
                a = (SHAPE_NAMES[probe.shape],)
        out.append((_tokenize(q), a, kind))
    return out


def caption_reference(members, positions, roster) -> tuple[str, ...]:
    """Reference caption: member names in grid-position order."""
    by_id = {s.id: s for s in roster}
    return tuple(t for _, m in sorted(zip(positions, members))
                 for t in by_id[m].name)


# ---------------------------------------------------------------------------
# Benchmark construction


def _category(members, target_id, is_group):
    has_target = target_id in members
    if is_group:
        return "Target-Group" if has_target else "Non-Target-Group"
    return "Target-Single" if has_target else "Non-Target-Single"


def build_benchmark(roster, config: BenchmarkConfig, templates=None,
                    seed_offset=0) -> Dataset:
    """Render the four-category benchmark and attach queries.

    ``seed_offset`` shifts the variation-seed space so train / eval /
    held-out corpora can be generated disjointly from one roster.
    """
    if len(roster) < 2:
        raise ConfigError("roster needs >= 2 identities")
    if config.singles_per_identity < 1 or config.groups_per_identity < 1:
        raise ConfigError("per-identity counts must be positive")
    if config.target_id not in {s.id for s in roster}:
        raise ConfigError(f"unknown target id {config.target_id}")
    templates = templates or load_query_templates()

    samples: list[Sample] = []
    images: dict[str, np.ndarray] = {}
    rng = np.random.default_rng([config.seed & 0x7FFFFFFF, seed_offset & 0x7FFFFFFF, 89])

    def add_image(image_id, img, members, positions, is_group, qseed):
        images[image_id] = img
        cat = _category(members, config.target_id, is_group)
        for q, a, kind in make_queries(members, positions, roster, templates,
                                       config.queries_per_image, seed=qseed):
            samples.append(Sample(image_id, tuple(members), tuple(positions),
                                  cat, kind, q, a))

    for spec in roster:
        for k in range(config.singles_per_identity):
            vseed = config.seed * 100003 + seed_offset * 1009 + spec.id * 131 + k
            img = render_single(spec, vseed)
            add_image(f"single_{spec.id:02d}_{k:03d}", img, (spec.id,), (0,),
                      False, vseed)

    all_ids = [s.id for s in roster]
    scene_counter = 0
    for spec in roster:
        for k in range(config.groups_per_identity):
            size = int(rng.integers(2, 5))
            others = [i for i in all_ids if i != spec.id]
            picked = list(rng.choice(others, size=size - 1, replace=False))
            members = tuple([spec.id] + [int(i) for i in picked])
            positions = tuple(int(p) for p in rng.choice(4, size=size, replace=False))
            bseed = config.seed * 700001 + seed_offset * 4001 + scene_counter
            scene = SceneSpec(members, positions, bseed)
            img = render_group(scene, roster)
            add_image(f"group_{spec.id:02d}_{k:03d}", img, members, positions,
                      True, bseed)
            scene_counter += 1

    ds = Dataset(roster=list(roster), samples=samples, images=images,
                 target_id=config.target_id)
    ds.image_members = {r.image_id: r.members for r in ds.image_records()}

    counts = category_counts(ds)
    if counts.get("Target-Group", 0) < config.min_target_group or \
       counts.get("Non-Target-Group", 0) < config.min_non_target_group:
        raise ConfigError(f"group-scene counts below minimums: {counts}; "
                          "raise groups_per_identity")
    if counts.get("Target-Single", 0) < config.singles_per_identity:
        raise ConfigError("target singles below minimum")
    return ds


def category_counts(ds: Dataset) -> dict[str, int]:
    counts: dict[str, int] = {}
    for rec in ds.image_records():
        counts[rec.category] = counts.get(rec.category, 0) + 1
    return counts


def retarget(ds: Dataset, target_id: int) -> Dataset:
    """Reassign categories relative to a different target identity."""
    if target_id not in {s.id for s in ds.roster}:
        raise ConfigError(f"unknown target id {target_id}")
    samples = [Sample(s.image_id, s.members, s.positions,
                      _category(s.members, target_id, len(s.members) > 1
                                or s.image_id.startswith("group")),
                      s.kind, s.query, s.answer)
               for s in ds.samples]
    out = Dataset(ds.roster, samples, ds.images, target_id)
    out.image_members = dict(ds.image_members)
    return out


# ---------------------------------------------------------------------------
# Serialization (PPM images + JSONL manifest)


def write_ppm(path, img):
    arr = np.round(np.asarray(img) * 255.0).astype(np.uint8)
    c, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.transpose(1, 2, 0).tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P6":
            raise ContractError(f"{path}: not a binary PPM")
        dims = fh.readline().split()
        maxval = int(fh.readline())
        w, h = int(dims[0]), int(dims[1])
        raw = np.frombuffer(fh.read(w * h * 3), dtype=np.uint8)
    return raw.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / maxval


def save_dataset(ds: Dataset, outdir, templates=None):
    outdir = Path(outdir)
    (outdir / "images").mkdir(parents=True, exist_ok=True)
    for image_id in sorted(ds.images):
        write_ppm(outdir / "images" / f"{image_id}.ppm", ds.images[image_id])
    with open(outdir / "manifest.jsonl", "w", encoding="utf-8") as fh:
        for s in ds.samples:
            fh.write(json.dumps({
                "image": f"images/{s.image_id}.ppm", "image_id": s.image_id,
                "members": list(s.members), "positions": list(s.positions),
                "category": s.category, "kind": s.kind,
                "query": list(s.query), "answer": list(s.answer),
            }, sort_keys=True) + "\n")
    roster_json = [{"id": s.id, "name": list(s.name), "hue": s.hue,
                    "shape": s.shape, "stripes": s.stripes, "accent": s.accent,
                    "group": s.group} for s in ds.roster]
    (outdir / "roster.json").write_text(
        json.dumps({"target_id": ds.target_id, "roster": roster_json},
                   indent=2, sort_keys=True), encoding="utf-8")
    templates = templates or load_query_templates()
    lines = [f"{k}\t{v}" for k, v in templates.items()]
    (outdir / "query_templates.txt").write_text("\n".join(lines) + "\n",
                                                encoding="utf-8")


def load_dataset(indir) -> Dataset:
    indir = Path(indir)
    meta = json.loads((indir / "roster.json").read_text(encoding="utf-8"))
    roster = [IdentitySpec(id=r["id"], name=tuple(r["name"]), hue=r["hue"],
                           shape=r["shape"], stripes=r["stripes"],
                           accent=r["accent"], group=r["group"])
              for r in meta["roster"]]
    samples, images = [], {}
    for line in (indir / "manifest.jsonl").read_text(encoding="utf-8").splitlines():
        rec = json.loads(line)
        s = Sample(rec["image_id"], tuple(rec["members"]), tuple(rec["positions"]),
                   rec["category"], rec["kind"], tuple(rec["query"]),
                   tuple(rec["answer"]))
        samples.append(s)
        if s.image_id not in images:
            images[s.image_id] = read_ppm(indir / rec["image"])
    ds = Dataset(roster, samples, images, meta["target_id"])
    ds.image_members = {r.image_id: r.members for r in ds.image_records()}
    return ds
