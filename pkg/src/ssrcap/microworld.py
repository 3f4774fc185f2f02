"""Synthetic micro-world standing in for real images, captions and a translator.

Images are sums of concept prototype vectors plus isotropic noise.  Pivot
captions come from a small template grammar; the pseudo-translator maps them
token by token into a second synthetic language and injects the two error
classes a real translator makes: disfluency (swap / drop / duplicate) and
visual irrelevancy (a concept replaced by a distractor).
"""
import json
import os
from dataclasses import dataclass, field

import numpy as np

OBJECTS = [
    "dog", "cat", "horse", "bird", "cow", "sheep", "boy", "girl", "man", "woman", "car", "bus",
    "bike", "boat", "train", "plane", "ball", "kite", "chair", "table", "cake", "pizza", "phone", "clock",
]
SCENES = ["park", "street", "kitchen", "beach", "field", "room", "river", "snow"]
ACTIONS = ["running", "sitting", "eating", "playing", "standing", "jumping", "sleeping", "walking"]
FUNCTION_WORDS = ["a", "the", "is", "and", "with", "are", "in", "there"]

# slot names: O1/O2 objects, A action, S scene; the key is the image structure
TEMPLATES = [
    (("O1",), "a O1"),
    (("O1", "A"), "a O1 is A"),
    (("O1", "S"), "a O1 in the S"),
    (("O1", "A", "S"), "a O1 is A in the S"),
    (("O1", "O2"), "a O1 and a O2"),
    (("O1", "O2", "A"), "a O1 and a O2 are A"),
    (("O1", "O2", "S"), "a O1 and a O2 in the S"),
    (("O1", "O2", "A", "S"), "a O1 and a O2 are A in the S"),
    (("O1",), "there is a O1"),
    (("O1", "A"), "the O1 is A"),
    (("O1", "A", "S"), "in the S a O1 is A"),
    (("O1", "O2"), "a O1 with a O2"),
]

ROLE_OF_SLOT = {"O1": "obj", "O2": "obj", "A": "act", "S": "scene"}
POS_OF_ROLE = {"obj": "noun", "scene": "noun", "act": "verb"}


class WorldError(ValueError):
    pass


@dataclass
class NoiseSpec:
    disfluency_rate: float = 0.3
    irrelevancy_rate: float = 0.3
    swap: float = 1 / 3
    drop: float = 1 / 3
    dup: float = 1 / 3

    def __post_init__(self):
        for r in (self.disfluency_rate, self.irrelevancy_rate):
            if not 0 <= r <= 1:
                raise WorldError(f"noise rate {r} outside [0, 1]")
        if min(self.swap, self.drop, self.dup) < 0 or abs(self.swap + self.drop + self.dup - 1) > 1e-9:
            raise WorldError("disfluency op mix must be non-negative and sum to 1")


@dataclass
class Concept:
    index: int
    pivot: str
    target: str
    role: str

    @property
    def pos(self):
        return POS_OF_ROLE[self.role]


@dataclass
class MicroWorld:
    concepts: list
    prototypes: np.ndarray
    templates: list
    dictionary: dict
    noise: NoiseSpec
    feature_noise: float
    seed: int

    def __post_init__(self):
        self.by_role = {r: [c for c in self.concepts if c.role == r] for r in ("obj", "act", "scene")}
        self.target_tags = {c.target: c.pos for c in self.concepts}
        for p in FUNCTION_WORDS:
            self.target_tags[self.dictionary[p]] = "func"
        self.target_to_concept = {c.target: c for c in self.concepts}
        self.structures = sorted({t[0] for t in self.templates}, key=lambda s: (len(s), s))

    @property
    def feat_dim(self):
        return self.prototypes.shape[1]

    def translate_clean(self, pivot_tokens):
        return [self.dictionary[t] for t in pivot_tokens]

    def to_json(self):
        return {
            "seed": self.seed,
            "feature_noise": self.feature_noise,
            "noise": vars(self.noise),
            "concepts": [vars(c) for c in self.concepts],
            "prototypes": [[float(x) for x in row] for row in self.prototypes],
            "templates": [[list(s), t] for s, t in self.templates],
            "dictionary": self.dictionary,
        }

    @classmethod
    def from_json(cls, d):
        return cls(
            concepts=[Concept(**c) for c in d["concepts"]],
            prototypes=np.array(d["prototypes"], dtype=np.float64),
            templates=[(tuple(s), t) for s, t in d["templates"]],
            dictionary=dict(d["dictionary"]),
            noise=NoiseSpec(**d["noise"]),
            feature_noise=float(d["feature_noise"]),
            seed=int(d["seed"]),
        )


def _split_counts(n):
    n_act = max(1, round(0.2 * n))
    n_scene = max(1, round(0.2 * n))
    return n - n_act - n_scene, n_act, n_scene


def _names(base, k, prefix):
    return list(base[:k]) + [f"{prefix}{i}" for i in range(len(base), k)]


def _target_words(n, rng):
    onsets = list("bdfgklmnprstvz")
    vowels = list("aeiou")
    words, seen = [], set()
    while len(words) < n:
        w = "".join(rng.choice(onsets) + rng.choice(vowels) for _ in range(int(rng.integers(2, 4))))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def generate_world(n_concepts=40, n_templates=12, feat_dim=32, noise=None, feature_noise=0.1, seed=0):
    n_obj, n_act, n_scene = _split_counts(n_concepts)
    if n_obj < 3 or n_act < 2 or n_scene < 2:
        raise WorldError(f"inventory of {n_concepts} concepts is too small (need >= 3 objects, 2 actions, 2 scenes)")
    if not 1 <= n_templates <= len(TEMPLATES):
        raise WorldError(f"n_templates must be in 1..{len(TEMPLATES)}")
    rng = np.random.default_rng([seed, 0])
    pivots = (
        [(w, "obj") for w in _names(OBJECTS, n_obj, "obj")]
        + [(w, "act") for w in _names(ACTIONS, n_act, "act")]
        + [(w, "scene") for w in _names(SCENES, n_scene, "scene")]
    )
    targets = _target_words(len(pivots) + len(FUNCTION_WORDS), rng)
    concepts = [Concept(i, p, targets[i], role) for i, (p, role) in enumerate(pivots)]
    dictionary = {c.pivot: c.target for c in concepts}
    for k, w in enumerate(FUNCTION_WORDS):
        dictionary[w] = targets[len(pivots) + k]
    protos = rng.normal(size=(len(concepts), feat_dim))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    return MicroWorld(concepts, protos, list(TEMPLATES[:n_templates]), dictionary, noise or NoiseSpec(), feature_noise, seed)


# ---------------------------------------------------------------------------
# images and captions


@dataclass
class ImageRecord:
    image_id: str
    feature: np.ndarray
    concepts: list  # ground-truth target-language concept tokens
    structure: tuple = ()
    slots: dict = field(default_factory=dict)


@dataclass
class PseudoPair:
    image: ImageRecord
    pivot: list
    target: list
    concepts: list
    disfluent: bool = False
    irrelevant: bool = False
    references: list = None


def _sample_image(world, image_id, rng):
    structure = world.structures[int(rng.integers(len(world.structures)))]
    slots = {}
    objs = rng.choice(len(world.by_role["obj"]), size=2, replace=False)
    objs = sorted(world.by_role["obj"][k].index for k in objs)
    slots["O1"] = objs[0]
    if "O2" in structure:
        slots["O2"] = objs[1]
    if "A" in structure:
        slots["A"] = world.by_role["act"][int(rng.integers(len(world.by_role["act"])))].index
    if "S" in structure:
        slots["S"] = world.by_role["scene"][int(rng.integers(len(world.by_role["scene"])))].index
    idx = [slots[s] for s in structure]
    feat = world.prototypes[idx].sum(axis=0)
    feat = feat + rng.normal(scale=world.feature_noise, size=feat.shape)
    return ImageRecord(image_id, feat, [world.concepts[i].target for i in idx], structure, slots)


def _render(world, template, slots):
    toks, slot_pos = [], []
    for w in template.split():
        if w in ROLE_OF_SLOT:
            slot_pos.append(len(toks))
            toks.append(world.concepts[slots[w]].pivot)
        else:
            toks.append(w)
    return toks, slot_pos


def pivot_caption(world, image, rng):
    choices = [t for s, t in world.templates if s == image.structure]
    template = choices[int(rng.integers(len(choices)))]
    return _render(world, template, image.slots)


def clean_references(world, image):
    return [world.translate_clean(_render(world, t, image.slots)[0]) for s, t in world.templates if s == image.structure]


def pseudo_translate(pivot_tokens, world, noise, rng, slot_positions=None, image_concepts=None):
    """Token-level translation with optional irrelevancy then disfluency corruption.

    Returns ``(tokens, disfluent, irrelevant)``.  Every random decision is drawn
    unconditionally so a given rng stream always yields the same flags.
    """
    out = world.translate_clean(pivot_tokens)
    if slot_positions is None:
        slot_positions = [k for k, t in enumerate(out) if t in world.target_to_concept]
    present = set(image_concepts if image_concepts is not None else [out[k] for k in slot_positions])
    u_irr, u_dis = rng.random(), rng.random()
    pick_slot, pick_distractor = rng.random(), rng.random()
    u_op, pick_pos = rng.random(), rng.random()

    irrelevant = bool(u_irr < noise.irrelevancy_rate and slot_positions)
    if irrelevant:
        pos = slot_positions[int(pick_slot * len(slot_positions))]
        role = world.target_to_concept[out[pos]].role
        pool = [c.target for c in world.by_role[role] if c.target not in present]
        if not pool:
            irrelevant = False
        else:
            out[pos] = pool[int(pick_distractor * len(pool))]

    disfluent = bool(u_dis < noise.disfluency_rate)
    if disfluent:
        n = len(out)
        if u_op < noise.swap:
            if n < 2:
                disfluent = False
            else:
                i = int(pick_pos * (n - 1))
                out[i], out[i + 1] = out[i + 1], out[i]
        elif u_op < noise.swap + noise.drop:
            if n < 2:
                disfluent = False
            else:
                del out[int(pick_pos * n)]
        else:
            i = int(pick_pos * n)
            out.insert(i + 1, out[i])
    return out, disfluent, irrelevant


def truncate_caption(tokens, max_len):
    return list(tokens[:max_len])


def extract_concepts(tokens, tags, strict=True):
    """Tokens tagged noun or verb, in caption order."""
    out = []
    for t in tokens:
        pos = tags.get(t)
        if pos is None:
            if strict:
                raise KeyError(f"untagged token {t!r}")
            continue
        if pos in ("noun", "verb"):
            out.append(t)
    return out


def _make_pairs(world, n, prefix, rng, with_refs, max_len, pivot_max_len):
    pairs = []
    for k in range(n):
        img = _sample_image(world, f"{prefix}-{k:05d}", rng)
        piv, slot_pos = pivot_caption(world, img, rng)
        piv = truncate_caption(piv, pivot_max_len)
        tgt, dis, irr = pseudo_translate(piv, world, world.noise, rng, slot_pos, img.concepts)
        tgt = truncate_caption(tgt, max_len)
        refs = [truncate_caption(r, max_len) for r in clean_references(world, img)] if with_refs else None
        pairs.append(PseudoPair(img, piv, tgt, extract_concepts(tgt, world.target_tags), dis, irr, refs))
    return pairs


def generate_dataset(world, sizes, max_len=16, pivot_max_len=20):
    """(train, val, test) splits; val and test carry clean references."""
    if any(s <= 0 for s in sizes):
        raise WorldError("split sizes must be positive")
    names = ("train", "val", "test")
    return tuple(
        _make_pairs(world, n, name, np.random.default_rng([world.seed, 1, k]), k > 0, max_len, pivot_max_len)
        for k, (name, n) in enumerate(zip(names, sizes))
    )


def generate_lm_corpus(world, n, max_len=16):
    """Clean target-language sentences not paired with any image."""
    rng = np.random.default_rng([world.seed, 2])
    out = []
    for k in range(n):
        img = _sample_image(world, f"lm-{k:05d}", rng)
        piv, _ = pivot_caption(world, img, rng)
        out.append(truncate_caption(world.translate_clean(piv), max_len))
    return out


def world_from_config(cfg):
    noise = NoiseSpec(cfg.disfluency, cfg.irrelevancy, cfg.op_swap, cfg.op_drop, cfg.op_dup)
    return generate_world(cfg.n_concepts, cfg.n_templates, cfg.feat_dim, noise, cfg.feature_noise, cfg.seed)


# ---------------------------------------------------------------------------
# dataset files


class DatasetFormatError(ValueError):
    pass


def pair_to_record(p):
    rec = {
        "image_id": p.image.image_id,
        "feature": [float(x) for x in p.image.feature],
        "pivot": p.pivot,
        "target": p.target,
        "concepts": p.concepts,
        "gt_concepts": p.image.concepts,
        "flags": {"disfluent": p.disfluent, "irrelevant": p.irrelevant},
    }
    if p.references is not None:
        rec["references"] = p.references
    return rec


_REQUIRED = ("image_id", "feature", "pivot", "target", "concepts", "flags")


def record_to_pair(rec):
    for k in _REQUIRED:
        if k not in rec:
            raise KeyError(k)
    feat = np.array(rec["feature"], dtype=np.float64)
    if feat.ndim != 1 or feat.size == 0:
        raise ValueError("feature must be a non-empty vector")
    img = ImageRecord(str(rec["image_id"]), feat, list(rec.get("gt_concepts", rec["concepts"])))
    flags = rec["flags"]
    return PseudoPair(
        img,
        list(rec["pivot"]),
        list(rec["target"]),
        list(rec["concepts"]),
        bool(flags.get("disfluent", False)),
        bool(flags.get("irrelevant", False)),
        [list(r) for r in rec["references"]] if rec.get("references") is not None else None,
    )


def write_split(path, pairs):
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(json.dumps(pair_to_record(p), ensure_ascii=False) + "\n")


def read_split(path):
    pairs = []
    dim = None
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                p = record_to_pair(json.loads(line))
            except (ValueError, KeyError, TypeError, AttributeError) as exc:
                raise DatasetFormatError(f"{path}: malformed record at line {n}: {exc}") from None
            if dim is None:
                dim = p.image.feature.size
            elif p.image.feature.size != dim:
                raise DatasetFormatError(f"{path}: line {n}: feature dim {p.image.feature.size} != {dim}")
            pairs.append(p)
    return pairs


def write_dataset(data_dir, world, splits, lm_corpus):
    os.makedirs(data_dir, exist_ok=True)
    with open(os.path.join(data_dir, "world.json"), "w", encoding="utf-8") as fh:
        json.dump(world.to_json(), fh)
    for name, pairs in zip(("train", "val", "test"), splits):
        write_split(os.path.join(data_dir, f"{name}.jsonl"), pairs)
    with open(os.path.join(data_dir, "lm_corpus.txt"), "w", encoding="utf-8") as fh:
        for s in lm_corpus:
            fh.write(" ".join(s) + "\n")


def read_dataset(data_dir):
    """(world or None, (train, val, test), lm corpus).  world.json is optional for external data."""
    world = None
    wpath = os.path.join(data_dir, "world.json")
    if os.path.exists(wpath):
        with open(wpath, encoding="utf-8") as fh:
            world = MicroWorld.from_json(json.load(fh))
    splits = tuple(read_split(os.path.join(data_dir, f"{n}.jsonl")) for n in ("train", "val", "test"))
    lm_path = os.path.join(data_dir, "lm_corpus.txt")
    if os.path.exists(lm_path):
        with open(lm_path, encoding="utf-8") as fh:
            lm = [ln.split() for ln in fh if ln.strip()]
    else:
        lm = [p.target for p in splits[0]]
    return world, splits, lm
