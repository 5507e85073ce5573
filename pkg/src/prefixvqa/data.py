"""Manifest and feature-file formats, and the synthetic shapes world."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, ManifestReferenceError, ParseError

SPLITS = ("train", "val", "test")
ANSWER_TYPES = ("open", "yesno")
FEATURE_MAGIC = b"VQAF"
FEATURE_DIM = 512


@dataclass(frozen=True)
class VqaSample:
    image_id: str
    question: str
    answer: str
    answer_type: str
    split: str = "train"

    def __post_init__(self):
        if not self.question.strip() or not self.answer.strip():
            raise DataError(f"{self.image_id}: empty question or answer")
        if self.answer_type not in ANSWER_TYPES:
            raise DataError(f"{self.image_id}: unknown answer_type {self.answer_type!r}")
        if self.split not in SPLITS:
            raise DataError(f"{self.image_id}: unknown split {self.split!r}")


@dataclass
class DatasetManifest:
    name: str
    splits: dict[str, list[VqaSample]] = field(default_factory=lambda: {s: [] for s in SPLITS})
    features_path: str | None = None

    def counts(self) -> dict[str, int]:
        return {s: len(self.splits[s]) for s in SPLITS}

    def __len__(self) -> int:
        return sum(self.counts().values())

    def all_samples(self) -> list[VqaSample]:
        return [s for split in SPLITS for s in self.splits[split]]


def write_manifest(manifest: DatasetManifest, path) -> None:
    """JSON Lines: an optional header record, then one sample per line."""
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        header = {"manifest": manifest.name}
        if manifest.features_path:
            header["features"] = manifest.features_path
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for s in manifest.all_samples():
            fh.write(json.dumps(asdict(s), sort_keys=True) + "\n")


def load_manifest(path, features_path=None, *, check_features: bool = True) -> DatasetManifest:
    """Parse and validate a JSONL manifest.

    A first line of the form ``{"manifest": name, "features": relpath}`` is an
    optional header; ``features`` is resolved relative to the manifest.
    """
    path = Path(path)
    manifest = DatasetManifest(name=path.stem)
    seen: dict[tuple[str, str], str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", lineno) from exc
            if not isinstance(rec, dict):
                raise ParseError("record is not a JSON object", lineno)
            if lineno == 1 and "manifest" in rec and "question" not in rec:
                manifest.name = str(rec["manifest"])
                manifest.features_path = rec.get("features")
                continue
            try:
                sample = VqaSample(image_id=str(rec["image_id"]), question=str(rec["question"]),
                                   answer=str(rec["answer"]), answer_type=str(rec["answer_type"]),
                                   split=str(rec.get("split", "train")))
            except KeyError as exc:
                raise ParseError(f"missing field {exc.args[0]!r}", lineno) from exc
            except DataError as exc:
                raise ParseError(str(exc), lineno) from exc
            key = (sample.image_id, sample.question)
            if key in seen:
                raise ManifestReferenceError(
                    f"line {lineno}: ({sample.image_id!r}, {sample.question!r}) already in split {seen[key]!r}")
            seen[key] = sample.split
            manifest.splits[sample.split].append(sample)
    if features_path is None and manifest.features_path:
        features_path = path.parent / manifest.features_path
    if features_path is not None:
        manifest.features_path = str(features_path)
        if check_features:
            known = set(read_feature_ids(features_path))
            for s in manifest.all_samples():
                if s.image_id not in known:
                    raise ManifestReferenceError(f"image_id {s.image_id!r} not found in {features_path}")
    return manifest


def write_features(path, features: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", len(features), FEATURE_DIM))
        for image_id, vec in features.items():
            vec = np.asarray(vec, dtype="<f4")
            if vec.shape != (FEATURE_DIM,):
                raise FormatError(f"{image_id}: feature shape {vec.shape} != ({FEATURE_DIM},)")
            raw = image_id.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(vec.tobytes())


def _iter_features(path, with_values: bool):
    buf = Path(path).read_bytes()
    if buf[:4] != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:4]!r}")
    if len(buf) < 12:
        raise FormatError(f"{path}: truncated header")
    count, dim = struct.unpack_from("<II", buf, 4)
    if dim != FEATURE_DIM:
        raise FormatError(f"{path}: feature dim {dim}, expected {FEATURE_DIM}")
    pos = 12
    for _ in range(count):
        if pos + 2 > len(buf):
            raise FormatError(f"{path}: truncated record")
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        image_id = buf[pos:pos + n].decode("utf-8")
        pos += n
        if pos + 4 * dim > len(buf):
            raise FormatError(f"{path}: truncated vector for {image_id!r}")
        vec = np.frombuffer(buf, dtype="<f4", count=dim, offset=pos).copy() if with_values else None
        pos += 4 * dim
        yield image_id, vec


def load_features(path) -> dict[str, np.ndarray]:
    """image_id -> float32 vector of length 512."""
    return dict(_iter_features(path, True))


def read_feature_ids(path) -> list[str]:
    return [k for k, _ in _iter_features(path, False)]


# Field names used by common medical VQA releases, mapped onto manifest fields.
# No downloader ships with the package; records are expected on disk already.
DEFAULT_FIELD_MAP = {"image_id": "img_name", "question": "question", "answer": "answer",
                     "answer_type": "answer_type"}
ANSWER_TYPE_ALIASES = {"open": "open", "closed": "yesno", "yes/no": "yesno", "yesno": "yesno"}


def convert_records(records, split: str, field_map: dict[str, str] | None = None) -> list[VqaSample]:
    """Map foreign annotation records onto :class:`VqaSample`.

    Answers are lowercased and stripped; nothing else is normalized.  Answer
    types go through ``ANSWER_TYPE_ALIASES`` (so "CLOSED" becomes "yesno").
    """
    fm = {**DEFAULT_FIELD_MAP, **(field_map or {})}
    out = []
    for i, rec in enumerate(records):
        try:
            kind = str(rec[fm["answer_type"]]).strip().lower()
            out.append(VqaSample(str(rec[fm["image_id"]]), str(rec[fm["question"]]).strip(),
                                 str(rec[fm["answer"]]).strip().lower(), ANSWER_TYPE_ALIASES[kind], split))
        except KeyError as exc:
            raise DataError(f"record {i}: missing field or unknown answer type {exc.args[0]!r}") from exc
    return out


# ---------------------------------------------------------------------------
# synthetic shapes world

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "blue", "green")
SIDES = ("left", "right")
COUNT_WORDS = ("one", "two", "three")
# per-slot encoding: present, one-hot color, one-hot side
SLOT_DIM = 1 + len(COLORS) + len(SIDES)
SCENE_DIM = len(SHAPES) * SLOT_DIM

OPEN_KINDS = ("color", "shape_at_side", "count")
OPEN_CANDIDATES = {"color": COLORS, "shape_at_side": SHAPES, "count": COUNT_WORDS}


@dataclass(frozen=True)
class SyntheticWorldConfig:
    n_scenes: int = 500
    seed: int = 0
    min_shapes: int = 1
    max_shapes: int = 3
    noise: float = 0.01
    open_per_scene: int = 2
    yesno_per_scene: int = 2
    # skewed attribute priors, so the question text alone carries some signal
    shape_weights: tuple[float, ...] = (0.5, 0.3, 0.2)
    color_weights: tuple[float, ...] = (0.6, 0.25, 0.15)
    split_fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class Shape:
    kind: str
    color: str
    side: str


def scene_vector(scene: list[Shape]) -> np.ndarray:
    vec = np.zeros(SCENE_DIM)
    for s in scene:
        base = SHAPES.index(s.kind) * SLOT_DIM
        vec[base] = 1.0
        vec[base + 1 + COLORS.index(s.color)] = 1.0
        vec[base + 1 + len(COLORS) + SIDES.index(s.side)] = 1.0
    return vec


def _sample_scene(rng: np.random.Generator, cfg: SyntheticWorldConfig) -> list[Shape]:
    n = int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))
    w = np.asarray(cfg.shape_weights) / np.sum(cfg.shape_weights)
    kinds = rng.choice(len(SHAPES), size=n, replace=False, p=w)
    cw = np.asarray(cfg.color_weights) / np.sum(cfg.color_weights)
    scene = [Shape(SHAPES[k], COLORS[rng.choice(len(COLORS), p=cw)], SIDES[rng.integers(2)])
             for k in sorted(kinds)]
    return scene


def _open_questions(scene: list[Shape]) -> dict[str, list[tuple[str, str]]]:
    out: dict[str, list[tuple[str, str]]] = {k: [] for k in OPEN_KINDS}
    for s in scene:
        out["color"].append((f"what color is the {s.kind}?", s.color))
    for side in SIDES:
        here = [s for s in scene if s.side == side]
        if len(here) == 1:
            out["shape_at_side"].append((f"what is on the {side}?", here[0].kind))
    out["count"].append(("how many shapes are there?", COUNT_WORDS[len(scene) - 1]))
    return {k: v for k, v in out.items() if v}


def _yesno_questions(scene: list[Shape]) -> tuple[list[str], list[str]]:
    present = {s.kind: s for s in scene}
    yes, no = [], []
    for kind in SHAPES:
        (yes if kind in present else no).append(f"is there a {kind}?")
        for color in COLORS:
            hit = kind in present and present[kind].color == color
            (yes if hit else no).append(f"is there a {color} {kind}?")
    for s in scene:
        for side in SIDES:
            (yes if s.side == side else no).append(f"is the {s.kind} on the {side}?")
    return yes, no


def open_question_kind(question: str) -> str:
    if question.startswith("what color"):
        return "color"
    if question.startswith("what is on"):
        return "shape_at_side"
    if question.startswith("how many"):
        return "count"
    raise DataError(f"not a synthetic open question: {question!r}")


def _projection(seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0x5EED])
    return rng.normal(0.0, 1.0 / np.sqrt(SCENE_DIM), size=(FEATURE_DIM, SCENE_DIM))


def describe_scene(scene: list[Shape], width: int = 8) -> str:
    """Fixed-slot text rendering of a scene.

    A count word, then one fused ``color_kind_side`` token per shape kind in
    a fixed order ("none" when absent), cut or padded with "." to exactly
    ``width`` tokens so it occupies the same positions as the visual prefix.
    """
    present = {s.kind: s for s in scene}
    words = [COUNT_WORDS[len(scene) - 1]]
    for kind in SHAPES:
        s = present.get(kind)
        words.append(f"{s.color}_{s.kind}_{s.side}" if s else "none")
    words = (words + ["."] * width)[:width]
    return " ".join(words)


def _build_world(cfg: SyntheticWorldConfig):
    if cfg.n_scenes < 10:
        raise DataError("synthetic world needs at least 10 scenes")
    rng = np.random.default_rng(cfg.seed)
    proj = _projection(cfg.seed)
    scenes = [_sample_scene(rng, cfg) for _ in range(cfg.n_scenes)]
    order = rng.permutation(cfg.n_scenes)
    n_train = int(round(cfg.split_fractions[0] * cfg.n_scenes))
    n_val = int(round(cfg.split_fractions[1] * cfg.n_scenes))
    split_of = {}
    for rank, idx in enumerate(order):
        split_of[idx] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"

    manifest = DatasetManifest(name=f"synthetic-{cfg.digest()}")
    features: dict[str, np.ndarray] = {}
    by_id: dict[str, list[Shape]] = {}
    for idx, scene in enumerate(scenes):
        image_id = f"scene{idx:05d}"
        by_id[image_id] = scene
        vec = proj @ scene_vector(scene) + rng.normal(0.0, cfg.noise, FEATURE_DIM)
        features[image_id] = vec.astype(np.float32)
        split = split_of[idx]
        opens = _open_questions(scene)
        kinds = list(opens)
        picked = rng.choice(len(kinds), size=min(cfg.open_per_scene, len(kinds)), replace=False)
        for k in sorted(picked):
            options = opens[kinds[k]]
            q, a = options[rng.integers(len(options))]
            manifest.splits[split].append(VqaSample(image_id, q, a, "open", split))
        yes, no = _yesno_questions(scene)
        for i in range(cfg.yesno_per_scene):
            pool, answer = (yes, "yes") if i % 2 == 0 else (no, "no")
            q = pool[rng.integers(len(pool))]
            manifest.splits[split].append(VqaSample(image_id, q, answer, "yesno", split))
    return manifest, features, by_id


def synth_generate(cfg: SyntheticWorldConfig) -> tuple[DatasetManifest, dict[str, np.ndarray]]:
    """Seeded scenes, balanced open/yes-no questions and 512-d features.

    Every scene gets ``open_per_scene`` open questions of distinct kinds and
    ``yesno_per_scene`` yes/no questions alternating yes and no.  Features are
    a fixed random projection of the scene encoding plus Gaussian noise,
    rounded to float32 so they survive the feature file bit-exactly.
    """
    manifest, features, _ = _build_world(cfg)
    return manifest, features


def pretraining_corpus(cfg: SyntheticWorldConfig, width: int = 8) -> list[str]:
    """Text-only QA over the training scenes, with the scene written out as context.

    Stands in for the web text a real language model is pre-trained on: it
    teaches the base model the vocabulary and the question/context/answer
    layout, but never sees a visual feature.
    """
    manifest, _, scenes = _build_world(cfg)
    train_ids = sorted({s.image_id for s in manifest.splits["train"]})
    texts = []
    for image_id in train_ids:
        scene = scenes[image_id]
        context = describe_scene(scene, width)
        pairs = [qa for options in _open_questions(scene).values() for qa in options]
        yes, no = _yesno_questions(scene)
        rng = np.random.default_rng([cfg.seed, int(image_id[5:])])
        no = [no[i] for i in rng.choice(len(no), size=min(len(yes), len(no)), replace=False)]
        pairs += [(q, "yes") for q in yes] + [(q, "no") for q in no]
        texts += [f"question: {q} context: {context} answer: {a}" for q, a in pairs]
    return texts


def save_synthetic(out_dir, cfg: SyntheticWorldConfig, width: int = 8) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest, features = synth_generate(cfg)
    manifest.features_path = "features.vqaf"
    write_manifest(manifest, out / "manifest.jsonl")
    write_features(out / "features.vqaf", features)
    (out / "corpus.txt").write_text("\n".join(pretraining_corpus(cfg, width)) + "\n", encoding="utf-8")
    (out / "world.json").write_text(json.dumps(cfg.to_dict(), sort_keys=True) + "\n", encoding="utf-8")
    return out / "manifest.jsonl", out / "features.vqaf"
