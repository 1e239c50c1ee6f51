"""Panoptic scenes, scene graphs and the synthetic corpus generator.

A scene is what the relation stage receives from a panoptic segmentor: a
feature map, a set of disjoint binary masks and one class label per mask.
The generator fabricates such scenes together with ground-truth triplets
from a hidden, seeded label rule, so that every property the relation model
is supposed to learn (class-pair predicates, dependence on a third context
object, annotation ambiguity) is known exactly.
"""

from __future__ import annotations

import dataclasses
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

Triplet = tuple[int, int, int]


class SceneError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneGraph:
    triplets: tuple[Triplet, ...] = ()

    def validate(self, n: int, num_predicates: int | None = None) -> None:
        seen = set()
        for s, o, p in self.triplets:
            if s == o:
                raise SceneError(f"self relation ({s}, {o}, {p})")
            if not (0 <= s < n and 0 <= o < n):
                raise SceneError(f"triplet ({s}, {o}, {p}) indexes outside {n} objects")
            if p < 0 or (num_predicates is not None and p >= num_predicates):
                raise SceneError(f"predicate {p} out of range")
            if (s, o, p) in seen:
                raise SceneError(f"duplicate triplet ({s}, {o}, {p})")
            seen.add((s, o, p))


@dataclass(eq=False)
class Scene:
    """One segmented image.

    ``hidden`` holds the generator's ambiguity record: triplets that are
    valid but were not annotated because a more specific predicate took
    precedence. It is never used for training.
    """

    scene_id: str
    features: np.ndarray  # H x W x C
    masks: np.ndarray  # n x H x W, bool
    labels: np.ndarray  # n, int
    graph: SceneGraph = field(default_factory=SceneGraph)
    hidden: tuple[Triplet, ...] = ()

    @property
    def n(self) -> int:
        return int(self.labels.shape[0])

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.features.shape  # type: ignore[return-value]

    @property
    def triplets(self) -> tuple[Triplet, ...]:
        return self.graph.triplets

    def validate(self, num_object_classes: int | None = None, num_predicates: int | None = None) -> None:
        f, m = self.features, self.masks
        if f.ndim != 3:
            raise SceneError(f"{self.scene_id}: feature map must be HxWxC, got {f.shape}")
        if m.ndim != 3 or m.shape[1:] != f.shape[:2]:
            raise SceneError(f"{self.scene_id}: masks {m.shape} do not match feature map {f.shape}")
        if m.shape[0] != self.labels.shape[0]:
            raise SceneError(f"{self.scene_id}: {m.shape[0]} masks but {self.labels.shape[0]} labels")
        if m.dtype != bool:
            raise SceneError(f"{self.scene_id}: masks must be boolean")
        if not np.isfinite(f).all():
            raise SceneError(f"{self.scene_id}: non-finite features")
        if m.shape[0] and not m.reshape(m.shape[0], -1).any(axis=1).all():
            raise SceneError(f"{self.scene_id}: empty mask")
        if (m.sum(axis=0) > 1).any():
            raise SceneError(f"{self.scene_id}: masks overlap")
        if num_object_classes is not None and ((self.labels < 0) | (self.labels >= num_object_classes)).any():
            raise SceneError(f"{self.scene_id}: object label out of range")
        self.graph.validate(self.n, num_predicates)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.scene_id == other.scene_id
            and self.features.shape == other.features.shape
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.masks, other.masks)
            and np.array_equal(self.labels, other.labels)
            and self.graph == other.graph
            and self.hidden == other.hidden
        )


def zipf_weights(num_predicates: int, exponent: float = 1.0) -> tuple[float, ...]:
    w = 1.0 / np.arange(1, num_predicates + 1) ** exponent
    return tuple(float(x) for x in w / w.sum())


@dataclass(frozen=True)
class CorpusConfig:
    num_scenes: int = 200
    height: int = 16
    width: int = 16
    channels: int = 32
    min_objects: int = 2
    max_objects: int = 5
    num_object_classes: int = 8
    num_predicates: int = 8
    predicate_weights: tuple[float, ...] | None = None
    context_mode: bool = False
    ambiguity_rate: float = 0.0
    seed: int = 0
    patches: int = 4
    context_classes: int = 2
    relation_density: float = 0.5
    signal_scale: float = 1.0
    noise_scale: float = 0.5
    ambiguity_cue: float = 1.0
    specifics_per_pair: int = 1

    def __post_init__(self):
        if self.height < 8 or self.width < 8:
            raise ConfigError(f"H and W must be >= 8, got {self.height}x{self.width}")
        if self.channels < 1:
            raise ConfigError("channels must be positive")
        if not 2 <= self.min_objects <= self.max_objects:
            raise ConfigError(f"object range {self.min_objects}..{self.max_objects} invalid (need 2 <= min <= max)")
        if self.num_scenes < 0:
            raise ConfigError("num_scenes must be >= 0")
        if self.patches < 1 or (self.height * self.width) % self.patches:
            raise ConfigError(f"H*W={self.height * self.width} is not divisible by {self.patches} patches")
        if self.num_predicates < 1:
            raise ConfigError("need at least one predicate")
        if not 0.0 <= self.ambiguity_rate <= 1.0:
            raise ConfigError("ambiguity_rate must lie in [0, 1]")
        if self.specifics_per_pair < 1:
            raise ConfigError("specifics_per_pair must be >= 1")
        if not 0.0 < self.relation_density <= 1.0:
            raise ConfigError("relation_density must lie in (0, 1]")
        if self.num_object_classes < 1 or self.num_object_classes > 65535:
            raise ConfigError("num_object_classes out of range")
        if self.num_predicates > 65535:
            raise ConfigError("num_predicates out of range")
        if self.context_mode:
            if self.min_objects < 3:
                raise ConfigError("context mode needs at least 3 objects per scene")
            if self.context_classes < 2:
                raise ConfigError("context mode needs at least 2 context classes")
            if self.num_object_classes - self.context_classes < 1:
                raise ConfigError("context mode leaves no subject/object classes")
            if self.num_predicates < 2:
                raise ConfigError("context mode needs at least 2 predicates")
        if self.predicate_weights is None:
            object.__setattr__(self, "predicate_weights", zipf_weights(self.num_predicates))
        else:
            w = np.asarray(self.predicate_weights, dtype=np.float64)
            if w.shape != (self.num_predicates,) or (w <= 0).any():
                raise ConfigError("predicate_weights must hold one positive weight per predicate")
            # already-normalised weights are kept verbatim so dict round-trips are exact
            if abs(w.sum() - 1.0) > 1e-9:
                w = w / w.sum()
            object.__setattr__(self, "predicate_weights", tuple(float(x) for x in w))

    @property
    def num_thing_classes(self) -> int:
        return self.num_object_classes - (self.context_classes if self.context_mode else 0)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["predicate_weights"] = list(self.predicate_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        d = dict(d)
        if d.get("predicate_weights") is not None:
            d["predicate_weights"] = tuple(d["predicate_weights"])
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    @cached_property
    def rule(self) -> "LabelRule":
        return LabelRule.from_config(self)


@dataclass(frozen=True)
class LabelRule:
    """Hidden ground truth of the generator.

    ``base[s, o]`` is the predicate for subject class ``s`` and object class
    ``o`` (-1 for unrelated). In context mode ``alt[s, o]`` replaces it when
    the scene's context object belongs to the second context group.
    ``specific[s, o]`` lists predicates (padded with -1) that may also hold
    for the pair and outrank ``base`` in annotation precedence. Predicate precedence is the
    predicate id: higher ids are the more specific, rarer relations.
    """

    base: np.ndarray
    alt: np.ndarray
    specific: np.ndarray
    class_vectors: np.ndarray
    cue_vectors: np.ndarray
    first_context_class: int
    context_mode: bool

    @classmethod
    def from_config(cls, cfg: CorpusConfig) -> "LabelRule":
        rng = np.random.default_rng([cfg.seed, 0x5EED])
        t, P = cfg.num_thing_classes, cfg.num_predicates
        w = np.asarray(cfg.predicate_weights)
        related = rng.random((t, t)) < cfg.relation_density
        base = np.where(related, rng.choice(P, size=(t, t), p=w), -1)
        alt = np.full((t, t), -1)
        specific = np.full((t, t, cfg.specifics_per_pair), -1)
        for s in range(t):
            for o in range(t):
                p = base[s, o]
                if p < 0:
                    continue
                if cfg.context_mode:
                    others = np.delete(np.arange(P), p)
                    ow = w[others] / w[others].sum()
                    alt[s, o] = rng.choice(others, p=ow)
                if p < P - 1:
                    k = min(cfg.specifics_per_pair, P - 1 - p)
                    specific[s, o, :k] = np.sort(rng.choice(np.arange(p + 1, P), size=k, replace=False))
        class_vectors = rng.standard_normal((cfg.num_object_classes, cfg.channels))
        cue_vectors = rng.standard_normal((P, cfg.channels))
        return cls(base, alt, specific, class_vectors, cue_vectors,
                   cfg.num_thing_classes, cfg.context_mode)

    def is_context_class(self, c: int) -> bool:
        return self.context_mode and c >= self.first_context_class

    def context_group(self, labels) -> int:
        """0 or 1 in context mode, decided by the first context object present."""
        if not self.context_mode:
            return 0
        for c in labels:
            if c >= self.first_context_class:
                return int((c - self.first_context_class) % 2)
        return 0

    def predicate(self, s_cls: int, o_cls: int, group: int = 0) -> int:
        if self.is_context_class(s_cls) or self.is_context_class(o_cls):
            return -1
        if s_cls >= self.base.shape[0] or o_cls >= self.base.shape[0]:
            return -1
        if self.context_mode and group == 1:
            return int(self.alt[s_cls, o_cls])
        return int(self.base[s_cls, o_cls])

    def specifics_of(self, s_cls: int, o_cls: int, group: int = 0) -> list[int]:
        """Predicates that can co-occur with, and outrank, the pair's base predicate."""
        if self.predicate(s_cls, o_cls, group) < 0 or (self.context_mode and group == 1):
            return []
        return [int(q) for q in self.specific[s_cls, o_cls] if q >= 0]

    def relations(self, labels, ambiguous: dict[tuple[int, int], int] | None = None):
        """Annotated and hidden triplets for a labelled object set.

        ``ambiguous`` maps an ordered pair to the specific predicate that also
        holds for it; precedence then annotates the specific one and hides
        the base predicate.
        """
        ambiguous = ambiguous or {}
        labels = [int(c) for c in labels]
        group = self.context_group(labels)
        annotated, hidden = [], []
        for i, ci in enumerate(labels):
            for j, cj in enumerate(labels):
                if i == j:
                    continue
                p = self.predicate(ci, cj, group)
                if p < 0:
                    continue
                if (i, j) in ambiguous:
                    q = ambiguous[(i, j)]
                    if q not in self.specifics_of(ci, cj, group):
                        raise SceneError(f"predicate {q} cannot co-occur with {p} for classes ({ci}, {cj})")
                    annotated.append((i, j, q))
                    hidden.append((i, j, p))
                else:
                    annotated.append((i, j, p))
        return annotated, hidden


def _place_boxes(rng, n: int, H: int, W: int, attempts: int = 50) -> list[tuple[int, int, int, int]]:
    lo_h, lo_w = 2, 2
    hi_h, hi_w = max(lo_h, H // 3), max(lo_w, W // 3)
    if n * lo_h * lo_w > H * W:
        raise GenerationError(f"cannot pack {n} objects into {H}x{W}")
    for _ in range(attempts):
        occ = np.zeros((H, W), dtype=bool)
        boxes = []
        for _ in range(n):
            for _ in range(100):
                h = int(rng.integers(lo_h, hi_h + 1))
                w = int(rng.integers(lo_w, hi_w + 1))
                y = int(rng.integers(0, H - h + 1))
                x = int(rng.integers(0, W - w + 1))
                if not occ[y:y + h, x:x + w].any():
                    occ[y:y + h, x:x + w] = True
                    boxes.append((y, x, h, w))
                    break
            else:
                break
        if len(boxes) == n:
            return boxes
    raise GenerationError(f"could not place {n} disjoint objects in {H}x{W} after {attempts} attempts")


def generate_scene(cfg: CorpusConfig, seed: int, scene_id: str | None = None) -> Scene:
    """One synthetic scene, a pure function of ``(cfg, seed)``."""
    rule = cfg.rule
    rng = np.random.default_rng([cfg.seed, seed])
    H, W, C = cfg.height, cfg.width, cfg.channels
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))

    if cfg.context_mode:
        things = rng.integers(0, cfg.num_thing_classes, size=n - 1)
        ctx = rule.first_context_class + rng.integers(0, cfg.context_classes)
        labels = np.concatenate([things, [ctx]])
        labels = labels[rng.permutation(n)]
    else:
        labels = rng.integers(0, cfg.num_object_classes, size=n)
    labels = labels.astype(np.int64)

    boxes = _place_boxes(rng, n, H, W)
    masks = np.zeros((n, H, W), dtype=bool)
    for k, (y, x, h, w) in enumerate(boxes):
        masks[k, y:y + h, x:x + w] = True

    features = cfg.noise_scale * rng.standard_normal((H, W, C))
    for k in range(n):
        features[masks[k]] += cfg.signal_scale * rule.class_vectors[labels[k]]

    ambiguous: dict[tuple[int, int], int] = {}
    if cfg.ambiguity_rate > 0:
        group = rule.context_group(labels)
        for i in range(n):
            for j in range(n):
                cands = rule.specifics_of(labels[i], labels[j], group) if i != j else []
                if cands and rng.random() < cfg.ambiguity_rate:
                    ambiguous[(i, j)] = cands[int(rng.integers(len(cands)))]
    annotated, hidden = rule.relations(labels, ambiguous)
    # the specific relation is visible on the subject
    for i, j, q in annotated:
        if (i, j) in ambiguous:
            features[masks[i]] += cfg.ambiguity_cue * rule.cue_vectors[q]

    scene = Scene(
        scene_id=scene_id or f"s{cfg.seed}-{seed}",
        features=features,
        masks=masks,
        labels=labels,
        graph=SceneGraph(tuple(annotated)),
        hidden=tuple(hidden),
    )
    scene.validate(cfg.num_object_classes, cfg.num_predicates)
    return scene


def generate_corpus(cfg: CorpusConfig, start: int = 0, threads: int = 1) -> list[Scene]:
    """Scenes ``start .. start + num_scenes - 1``; identical output for any ``threads``."""
    def one(k: int) -> Scene:
        return generate_scene(cfg, start + k, scene_id=f"c{cfg.seed}-{start + k:06d}")

    if threads <= 1 or cfg.num_scenes < 2:
        return [one(k) for k in range(cfg.num_scenes)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, range(cfg.num_scenes)))


def decisive_pairs(scene: Scene, rule: LabelRule) -> list[tuple[int, int, int]]:
    """Annotated triplets whose predicate flips with the context group."""
    if not rule.context_mode:
        return []
    out = []
    labels = scene.labels
    for s, o, p in scene.triplets:
        cs, co = int(labels[s]), int(labels[o])
        if rule.base[cs, co] >= 0 and rule.base[cs, co] != rule.alt[cs, co]:
            out.append((s, o, p))
    return out
