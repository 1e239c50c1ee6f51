"""Global-context relation network and its pairwise-only baseline.

Object tokens from every object in a scene are fed jointly through a stack
of pre-norm transformer encoder layers, then average-pooled per object. The
relation head has one attention head per predicate; the pre-softmax score of
subject ``i``'s query against object ``j``'s key is read out directly as the
logit of predicate ``p`` for the ordered pair ``(i, j)``.

The pairwise baseline runs the same encoder but restricts attention to each
object's own tokens, so nothing about a third object can reach a pair.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from . import numeric as nx
from .numeric import DimensionError, Tensor
from .scene import Scene
from .tokenizer import TokenizerParams, object_patches, tokenize_patches

KINDS = ("global", "pairwise")


@dataclass(frozen=True)
class ModelConfig:
    num_object_classes: int = 8
    num_predicates: int = 8
    D: int = 32
    L: int = 4
    layers: int = 2
    heads: int = 4
    d_k: int = 16
    ff_mult: int = 2
    kind: str = "global"
    init_seed: int = 0
    bias_prior: float = 0.05

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"model kind must be one of {KINDS}, got {self.kind!r}")
        if self.D % self.heads:
            raise ValueError(f"hidden size {self.D} not divisible by {self.heads} heads")
        if self.layers < 0 or self.L < 1 or self.d_k < 1 or self.num_predicates < 1:
            raise ValueError("invalid model dimensions")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = cls.__dataclass_fields__.keys()
        return cls(**{k: v for k, v in d.items() if k in names})


def _xavier(rng, shape, fan_in, fan_out):
    return rng.standard_normal(shape) * math.sqrt(2.0 / (fan_in + fan_out))


def init_params(cfg: ModelConfig) -> dict[str, Tensor]:
    rng = np.random.default_rng([cfg.init_seed, 0xA11])
    D, F, P, dk = cfg.D, cfg.D * cfg.ff_mult, cfg.num_predicates, cfg.d_k
    params = TokenizerParams.init(rng, cfg.num_object_classes, D, cfg.L).named()

    def add(name, value):
        params[name] = nx.parameter(value, name)

    for l in range(cfg.layers):
        pre = f"enc.{l}."
        add(pre + "ln1.g", np.ones(D))
        add(pre + "ln1.b", np.zeros(D))
        for w in ("wq", "wk", "wv", "wo"):
            add(pre + "attn." + w, _xavier(rng, (D, D), D, D))
            add(pre + "attn.b" + w[1], np.zeros(D))
        add(pre + "ln2.g", np.ones(D))
        add(pre + "ln2.b", np.zeros(D))
        add(pre + "ff.w1", _xavier(rng, (D, F), D, F))
        add(pre + "ff.b1", np.zeros(F))
        add(pre + "ff.w2", _xavier(rng, (F, D), F, D))
        add(pre + "ff.b2", np.zeros(D))
    add("head.q", _xavier(rng, (P, D, dk), D, dk))
    add("head.k", _xavier(rng, (P, D, dk), D, dk))
    prior = cfg.bias_prior
    add("head.b", np.full(P, -math.log((1 - prior) / prior)))
    return params


def attention(x: Tensor, p: dict[str, Tensor], pre: str, heads: int) -> Tensor:
    B, T, D = x.shape
    dh = D // heads

    def proj(w):
        y = nx.add(nx.matmul(x, p[pre + "attn.w" + w]), p[pre + "attn.b" + w])
        return nx.transpose(nx.reshape(y, (B, T, heads, dh)), (0, 2, 1, 3))

    q, k, v = proj("q"), proj("k"), proj("v")
    scores = nx.mul(nx.matmul(q, nx.swapaxes(k, -1, -2)), 1.0 / math.sqrt(dh))
    att = nx.softmax(scores, axis=-1)
    ctx = nx.reshape(nx.transpose(nx.matmul(att, v), (0, 2, 1, 3)), (B, T, D))
    return nx.add(nx.matmul(ctx, p[pre + "attn.wo"]), p[pre + "attn.bo"])


def encoder_layer(x: Tensor, p: dict[str, Tensor], l: int, heads: int) -> Tensor:
    pre = f"enc.{l}."
    h = nx.add(x, attention(nx.layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"]), p, pre, heads))
    z = nx.layer_norm(h, p[pre + "ln2.g"], p[pre + "ln2.b"])
    z = nx.gelu(nx.add(nx.matmul(z, p[pre + "ff.w1"]), p[pre + "ff.b1"]))
    z = nx.add(nx.matmul(z, p[pre + "ff.w2"]), p[pre + "ff.b2"])
    return nx.add(h, z)


def tokenizer_view(params: dict[str, Tensor], L: int) -> TokenizerParams:
    return TokenizerParams(params["tok.class_token"], params["tok.class_embedding"], L)


def global_context_forward(grid: Tensor, params: dict[str, Tensor], cfg: ModelConfig,
                           joint: bool | None = None) -> Tensor:
    """Object embeddings from a TokenGrid.

    ``grid`` is N x (L+1) x D or batched B x N x (L+1) x D. With ``joint``
    (the default for global models) attention spans all tokens of all
    objects; otherwise each object attends only to its own tokens.
    """
    if joint is None:
        joint = cfg.kind == "global"
    squeeze = grid.ndim == 3
    if squeeze:
        grid = nx.reshape(grid, (1,) + grid.shape)
    B, N, T, D = grid.shape
    x = nx.reshape(grid, (B, N * T, D) if joint else (B * N, T, D))
    for l in range(cfg.layers):
        x = encoder_layer(x, params, l, cfg.heads)
    emb = nx.mean(nx.reshape(x, (B, N, T, D)), axis=2)
    return nx.reshape(emb, (N, D)) if squeeze else emb


def relation_head(emb: Tensor, params: dict[str, Tensor], cfg: ModelConfig | None = None) -> Tensor:
    """N x N x P logits (or B x N x N x P for batched embeddings)."""
    squeeze = emb.ndim == 2
    if squeeze:
        emb = nx.reshape(emb, (1,) + emb.shape)
    B, N, D = emb.shape
    Wq, Wk, b = params["head.q"], params["head.k"], params["head.b"]
    P, _, dk = Wq.shape
    e = nx.reshape(emb, (B, 1, N, D))
    q = nx.matmul(e, Wq)  # B x P x N x dk
    k = nx.matmul(e, Wk)
    s = nx.mul(nx.matmul(q, nx.swapaxes(k, -1, -2)), 1.0 / math.sqrt(dk))
    s = nx.add(s, nx.reshape(b, (1, P, 1, 1)))
    logits = nx.transpose(s, (0, 2, 3, 1))
    return nx.reshape(logits, (N, N, P)) if squeeze else logits


class RelationModel:
    """Parameter container plus forward passes over scenes."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor] | None = None):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg)

    @property
    def kind(self) -> str:
        return self.cfg.kind

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def check_scene(self, scene: Scene) -> None:
        H, W, C = scene.features.shape
        if C != self.cfg.D:
            raise DimensionError(f"scene {scene.scene_id} has {C} channels, model expects {self.cfg.D}")
        if (H * W) % self.cfg.L:
            raise DimensionError(f"scene {scene.scene_id}: H*W={H * W} not divisible into {self.cfg.L} patches")
        if scene.n and int(scene.labels.max()) >= self.cfg.num_object_classes:
            raise DimensionError(f"scene {scene.scene_id} has object classes beyond the model's "
                                 f"{self.cfg.num_object_classes}")

    def forward_patches(self, patches: np.ndarray, labels: np.ndarray) -> Tensor:
        """Logits for batched inputs: patches B x N x L x D, labels B x N."""
        B, N, L, D = patches.shape
        tok = tokenize_patches(patches.reshape(B * N, L, D), labels.reshape(-1),
                               tokenizer_view(self.params, self.cfg.L))
        grid = nx.reshape(tok, (B, N, L + 1, D))
        emb = global_context_forward(grid, self.params, self.cfg)
        return relation_head(emb, self.params, self.cfg)

    def forward(self, scene: Scene) -> Tensor:
        self.check_scene(scene)
        patches = object_patches(scene, self.cfg.L)[None]
        logits = self.forward_patches(patches, scene.labels[None])
        return nx.reshape(logits, logits.shape[1:])

    def logits(self, scene: Scene) -> np.ndarray:
        return self.forward(scene).data

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        diff = set(self.params) ^ set(state)
        if diff:
            raise DimensionError(f"checkpoint parameter names differ: {sorted(diff)[:5]}")
        for k, v in state.items():
            if self.params[k].shape != v.shape:
                raise DimensionError(f"parameter {k}: checkpoint shape {v.shape} != model {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    def copy(self) -> "RelationModel":
        return RelationModel(self.cfg, {k: nx.parameter(v.data.copy(), k) for k, v in self.params.items()})


def pairwise_baseline_forward(scene: Scene, model: RelationModel) -> Tensor:
    """Logits with per-object encoding only, whatever the model's kind."""
    model.check_scene(scene)
    cfg = model.cfg
    patches = object_patches(scene, cfg.L)
    tok = tokenize_patches(patches, scene.labels, tokenizer_view(model.params, cfg.L))
    emb = global_context_forward(tok, model.params, cfg, joint=False)
    return relation_head(emb, model.params, cfg)


class Prediction(NamedTuple):
    subject: int
    object: int
    predicate: int
    score: float
    subject_label: int
    object_label: int
    subject_mask: np.ndarray
    object_mask: np.ndarray


def rank_entries(logits: np.ndarray, K: int | None = None) -> list[tuple[int, int, int, float]]:
    """Off-diagonal (i, j, p, sigmoid score), best first; ties by (i, j, p) ascending."""
    N, _, P = logits.shape
    scores = nx._sigmoid(np.asarray(logits, dtype=np.float64))
    i, j, p = np.meshgrid(np.arange(N), np.arange(N), np.arange(P), indexing="ij")
    keep = (i != j).reshape(-1)
    i, j, p, s = i.reshape(-1)[keep], j.reshape(-1)[keep], p.reshape(-1)[keep], scores.reshape(-1)[keep]
    order = np.lexsort((p, j, i, -s))
    if K is not None:
        order = order[:K]
    return [(int(i[k]), int(j[k]), int(p[k]), float(s[k])) for k in order]


def predict_triplets(logits, scene: Scene, K: int, labels: Sequence[int] | None = None,
                     masks: np.ndarray | None = None) -> list[Prediction]:
    """Top-``K`` triplets with the objects' labels and masks attached.

    ``labels``/``masks`` default to the scene's (ground-truth segmentation
    fed through the relation stage).
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    labels = scene.labels if labels is None else np.asarray(labels)
    masks = scene.masks if masks is None else masks
    return [Prediction(i, j, p, s, int(labels[i]), int(labels[j]), masks[i], masks[j])
            for i, j, p, s in rank_entries(arr, K)]


def iter_same_size(scenes: Sequence[Scene], idx: Iterable[int]) -> list[list[int]]:
    """Split an index sequence into runs of equal object count, preserving order within each."""
    groups: dict[int, list[int]] = {}
    for k in idx:
        groups.setdefault(scenes[k].n, []).append(k)
    return [groups[n] for n in sorted(groups)]
