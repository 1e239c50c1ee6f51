"""Losses, EMA teacher, soft labels, AdamW and the two-phase training loop.

Phase 1 fits the student on hard (annotated) labels. At the phase boundary
the teacher is set to an exact copy of the student; from then on, each step
the teacher scores the batch, confident teacher beliefs are merged into the
targets as soft labels, the student takes an optimizer step on them and the
teacher follows the student as an exponential moving average.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import numeric as nx
from .model import RelationModel, iter_same_size
from .numeric import Tensor
from .scene import Scene
from .tokenizer import object_patches

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class DivergenceError(TrainingError):
    def __init__(self, msg: str, last_good: dict[str, np.ndarray], log_records: list[dict]):
        super().__init__(msg)
        self.last_good = last_good
        self.log_records = log_records


class CompatibilityError(ValueError):
    pass


# losses


def offdiag_mask(N: int) -> np.ndarray:
    return (~np.eye(N, dtype=bool)).astype(np.float64)[:, :, None]


def _check_logits(logits: Tensor, targets: np.ndarray) -> None:
    if logits.shape != targets.shape:
        raise ValueError(f"logits {logits.shape} and targets {targets.shape} differ")
    if np.isnan(logits.data).any():
        raise TrainingError("NaN in relation logits")


def _masked_mean(x: Tensor, N: int) -> Tensor:
    m = offdiag_mask(N)
    count = m.sum() * x.shape[-1] * int(np.prod(x.shape[:-3]))
    if count == 0:
        return nx.sum_(nx.mul(x, 0.0))
    return nx.mul(nx.sum_(nx.mul(x, m)), 1.0 / count)


def bce_multilabel(logits: Tensor, targets) -> Tensor:
    """Mean sigmoid cross-entropy over off-diagonal (i, j, p) entries."""
    targets = np.asarray(targets, dtype=np.float64)
    _check_logits(logits, targets)
    per = nx.add(nx.mul(targets, nx.softplus(nx.neg(logits))),
                 nx.mul(1.0 - targets, nx.softplus(logits)))
    return _masked_mean(per, logits.shape[-2])


def focal_loss(logits: Tensor, targets, gamma: float = 2.0, balance: float = 0.25) -> Tensor:
    """Binary focal loss with soft targets, mean over off-diagonal entries.

    Positive branch ``-balance * (1-p)^gamma * log p``, negative branch
    ``-p^gamma * log(1-p)``; a soft target ``t`` mixes them linearly.
    """
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    targets = np.asarray(targets, dtype=np.float64)
    _check_logits(logits, targets)
    p = nx.sigmoid(logits)
    pos = nx.mul(nx.mul(nx.power(nx.sub(1.0, p), gamma), nx.softplus(nx.neg(logits))), balance)
    neg = nx.mul(nx.power(p, gamma), nx.softplus(logits))
    per = nx.add(nx.mul(targets, pos), nx.mul(1.0 - targets, neg))
    return _masked_mean(per, logits.shape[-2])


# labels


def hard_labels(scene: Scene, num_predicates: int) -> np.ndarray:
    y = np.zeros((scene.n, scene.n, num_predicates))
    for s, o, p in scene.triplets:
        y[s, o, p] = 1.0
    return y


@dataclass
class SoftLabelTensor:
    targets: np.ndarray  # N x N x P in [0, 1]
    hard: np.ndarray  # bool, True where the entry is annotated

    @property
    def teacher_derived(self) -> np.ndarray:
        return (~self.hard) & (self.targets > 0)


def soft_from_scores(hard: np.ndarray, scores: np.ndarray, tau: float) -> SoftLabelTensor:
    kept = np.where(scores >= tau, scores, 0.0)
    targets = np.maximum(hard, kept)
    is_hard = hard >= 1.0
    targets[is_hard] = 1.0
    n = targets.shape[-2]
    targets = targets * offdiag_mask(n)
    return SoftLabelTensor(targets, is_hard)


@dataclass
class TeacherState:
    params: dict[str, np.ndarray]
    alpha: float

    @classmethod
    def from_student(cls, model: RelationModel, alpha: float) -> "TeacherState":
        return cls(model.state_dict(), alpha)

    def as_model(self, cfg) -> RelationModel:
        # plain tensors: no gradient can ever reach the teacher
        return RelationModel(cfg, {k: Tensor(v.copy(), requires_grad=False, name=k)
                                   for k, v in self.params.items()})


def ema_update(teacher: TeacherState, student: Mapping[str, Tensor | np.ndarray],
               alpha: float | None = None) -> TeacherState:
    """teacher * alpha + student * (1 - alpha), elementwise; returns a new state."""
    a = teacher.alpha if alpha is None else alpha
    if not 0.0 <= a <= 1.0:
        raise ValueError("EMA decay must lie in [0, 1]")
    if set(teacher.params) != set(student):
        raise CompatibilityError("teacher and student parameter names differ")
    out = {}
    for k, t in teacher.params.items():
        s = student[k].data if isinstance(student[k], Tensor) else np.asarray(student[k])
        if s.shape != t.shape:
            raise CompatibilityError(f"parameter {k}: teacher {t.shape} vs student {s.shape}")
        out[k] = t * a + s * (1.0 - a)
    return TeacherState(out, teacher.alpha)


def make_soft_labels(teacher: TeacherState | RelationModel, scene: Scene, tau: float = 0.5,
                     cfg=None) -> SoftLabelTensor:
    """Teacher beliefs >= tau merged with the annotated labels (which stay at 1)."""
    if isinstance(teacher, TeacherState):
        if cfg is None:
            raise ValueError("cfg is required to run a TeacherState")
        teacher = teacher.as_model(cfg)
    scores = nx._sigmoid(teacher.logits(scene))
    return soft_from_scores(hard_labels(scene, scores.shape[-1]), scores, tau)


# optimizer


@dataclass
class AdamW:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
             lr: float, weight_decay: float = 0.0) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for k, p in params.items():
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(p.data)
                self.v[k] = np.zeros_like(p.data)
            m = self.m[k] = b1 * self.m[k] + (1 - b1) * g
            v = self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            p.data = p.data * (1.0 - lr * weight_decay) - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adamw_step(params, grads, state: AdamW, lr: float, weight_decay: float = 0.0) -> AdamW:
    state.step(params, grads, lr, weight_decay)
    return state


# schedule and loop


@dataclass(frozen=True)
class TrainSchedule:
    phase1_epochs: int = 10
    phase2_epochs: int = 5
    alpha: float = 0.999
    lr: float = 1e-4
    weight_decay: float = 0.05
    lr_decay_epochs: tuple[int, ...] = (6, 10)
    lr_decay_factor: float = 0.1
    gamma: float = 2.0
    balance: float = 0.25
    tau: float = 0.5
    batch_size: int = 8
    seed: int = 0
    phase2_loss: str = "focal"
    soft_refresh: str = "step"

    def __post_init__(self):
        if self.phase1_epochs < 0 or self.phase2_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if not 0.0 <= self.tau < 1.0:
            raise ValueError("tau must lie in [0, 1)")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.phase2_loss not in ("focal", "bce"):
            raise ValueError("phase2_loss must be 'focal' or 'bce'")
        if self.soft_refresh not in ("step", "epoch"):
            raise ValueError("soft_refresh must be 'step' or 'epoch'")
        object.__setattr__(self, "lr_decay_epochs", tuple(int(e) for e in self.lr_decay_epochs))

    @property
    def total_epochs(self) -> int:
        return self.phase1_epochs + self.phase2_epochs

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``; decays after each listed epoch."""
        k = sum(1 for e in self.lr_decay_epochs if epoch > e)
        return self.lr * self.lr_decay_factor ** k

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lr_decay_epochs"] = list(self.lr_decay_epochs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainSchedule":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: (tuple(v) if k == "lr_decay_epochs" else v) for k, v in d.items() if k in names})


@dataclass
class TrainResult:
    model: RelationModel
    teacher: TeacherState | None
    log: list[dict]
    phase1_state: dict[str, np.ndarray]


def _group_arrays(cache, idx):
    patches = np.stack([cache[k][0] for k in idx])
    labels = np.stack([cache[k][1] for k in idx])
    hard = np.stack([cache[k][2] for k in idx])
    return patches, labels, hard


def train(corpus: Sequence[Scene], model: RelationModel, schedule: TrainSchedule,
          progress=None) -> TrainResult:
    """Two-phase training; deterministic given the schedule seed."""
    if not corpus:
        raise TrainingError("training corpus is empty")
    cfg = model.cfg
    P = cfg.num_predicates
    for s in corpus:
        model.check_scene(s)
        if s.triplets and max(p for _, _, p in s.triplets) >= P:
            raise CompatibilityError(f"scene {s.scene_id} uses predicates beyond the model's {P}")
    cache = [(object_patches(s, cfg.L), s.labels.astype(np.int64), hard_labels(s, P)) for s in corpus]

    params = model.params
    opt = AdamW()
    teacher: TeacherState | None = None
    teacher_model: RelationModel | None = None
    records: list[dict] = []
    last_good = model.state_dict()
    phase1_state = last_good
    epoch_soft: dict[int, np.ndarray] = {}

    def teacher_targets(idx, hard, patches, labels):
        if schedule.soft_refresh == "epoch":
            return np.stack([epoch_soft[k] for k in idx])
        scores = nx._sigmoid(teacher_model.forward_patches(patches, labels).data)
        return soft_from_scores(hard, scores, schedule.tau).targets

    for epoch in range(1, schedule.total_epochs + 1):
        phase = 1 if epoch <= schedule.phase1_epochs else 2
        if phase == 2 and teacher is None:
            phase1_state = model.state_dict()
            teacher = TeacherState.from_student(model, schedule.alpha)
            teacher_model = teacher.as_model(cfg)
        if phase == 2 and schedule.soft_refresh == "epoch":
            epoch_soft.clear()
            for k, s in enumerate(corpus):
                sc = nx._sigmoid(teacher_model.forward_patches(cache[k][0][None], cache[k][1][None]).data[0])
                epoch_soft[k] = soft_from_scores(cache[k][2], sc, schedule.tau).targets
        lr = schedule.lr_at(epoch)
        rng = np.random.default_rng([schedule.seed, epoch])
        order = rng.permutation(len(corpus))
        losses = []
        for b in range(0, len(order), schedule.batch_size):
            batch = order[b:b + schedule.batch_size]
            grads = {k: np.zeros_like(p.data) for k, p in params.items()}
            batch_loss = 0.0
            for idx in iter_same_size(corpus, batch):
                patches, labels, hard = _group_arrays(cache, idx)
                targets = hard if phase == 1 else teacher_targets(idx, hard, patches, labels)
                weight = len(idx) / len(batch)
                with nx.Tape() as tape:
                    logits = model.forward_patches(patches, labels)
                    if np.isnan(logits.data).any():
                        raise DivergenceError(f"NaN logits at epoch {epoch}", last_good, records)
                    if phase == 2 and schedule.phase2_loss == "bce":
                        loss = bce_multilabel(logits, targets)
                    else:
                        loss = focal_loss(logits, targets, schedule.gamma, schedule.balance)
                    loss = nx.mul(loss, weight)
                if not np.isfinite(loss.data):
                    raise DivergenceError(f"loss became {loss.item()} at epoch {epoch}", last_good, records)
                g = tape.backward(loss, params)
                for k in grads:
                    grads[k] += g[k]
                batch_loss += loss.item()
            opt.step(params, grads, lr, schedule.weight_decay)
            if any(not np.isfinite(p.data).all() for p in params.values()):
                raise DivergenceError(f"parameters diverged at epoch {epoch}", last_good, records)
            losses.append(batch_loss)
            if phase == 2:
                teacher = ema_update(teacher, params)
                for k, v in teacher.params.items():
                    teacher_model.params[k].data = v
        rec = {"epoch": epoch, "phase": phase, "mean_loss": float(np.mean(losses)), "lr": lr}
        records.append(rec)
        last_good = model.state_dict()
        log.info("epoch %d phase %d loss %.6f lr %.2e", epoch, phase, rec["mean_loss"], lr)
        if progress is not None:
            progress(rec)
    if teacher is None:
        phase1_state = model.state_dict()
    return TrainResult(model, teacher, records, phase1_state)
