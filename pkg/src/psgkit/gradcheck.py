"""Finite-difference suite over a seeded tiny global model."""

from __future__ import annotations

import dataclasses

import numpy as np

from . import numeric as nx
from .model import ModelConfig, RelationModel
from .numeric import GradCheckReport
from .scene import CorpusConfig, generate_scene
from .tokenizer import object_patches
from .training import focal_loss, hard_labels, soft_from_scores

TINY_CORPUS = CorpusConfig(num_scenes=2, height=8, width=8, channels=8, min_objects=3, max_objects=3,
                           num_object_classes=4, num_predicates=3, relation_density=1.0)
TINY_MODEL = ModelConfig(num_object_classes=4, num_predicates=3, D=8, L=2, layers=2, heads=2,
                         d_k=4, ff_mult=2, kind="global")


def tiny_problem(seed: int = 0):
    """(model, loss closure): a batch of two scenes with mixed hard and soft targets."""
    corpus = dataclasses.replace(TINY_CORPUS, seed=seed)
    model = RelationModel(dataclasses.replace(TINY_MODEL, init_seed=seed))
    rng = np.random.default_rng([seed, 7])
    # larger-than-init weights so every block carries a non-trivial gradient
    for p in model.params.values():
        p.data = p.data + 0.3 * rng.standard_normal(p.shape)
    scenes = [generate_scene(corpus, k) for k in range(2)]
    patches = np.stack([object_patches(s, model.cfg.L) for s in scenes])
    labels = np.stack([s.labels for s in scenes])
    hard = np.stack([hard_labels(s, model.cfg.num_predicates) for s in scenes])
    targets = soft_from_scores(hard, rng.uniform(0.0, 1.0, hard.shape), 0.5).targets

    def loss():
        return focal_loss(model.forward_patches(patches, labels), targets)

    return model, loss


def run_suite(seed: int = 0, rtol: float = 1e-3, atol: float = 1e-6, corrupt: bool = False) -> GradCheckReport:
    """Check every parameter block once; ``corrupt`` scales the analytic gradients (negative control)."""
    model, loss = tiny_problem(seed)
    analytic = None
    if corrupt:
        with nx.Tape() as tape:
            value = loss()
        analytic = {k: g * 1.1 + 1e-3 for k, g in tape.backward(value, model.params).items()}
    return nx.grad_check(loss, model.params, rtol=rtol, atol=atol, analytic=analytic)
