"""Factor-preserving adaptation: group-wise masking of the domain-loss gradient.

A sample of domain ``k`` only lets the domain neurons of domains that share its
value of the preserved factor receive gradient.  Domains in different groups
therefore never compete, and the extractor is not pushed to remove the factor.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Mapping, Sequence

import numpy as np

from .dann import AdaptationState, Losses, Model, TrainBatch, train_step
from .diffengine import ShapeError


FPDA_MODES = ("group", "literal")


class AssignmentError(ValueError):
    pass


@dataclass(frozen=True)
class FactorAssignment:
    """Categorical value of the preserved factor for each domain, in neuron order."""

    factor: str
    domain_ids: tuple
    values: tuple

    def __post_init__(self):
        if len(self.domain_ids) != len(self.values):
            raise AssignmentError("one factor value per domain required")
        if len(set(self.domain_ids)) != len(self.domain_ids):
            raise AssignmentError("duplicate domain ids in assignment")
        if not self.domain_ids:
            raise AssignmentError("empty assignment")

    @classmethod
    def from_mapping(cls, mapping: Mapping[Any, Any], factor: str = "group") -> "FactorAssignment":
        ids = tuple(sorted(mapping))
        return cls(factor, ids, tuple(mapping[d] for d in ids))

    def as_mapping(self) -> dict:
        return dict(zip(self.domain_ids, self.values))

    @property
    def num_domains(self) -> int:
        return len(self.domain_ids)

    def groups(self) -> dict[Any, tuple]:
        out: dict[Any, list] = {}
        for d, v in zip(self.domain_ids, self.values):
            out.setdefault(v, []).append(d)
        return {v: tuple(ds) for v, ds in out.items()}

    def restrict(self, domain_ids: Sequence) -> "FactorAssignment":
        """Assignment over ``domain_ids`` in that order (e.g. the model's neuron order)."""
        lookup = self.as_mapping()
        missing = [d for d in domain_ids if d not in lookup]
        if missing:
            raise AssignmentError(f"no {self.factor!r} value for domains {missing}")
        return FactorAssignment(self.factor, tuple(domain_ids), tuple(lookup[d] for d in domain_ids))


def compute_mask(assignment: FactorAssignment, k: int) -> np.ndarray:
    """``z_j = 1`` iff domain ``j`` shares the factor value of domain ``k``."""
    m = assignment.num_domains
    if not 0 <= k < m:
        raise AssignmentError(f"domain index {k} has no assignment (m={m})")
    own = assignment.values[k]
    return np.array([1.0 if v == own else 0.0 for v in assignment.values])


def group_masks(assignment: FactorAssignment) -> dict[Any, np.ndarray]:
    """One mask per distinct factor value."""
    masks = {}
    for k, v in enumerate(assignment.values):
        if v not in masks:
            masks[v] = compute_mask(assignment, k)
    return masks


def sample_masks(assignment: FactorAssignment, domain_labels: np.ndarray) -> np.ndarray:
    table = np.stack([compute_mask(assignment, k) for k in range(assignment.num_domains)])
    domain_labels = np.asarray(domain_labels, dtype=np.int64)
    if domain_labels.size and (domain_labels.min() < 0 or domain_labels.max() >= assignment.num_domains):
        raise AssignmentError("batch contains domains not covered by the assignment")
    return table[domain_labels]


def apply_mask(grad: np.ndarray, z: np.ndarray) -> np.ndarray:
    grad = np.asarray(grad, dtype=float)
    z = np.asarray(z, dtype=float)
    if grad.shape != z.shape:
        raise ShapeError(f"gradient shape {grad.shape} and mask shape {z.shape} differ")
    return grad * z


def fpda_train_step(
    model: Model,
    batch: TrainBatch,
    state: AdaptationState,
    mu: float,
    assignment: FactorAssignment,
    rng: np.random.Generator | None = None,
    mode: str = "group",
) -> Losses:
    """Adversarial step with the per-sample group mask on the domain-logit gradient.

    ``mode="literal"`` multiplies the full-softmax gradient ``p - onehot`` by the
    mask.  Its masked rows no longer sum to zero, and the uncompensated
    common-mode push can grow a multi-layer domain head without bound.
    ``mode="group"`` (default) takes the gradient of a softmax restricted to the
    sample's group, then masks it.
    """
    if mode not in FPDA_MODES:
        raise ValueError(f"unknown FP-DA mode {mode!r}; expected one of {FPDA_MODES}")
    if assignment.num_domains != model.num_domains:
        raise AssignmentError(f"assignment covers {assignment.num_domains} domains, model has {model.num_domains}")
    masks = sample_masks(assignment, batch.domain_labels)
    return train_step(model, batch, state, mu, mask=masks, rng=rng, restrict_softmax=(mode == "group"))


def grouping_from_factor(domain_specs: Sequence, factor_name: str) -> FactorAssignment:
    """Read the preserved factor's value off each domain's fixed domain-factor values."""
    ids, values = [], []
    for spec in domain_specs:
        if factor_name not in spec.values:
            raise AssignmentError(f"{factor_name!r} is not a domain factor of domain {spec.id}")
        val = spec.values[factor_name]
        if isinstance(val, (list, tuple, set, np.ndarray)):
            raise AssignmentError(f"{factor_name!r} is not a domain factor: it varies within domain {spec.id}")
        ids.append(spec.id)
        values.append(val)
    order = np.argsort(ids, kind="stable")
    return FactorAssignment(factor_name, tuple(ids[i] for i in order), tuple(values[i] for i in order))
