"""Training objectives: supervised CE, confidence-gated consistency, and the
two proxy-contrastive terms over the unlabeled batch.

Batch roles come from the weak-view confidences, which are always treated as
constants: gradients flow through the projected embeddings and the proxies,
never through the partition, the pseudo labels, or the surrogate weights.

A sample is "confident" when its top confidence reaches the threshold; it
then carries a pseudo label. Every other sample is "unconfident" and carries
its candidate set, the classes scoring strictly above uniform (1/C); the
excluded set is the complement and is always derived, never stored.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, as_tensor, concat_rows, gather_rows, row_logsumexp
from .errors import ConfigError, DataError, DegenerateInputError, ShapeError
from .model import class_confidence, featurize, project_features, project_proxies
from .numerics import GradientSet, as_matrix, softmax_rows
from .synthdata import strong_augment, weak_augment


@dataclass(frozen=True)
class MethodFlags:
    """Which terms beyond supervised CE participate in the total loss."""
    unsup: bool = True
    upc: bool = True
    sc: bool = True


@dataclass(frozen=True)
class BatchPartition:
    confident: tuple          # ((batch_index, pseudo_label), ...)
    unconfident: tuple        # ((batch_index, frozenset(candidates)), ...)
    threshold: float
    num_classes: int

    @property
    def confident_indices(self) -> np.ndarray:
        return np.asarray([i for i, _ in self.confident], dtype=np.int64)

    @property
    def pseudo_labels(self) -> np.ndarray:
        return np.asarray([y for _, y in self.confident], dtype=np.int64)

    @property
    def unconfident_indices(self) -> np.ndarray:
        return np.asarray([i for i, _ in self.unconfident], dtype=np.int64)

    @property
    def candidate_sets(self) -> tuple:
        return tuple(cand for _, cand in self.unconfident)

    @property
    def degenerate_uniform(self) -> int:
        """Unconfident samples whose candidate set is empty (row exactly uniform)."""
        return sum(1 for _, cand in self.unconfident if not cand)

    def excluded(self, cand: frozenset) -> frozenset:
        return frozenset(range(self.num_classes)) - cand


def check_threshold(tau: float, num_classes: int) -> None:
    if not (1.0 / num_classes < tau < 1.0):
        raise ConfigError(f"threshold {tau} must lie strictly between 1/{num_classes} and 1")


def partition_unlabeled(conf, tau: float) -> BatchPartition:
    """Split confidence rows into confident (max >= tau) and unconfident rest.

    Pseudo labels break argmax ties toward the lowest class index. Candidate
    membership is strict (> 1/C), so an exactly uniform row gets an empty set.
    """
    conf = as_matrix(conf)
    n, c = conf.shape
    if c < 2:
        raise ShapeError("confidence matrix needs at least two columns")
    check_threshold(tau, c)
    uniform = 1.0 / c
    confident, unconfident = [], []
    for i in range(n):
        row = conf[i]
        if row.max() >= tau:
            confident.append((i, int(row.argmax())))
        else:
            unconfident.append((i, frozenset(int(y) for y in np.flatnonzero(row > uniform))))
    return BatchPartition(tuple(confident), tuple(unconfident), tau, c)


@dataclass(frozen=True)
class LossBreakdown:
    l_sup: float
    l_unsup: float
    l_upc: float
    l_sc: float
    l_total: float
    n_confident: int
    n_unconfident: int
    degenerate_uniform: int

    def term(self, name: str) -> float:
        return getattr(self, f"l_{name}")


class _TensorParams:
    """ModelState mirrored as autograd leaves, shaped like the state itself so
    the model forward functions work on it unchanged."""

    def __init__(self, state):
        self.dims = state.dims
        self.leaves = {name: Tensor(arr) for name, arr in state.param_items()}
        lv = self.leaves
        self.featurizer = [(lv[f"featurizer.{i}.weight"], lv[f"featurizer.{i}.bias"])
                           for i in range(len(state.featurizer))]
        self.classifier = lv["classifier.weight"]
        self.feature_projector = (lv["feature_projector.weight"], lv["feature_projector.bias"])
        self.classifier_projector = (lv["classifier_projector.weight"], lv["classifier_projector.bias"])

    def gradient_set(self) -> GradientSet:
        return GradientSet({name: t.grad if t.grad is not None else np.zeros_like(t.data)
                            for name, t in self.leaves.items()})


def _cross_entropy(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError("label out of range")
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    picked = (logits * onehot).sum(axis=1, keepdims=True)
    return (row_logsumexp(logits) - picked).mean()


def supervised_loss(state, x_l, y_l) -> tuple[float, GradientSet]:
    """Mean CE of the proxy classifier on labeled inputs."""
    x_l = np.asarray(x_l, dtype=np.float64)
    y_l = np.asarray(y_l, dtype=np.int64)
    if len(x_l) != len(y_l):
        raise ShapeError("labeled inputs and labels disagree in length")
    if len(y_l) == 0:
        return 0.0, GradientSet.zeros_like(state)
    tp = _TensorParams(state)
    loss = _cross_entropy(featurize(tp, x_l) @ tp.classifier.T, y_l)
    loss.backward()
    return loss.item(), tp.gradient_set()


def consistency_loss(state, x_u, tau: float, rng, sigma_weak: float = 0.05,
                     sigma_strong: float = 0.5, strong_dropout: float = 0.2
                     ) -> tuple[float, GradientSet, BatchPartition]:
    """FixMatch-style consistency: CE on strong views of the confident subset
    against weak-view pseudo labels.

    RNG consumption order: weak noise over the full batch, then strong noise
    and the dropout mask over the confident rows only.
    """
    x_u = np.asarray(x_u, dtype=np.float64)
    c = state.dims.num_classes
    if len(x_u) == 0:
        check_threshold(tau, c)
        part = BatchPartition((), (), tau, c)
        return 0.0, GradientSet.zeros_like(state), part
    xw = weak_augment(x_u, rng, sigma_weak)
    conf = class_confidence(state, featurize(state, xw))
    part = partition_unlabeled(conf, tau)
    ci = part.confident_indices
    if ci.size == 0:
        return 0.0, GradientSet.zeros_like(state), part
    xs = strong_augment(x_u[ci], rng, sigma_strong, strong_dropout)
    tp = _TensorParams(state)
    loss = _cross_entropy(featurize(tp, xs) @ tp.classifier.T, part.pseudo_labels)
    loss.backward()
    return loss.item(), tp.gradient_set(), part


def pcl_reference_loss(z, w, labels) -> float:
    """Plain-loop proxy contrastive loss over fully labeled embeddings.

    Positive pair (z_i, w_{y_i}); negatives are embeddings of samples with a
    different label. Kept deliberately naive to serve as a value oracle.
    """
    z = as_matrix(z)
    w = as_matrix(w)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) != len(z):
        raise ShapeError("labels and embeddings disagree in length")
    if z.shape[1] != w.shape[1]:
        raise ShapeError("embedding and proxy widths differ")
    if len(z) == 0:
        raise DataError("reference loss needs at least one sample")
    total = 0.0
    for i in range(len(z)):
        pos = math.exp(float(z[i] @ w[labels[i]]))
        rest = 0.0
        for j in range(len(z)):
            if labels[j] != labels[i]:
                rest += math.exp(float(z[i] @ z[j]))
        total += -math.log(pos / (pos + rest))
    return total / len(z)


def upc_negative_masks(pseudo, candidates) -> tuple[np.ndarray, np.ndarray]:
    """0/1 negative-pair selections for the confident-anchor loss.

    Returns (vs_confident, vs_unconfident): vs_confident[i, j] = 1 when
    confident j carries a different pseudo label than anchor i, and
    vs_unconfident[i, j] = 1 when unconfident j's candidate set excludes
    anchor i's pseudo label. These are the masks the loss itself consumes.
    """
    pseudo = np.asarray(pseudo, dtype=np.int64)
    vs_confident = (pseudo[:, None] != pseudo[None, :]).astype(np.float64)
    vs_unconfident = np.asarray(
        [[0.0 if pseudo[i] in candidates[j] else 1.0
          for j in range(len(candidates))] for i in range(len(pseudo))],
    ).reshape(len(pseudo), len(candidates))
    return vs_confident, vs_unconfident


def upc_loss(z_uc, w, pseudo, z_uu, candidates) -> Tensor:
    """Contrastive pull of confident embeddings toward their pseudo proxies.

    Anchor i (confident) pairs with w_{pseudo_i}. Negatives: confident j with
    a different pseudo label, plus unconfident j whose candidate set excludes
    pseudo_i. Returns a scalar Tensor (call .item() for the value, .backward()
    for gradients); with no confident samples the result is a constant zero.
    """
    z_uc, w, z_uu = as_tensor(z_uc), as_tensor(w), as_tensor(z_uu)
    pseudo = np.asarray(pseudo, dtype=np.int64)
    n_uc, n_uu = z_uc.shape[0], z_uu.shape[0]
    if len(pseudo) != n_uc:
        raise ShapeError("pseudo labels and confident embeddings disagree in length")
    if len(candidates) != n_uu:
        raise ShapeError("candidate sets and unconfident embeddings disagree in length")
    if n_uc == 0:
        return as_tensor(0.0)
    c = w.shape[0]
    if pseudo.min() < 0 or pseudo.max() >= c:
        raise ValueError("pseudo label out of range")
    onehot = np.zeros((n_uc, c))
    onehot[np.arange(n_uc), pseudo] = 1.0
    pos = (z_uc @ w.T * onehot).sum(axis=1, keepdims=True)
    vs_confident, vs_unconfident = upc_negative_masks(pseudo, candidates)
    rest = ((z_uc @ z_uc.T).exp() * vs_confident).sum(axis=1, keepdims=True)
    if n_uu:
        rest = rest + ((z_uc @ z_uu.T).exp() * vs_unconfident).sum(axis=1, keepdims=True)
    # log(exp(pos) + rest) - pos, arranged so an anchor with no negatives
    # contributes log(1) = 0 exactly instead of rounding noise
    return (1.0 + rest * (-pos).exp()).log().mean()


def surrogate_class(conf_row, candidate, w):
    """Confidence-weighted blend of candidate proxies for one unconfident sample."""
    conf_row = np.asarray(conf_row, dtype=np.float64).reshape(-1)
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != conf_row.size:
        raise ShapeError("proxy matrix must have one row per class")
    if not candidate:
        raise DegenerateInputError("empty candidate set has no surrogate class")
    weights = np.zeros(conf_row.size)
    for y in candidate:
        weights[y] = conf_row[y]
    return weights @ w


def _surrogate_weights(conf_u: np.ndarray, candidates) -> np.ndarray:
    """Per-row proxy weights, zero outside the candidate set."""
    weights = np.zeros_like(conf_u)
    for i, cand in enumerate(candidates):
        for y in cand:
            weights[i, y] = conf_u[i, y]
    return weights


def sc_anchor_indices(candidates) -> np.ndarray:
    """Unconfident rows that qualify as anchors: nonempty candidate set."""
    return np.asarray([i for i in range(len(candidates)) if candidates[i]],
                      dtype=np.int64)


def sc_negative_masks(candidates, pseudo) -> tuple[np.ndarray, np.ndarray]:
    """0/1 negative-pair selections for the unconfident-anchor loss.

    Row order follows sc_anchor_indices(candidates). vs_confident[a, j] = 1
    when confident j's pseudo label falls outside anchor a's candidate set;
    vs_unconfident[a, j] = 1 when unconfident j's candidate set shares no
    class with anchor a's. These are the masks the loss itself consumes.
    """
    pseudo = np.asarray(pseudo, dtype=np.int64)
    anchors = sc_anchor_indices(candidates)
    vs_confident = np.asarray(
        [[0.0 if pseudo[j] in candidates[i] else 1.0
          for j in range(len(pseudo))] for i in anchors],
    ).reshape(len(anchors), len(pseudo))
    vs_unconfident = np.asarray(
        [[1.0 if candidates[i].isdisjoint(candidates[j]) else 0.0
          for j in range(len(candidates))] for i in anchors],
    ).reshape(len(anchors), len(candidates))
    return vs_confident, vs_unconfident


def sc_loss(z_uu, surrogates, candidates, z_uc, pseudo) -> Tensor:
    """Contrastive pull of unconfident embeddings toward their surrogate class.

    Anchors are unconfident samples with a nonempty candidate set; rows with
    an empty set are skipped as anchors but still obey the negative rules.
    Negatives: confident j whose pseudo label the anchor excludes, plus
    unconfident j whose candidate set is disjoint from the anchor's.
    """
    z_uu, surrogates, z_uc = as_tensor(z_uu), as_tensor(surrogates), as_tensor(z_uc)
    pseudo = np.asarray(pseudo, dtype=np.int64)
    n_uu, n_uc = z_uu.shape[0], z_uc.shape[0]
    if len(candidates) != n_uu:
        raise ShapeError("candidate sets and unconfident embeddings disagree in length")
    if surrogates.shape != z_uu.shape:
        raise ShapeError("surrogates must align with unconfident embeddings")
    if len(pseudo) != n_uc:
        raise ShapeError("pseudo labels and confident embeddings disagree in length")
    anchors = sc_anchor_indices(candidates)
    if anchors.size == 0:
        return as_tensor(0.0)
    vs_confident, vs_unconfident = sc_negative_masks(candidates, pseudo)
    z_a = gather_rows(z_uu, anchors)
    pos = (z_a * gather_rows(surrogates, anchors)).sum(axis=1, keepdims=True)
    if n_uc:
        rest = ((z_a @ z_uc.T).exp() * vs_confident).sum(axis=1, keepdims=True)
    else:
        rest = as_tensor(np.zeros((anchors.size, 1)))
    rest = rest + ((z_a @ z_uu.T).exp() * vs_unconfident).sum(axis=1, keepdims=True)
    # same nonnegative arrangement as the confident-side loss
    return (1.0 + rest * (-pos).exp()).log().mean()


def build_loss_graph(state, batch, flags: MethodFlags, tau: float, rng,
                     sigma_weak: float = 0.05, sigma_strong: float = 0.5,
                     strong_dropout: float = 0.2, confidences=None):
    """Assemble every loss term on one tape.

    Returns (terms, partition, tensor_params) with terms a dict of scalar
    Tensors for sup/unsup/upc/sc. Augmentations are drawn before any flag is
    consulted and shared quantities are computed one way only, so switching
    terms on or off never perturbs the others.

    Both the weak and the strong view of each unlabeled sample enter the
    contrastive terms, inheriting the sample's weak-view role.

    `confidences` substitutes for the weak-view confidence matrix. The losses
    treat that matrix as a constant input (no gradient flows through it), so
    finite-difference probes pass the base point's matrix here to hold the
    constant actually constant while parameters are perturbed.
    """
    tp = _TensorParams(state)
    x_l = np.asarray(batch.labeled_x, dtype=np.float64)
    y_l = np.asarray(batch.labeled_y, dtype=np.int64)
    x_u = np.asarray(batch.unlabeled_x, dtype=np.float64)

    sup = _cross_entropy(featurize(tp, x_l) @ tp.classifier.T, y_l) if len(y_l) else as_tensor(0.0)

    xw = weak_augment(x_u, rng, sigma_weak)
    xs = strong_augment(x_u, rng, sigma_strong, strong_dropout)
    c = state.dims.num_classes
    if len(x_u):
        f_w = featurize(tp, xw)
        f_s = featurize(tp, xs)
        if confidences is None:
            conf = softmax_rows(f_w.data @ state.classifier.T)
        else:
            conf = as_matrix(confidences)
            if conf.shape != (len(x_u), c):
                raise ShapeError(f"pinned confidences must be {(len(x_u), c)}, got {conf.shape}")
        part = partition_unlabeled(conf, tau)
    else:
        check_threshold(tau, c)
        part = BatchPartition((), (), tau, c)

    unsup = upc = sc = as_tensor(0.0)
    ci = part.confident_indices
    ui = part.unconfident_indices
    if flags.unsup and ci.size:
        unsup = _cross_entropy(gather_rows(f_s, ci) @ tp.classifier.T, part.pseudo_labels)
    if (flags.upc or flags.sc) and len(x_u):
        w = project_proxies(tp)
        z_w = project_features(tp, f_w)
        z_s = project_features(tp, f_s)
        z_uc = concat_rows([gather_rows(z_w, ci), gather_rows(z_s, ci)])
        z_uu = concat_rows([gather_rows(z_w, ui), gather_rows(z_s, ui)])
        pseudo2 = np.concatenate([part.pseudo_labels, part.pseudo_labels])
        cands2 = part.candidate_sets + part.candidate_sets
        if flags.upc:
            upc = upc_loss(z_uc, w, pseudo2, z_uu, cands2)
        if flags.sc:
            weights = _surrogate_weights(conf[ui], part.candidate_sets)
            surrogates = np.concatenate([weights, weights]) @ w
            sc = sc_loss(z_uu, surrogates, cands2, z_uc, pseudo2)

    terms = {"sup": sup, "unsup": unsup, "upc": upc, "sc": sc}
    return terms, part, tp


def total_loss(state, batch, flags: MethodFlags, tau: float, rng,
               sigma_weak: float = 0.05, sigma_strong: float = 0.5,
               strong_dropout: float = 0.2) -> tuple[LossBreakdown, GradientSet]:
    """Equal-weight sum of the enabled terms, with gradients."""
    terms, part, tp = build_loss_graph(state, batch, flags, tau, rng,
                                       sigma_weak, sigma_strong, strong_dropout)
    total = terms["sup"] + terms["unsup"] + terms["upc"] + terms["sc"]
    total.backward()
    breakdown = LossBreakdown(
        l_sup=terms["sup"].item(),
        l_unsup=terms["unsup"].item(),
        l_upc=terms["upc"].item(),
        l_sc=terms["sc"].item(),
        l_total=total.item(),
        n_confident=len(part.confident),
        n_unconfident=len(part.unconfident),
        degenerate_uniform=part.degenerate_uniform,
    )
    return breakdown, tp.gradient_set()
