"""Batch construction, batch-hard mining, the reconstruction-embedded triplet
loss, and the alternating training step.

Mining and the reported loss use the combined distance: global Euclidean plus
the mean-residual-norm reconstruction distance, with the anchor always
reconstructed from the other sample's dictionary. The training step follows
the two-phase alternation: phase one freezes the encoder and computes the
mined triplets, the hinge active set, the coefficient matrices, and (when
normalization is on) the column scales, all of which stay fixed through the
update; phase two backpropagates the squared-Frobenius-residual gradients in
the solve's coordinates, chained through the frozen scales, plus the global
Euclidean gradients, through the pooling layers into the encoder, and applies
one SGD update.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np

from .encoder import EncoderParams, LayerGradients, ToyImage, encode_backward, encode_raw, sgd_update
from .errors import MismatchError
from .features import (
    DEFAULT_PYRAMID,
    FeatureMatrix,
    GlobalFeature,
    PyramidSpec,
    l2_normalize_columns,
    pool_columns,
    usable_kernels,
)
from .reconstruction import DictionaryFactor, ReconstructionCoefficients


@dataclass(frozen=True)
class BatchSample:
    """One batch element: identity label, pooled features, and (for training)
    the raw image the features were encoded from."""

    label: Hashable
    global_feature: GlobalFeature
    spatial: FeatureMatrix
    image: ToyImage | None = None


@dataclass(frozen=True)
class TripletBatch:
    """P identities x K images; every identity appears exactly K times."""

    subjects: int
    images_per_subject: int
    samples: tuple[BatchSample, ...]
    margin: float = 0.3

    def __post_init__(self) -> None:
        object.__setattr__(self, "samples", tuple(self.samples))
        p, k = self.subjects, self.images_per_subject
        if p < 2 or k < 2:
            raise ValueError(f"need P >= 2 and K >= 2, got P={p}, K={k}")
        if len(self.samples) != p * k:
            raise ValueError(f"expected {p * k} samples, got {len(self.samples)}")
        counts = Counter(s.label for s in self.samples)
        if len(counts) != p or any(c != k for c in counts.values()):
            raise ValueError(f"each of {p} identities must appear exactly {k} times, got {dict(counts)}")
        if self.margin < 0:
            raise ValueError(f"margin must be nonnegative, got {self.margin}")


@dataclass(frozen=True)
class MinedTriplet:
    anchor_idx: int
    positive_idx: int
    negative_idx: int
    positive_distance: float  # max combined distance over the anchor's positives
    negative_distance: float  # min combined distance over the anchor's negatives


@dataclass(frozen=True)
class LossReport:
    total_loss: float
    active_triplets: int
    per_triplet_terms: tuple[float, ...]


def euclidean_distance(a: GlobalFeature, b: GlobalFeature) -> float:
    if a.dim != b.dim:
        raise MismatchError(f"global feature dims differ: {a.dim} vs {b.dim}")
    return float(np.linalg.norm(a.values - b.values))


def combined_distance(a: BatchSample, b: BatchSample, beta: float) -> float:
    """Global Euclidean distance plus reconstruction distance, with a's
    spatial features reconstructed from b's dictionary (the asymmetric
    anchor-to-other direction)."""
    return (
        euclidean_distance(a.global_feature, b.global_feature)
        + DictionaryFactor(b.spatial, beta).reconstruct(a.spatial).distance
    )


def _combined_matrix(samples: Sequence[BatchSample], beta: float) -> np.ndarray:
    # d[i, j] = combined distance of anchor i against dictionary j; the
    # per-dictionary Cholesky factor is shared across anchors, which is
    # arithmetic-identical to combined_distance pair by pair.
    n = len(samples)
    d = np.zeros((n, n))
    for j in range(n):
        factor = DictionaryFactor(samples[j].spatial, beta)
        for i in range(n):
            if i == j:
                continue
            d[i, j] = (
                euclidean_distance(samples[i].global_feature, samples[j].global_feature)
                + factor.reconstruct(samples[i].spatial).distance
            )
    return d


def batch_hard_mine(batch: TripletBatch, beta: float) -> list[MinedTriplet]:
    """Per anchor: hardest positive (argmax combined distance over the same
    identity, anchor excluded) and hardest negative (argmin over different
    identities). Ties break to the lowest sample index."""
    samples = batch.samples
    d = _combined_matrix(samples, beta)
    labels = [s.label for s in samples]
    mined = []
    for a in range(len(samples)):
        pos = [j for j in range(len(samples)) if j != a and labels[j] == labels[a]]
        neg = [j for j in range(len(samples)) if labels[j] != labels[a]]
        j_p = pos[int(np.argmax(d[a, pos]))]
        j_n = neg[int(np.argmin(d[a, neg]))]
        mined.append(MinedTriplet(a, j_p, j_n, float(d[a, j_p]), float(d[a, j_n])))
    return mined


def _loss_terms(mined: Iterable[MinedTriplet], margin: float) -> LossReport:
    terms = tuple(max(0.0, margin + t.positive_distance - t.negative_distance) for t in mined)
    return LossReport(float(sum(terms)), sum(1 for t in terms if t > 0.0), terms)


def sfr_triplet_loss(batch: TripletBatch, beta: float, margin: float) -> LossReport:
    """Sum over anchors of hinge(margin + hardest-positive - hardest-negative)."""
    if margin < 0:
        raise ValueError(f"margin must be nonnegative, got {margin}")
    return _loss_terms(batch_hard_mine(batch, beta), margin)


def sample_batch(
    pool: Mapping[Hashable, Sequence[ToyImage]],
    p: int,
    k: int,
    rng: np.random.Generator,
) -> list[tuple[Hashable, ToyImage]]:
    """Draw P identities and K images each; identities with fewer than K
    images are sampled with replacement."""
    labels = sorted(pool.keys(), key=str)
    if p > len(labels):
        raise ValueError(f"cannot sample {p} identities from {len(labels)}")
    picked = rng.choice(len(labels), size=p, replace=False)
    out = []
    for li in picked:
        label = labels[int(li)]
        images = pool[label]
        replace = len(images) < k
        for ii in rng.choice(len(images), size=k, replace=replace):
            out.append((label, images[int(ii)]))
    return out


def _forward_sample(image: ToyImage, params: EncoderParams, pyramid: PyramidSpec, normalize: bool):
    grid = encode_raw(image, params)
    g = grid.mean(axis=(1, 2))
    x_raw = pool_columns(grid, pyramid)
    m_raw = FeatureMatrix(x_raw)
    m_used = l2_normalize_columns(m_raw) if normalize else m_raw
    return grid.shape, g, x_raw, m_used


def encode_batch_sample(
    label: Hashable,
    image: ToyImage,
    params: EncoderParams,
    *,
    pyramid: PyramidSpec = DEFAULT_PYRAMID,
    normalize: bool = True,
) -> BatchSample:
    _, g, _, m_used = _forward_sample(image, params, pyramid, normalize)
    return BatchSample(label, GlobalFeature(g), m_used, image)


def build_batch(
    labeled_images: Sequence[tuple[Hashable, ToyImage]],
    params: EncoderParams,
    *,
    pyramid: PyramidSpec = DEFAULT_PYRAMID,
    normalize: bool = True,
    margin: float = 0.3,
) -> TripletBatch:
    """Encode a P x K image selection into a TripletBatch."""
    counts = Counter(label for label, _ in labeled_images)
    k_values = set(counts.values())
    if len(k_values) != 1:
        raise ValueError(f"uneven images per identity: {dict(counts)}")
    samples = tuple(
        encode_batch_sample(label, img, params, pyramid=pyramid, normalize=normalize)
        for label, img in labeled_images
    )
    return TripletBatch(len(counts), k_values.pop(), samples, margin)


@dataclass(frozen=True)
class StepPlan:
    """Everything frozen by phase one of the alternating step: the mined
    triplets, the hinge active set, the coefficient matrices, and the
    per-sample column scales the normalization applied (all ones when
    normalization is off)."""

    triplets: tuple[MinedTriplet, ...]
    active: tuple[bool, ...]
    coeff_pos: tuple[ReconstructionCoefficients, ...]
    coeff_neg: tuple[ReconstructionCoefficients, ...]
    column_scales: tuple[np.ndarray, ...]
    report: LossReport


def _pool_backward(
    grid_shape: tuple[int, int, int], dg: np.ndarray, dx: np.ndarray, pyramid: PyramidSpec
) -> np.ndarray:
    # Adjoint of (global mean, sliding-window means) back onto the grid.
    c, h, w = grid_shape
    out = np.empty((c, h, w))
    out[:] = (dg / float(h * w))[:, None, None]
    col = 0
    for k in usable_kernels(pyramid, h, w):
        inv = 1.0 / float(k * k)
        for i in range(0, h - k + 1, pyramid.stride):
            for j in range(0, w - k + 1, pyramid.stride):
                out[:, i:i + k, j:j + k] += (dx[:, col] * inv)[:, None, None]
                col += 1
    if col != dx.shape[1]:
        raise MismatchError(f"spatial gradient has {dx.shape[1]} columns, pooling produced {col}")
    return out


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0.0 else np.zeros_like(v)


def step_gradients(
    batch: TripletBatch,
    params: EncoderParams,
    beta: float,
    margin: float,
    *,
    pyramid: PyramidSpec = DEFAULT_PYRAMID,
    normalize: bool = True,
) -> tuple[list[LayerGradients], StepPlan]:
    """Phase one plus the full analytic parameter gradient of the frozen-plan
    objective (see frozen_step_objective)."""
    if any(s.image is None for s in batch.samples):
        raise ValueError("training requires batch samples built from images")
    forwards = [_forward_sample(s.image, params, pyramid, normalize) for s in batch.samples]
    frozen = TripletBatch(
        batch.subjects,
        batch.images_per_subject,
        tuple(
            BatchSample(s.label, GlobalFeature(f[1]), f[3], s.image)
            for s, f in zip(batch.samples, forwards)
        ),
        batch.margin,
    )
    mined = batch_hard_mine(frozen, beta)
    report = _loss_terms(mined, margin)
    active = tuple(t > 0.0 for t in report.per_triplet_terms)

    used = [f[3] for f in forwards]
    coeff_pos = tuple(
        DictionaryFactor(used[t.positive_idx], beta).solve(used[t.anchor_idx]) for t in mined
    )
    coeff_neg = tuple(
        DictionaryFactor(used[t.negative_idx], beta).solve(used[t.anchor_idx]) for t in mined
    )
    # Frozen per-column scales: raw features divided by these reproduce the
    # solve's coordinates. Zero columns keep scale 1.
    if normalize:
        scales = tuple(np.where(n == 0.0, 1.0, n) for n in
                       (np.linalg.norm(f[2], axis=0) for f in forwards))
    else:
        scales = tuple(np.ones(f[2].shape[1]) for f in forwards)
    plan = StepPlan(tuple(mined), active, coeff_pos, coeff_neg, scales, report)

    globals_ = [f[1] for f in forwards]
    units = [f[2] / s for f, s in zip(forwards, scales)]
    dg = [np.zeros_like(g) for g in globals_]
    dx = [np.zeros_like(u) for u in units]
    for t, is_active, wp, wn in zip(mined, active, coeff_pos, coeff_neg):
        if not is_active:
            continue
        a, p, n = t.anchor_idx, t.positive_idx, t.negative_idx
        u = _unit(globals_[a] - globals_[p])
        v = _unit(globals_[a] - globals_[n])
        dg[a] += u - v
        dg[p] -= u
        dg[n] += v
        r_pos = units[a] - units[p] @ wp.matrix
        r_neg = units[a] - units[n] @ wn.matrix
        dx[a] += 2.0 * (r_pos - r_neg)
        dx[p] -= 2.0 * r_pos @ wp.matrix.T
        dx[n] += 2.0 * r_neg @ wn.matrix.T
    # Chain through the frozen scaling back onto the raw pyramid columns.
    dx = [g / s for g, s in zip(dx, scales)]

    kernel_acc = [np.zeros_like(l.kernel) for l in params.layers]
    bias_acc = [np.zeros_like(l.bias) for l in params.layers]
    for s, f, dgs, dxs in zip(batch.samples, forwards, dg, dx):
        if not (dgs.any() or dxs.any()):
            continue
        grid_grad = _pool_backward(f[0], dgs, dxs, pyramid)
        for ka, ba, lg in zip(kernel_acc, bias_acc, encode_backward(s.image, params, grid_grad)):
            ka += lg.kernel
            ba += lg.bias
    grads = [LayerGradients(k, b) for k, b in zip(kernel_acc, bias_acc)]
    return grads, plan


def frozen_step_objective(
    batch: TripletBatch,
    params: EncoderParams,
    plan: StepPlan,
    margin: float,
    *,
    pyramid: PyramidSpec = DEFAULT_PYRAMID,
) -> float:
    """The phase-two objective as a function of encoder parameters: over the
    plan's active anchors, margin + global Euclidean gap + squared-Frobenius
    reconstruction gap, with the plan's coefficients and column scales frozen.
    step_gradients returns the exact gradient of this scalar."""
    forwards = [_forward_sample(s.image, params, pyramid, normalize=False) for s in batch.samples]
    globals_ = [f[1] for f in forwards]
    units = [f[2] / s for f, s in zip(forwards, plan.column_scales)]
    total = 0.0
    for t, is_active, wp, wn in zip(plan.triplets, plan.active, plan.coeff_pos, plan.coeff_neg):
        if not is_active:
            continue
        a, p, n = t.anchor_idx, t.positive_idx, t.negative_idx
        r_pos = units[a] - units[p] @ wp.matrix
        r_neg = units[a] - units[n] @ wn.matrix
        total += margin
        total += float(np.linalg.norm(globals_[a] - globals_[p])) + float(np.sum(r_pos * r_pos))
        total -= float(np.linalg.norm(globals_[a] - globals_[n])) + float(np.sum(r_neg * r_neg))
    return total


def training_step(
    batch: TripletBatch,
    params: EncoderParams,
    beta: float,
    margin: float,
    learning_rate: float,
    *,
    pyramid: PyramidSpec = DEFAULT_PYRAMID,
    normalize: bool = True,
) -> tuple[EncoderParams, LossReport]:
    """One alternating-optimization step; returns updated parameters and the
    batch's loss report. Parameters are returned unchanged when the learning
    rate is zero or every hinge is clamped."""
    grads, plan = step_gradients(batch, params, beta, margin, pyramid=pyramid, normalize=normalize)
    for g in grads:
        if not (np.isfinite(g.kernel).all() and np.isfinite(g.bias).all()):
            raise ArithmeticError(
                f"non-finite gradient (loss {plan.report.total_loss}, "
                f"active {plan.report.active_triplets}); aborting update"
            )
    if learning_rate == 0.0 or plan.report.active_triplets == 0:
        return params, plan.report
    return sgd_update(params, grads, learning_rate), plan.report
