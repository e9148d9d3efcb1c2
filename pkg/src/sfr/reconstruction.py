"""Ridge reconstruction of one spatial feature set from another.

The coefficients W minimize ||X - Y W||_F^2 + beta ||W||_F^2 and come in
closed form from the normal equations (Y^T Y + beta I) W = Y^T X, factored
with a Cholesky decomposition of the regularized Gram matrix. The
reconstruction distance is the mean l2 norm of the residual columns of
X - Y W; during training the gradients of the squared Frobenius residual are
used instead, with W held fixed by the alternating scheme.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import FactorizationError, MismatchError
from .features import FeatureMatrix


@dataclass(frozen=True)
class ReconstructionCoefficients:
    """M x N coefficient matrix expressing X's columns in a dictionary's columns."""

    matrix: np.ndarray
    beta: float

    def __post_init__(self) -> None:
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2:
            raise ValueError(f"coefficients must be a matrix, got shape {np.shape(self.matrix)}")
        if not np.isfinite(m).all():
            raise ValueError("coefficients contain non-finite values")
        if self.beta < 0:
            raise ValueError(f"beta must be nonnegative, got {self.beta}")
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "beta", float(self.beta))


@dataclass(frozen=True)
class ReconstructionResult:
    """Coefficients plus the residual X - Y W and the mean residual column norm."""

    coefficients: ReconstructionCoefficients
    residual: np.ndarray
    distance: float


class DictionaryFactor:
    """Cholesky factor of (Y^T Y + beta I), reusable across many probes
    reconstructed against the same dictionary Y."""

    __slots__ = ("dictionary", "beta", "_factor")

    def __init__(self, dictionary: FeatureMatrix, beta: float):
        if beta < 0:
            raise ValueError(f"beta must be nonnegative, got {beta}")
        y = dictionary.columns
        gram = y.T @ y + beta * np.eye(dictionary.count)
        try:
            self._factor = cho_factor(gram, lower=True)
        except LinAlgError as exc:
            cond = float(np.linalg.cond(gram))
            raise FactorizationError(
                f"gram matrix not positive definite (beta={beta}, cond~{cond:.3e}); "
                "use beta > 0 or a full-column-rank dictionary"
            ) from exc
        if beta == 0.0:
            # potrf can sneak past an exactly singular matrix with a rounded
            # ~1e-8 pivot; beta = 0 is only allowed on nonsingular grams.
            diag = np.abs(np.diag(self._factor[0]))
            if diag.min() <= diag.max() * 1e-7:
                cond = float(np.linalg.cond(gram))
                raise FactorizationError(
                    f"gram matrix numerically singular at beta=0 (cond~{cond:.3e})"
                )
        self.dictionary = dictionary
        self.beta = float(beta)

    def solve(self, x: FeatureMatrix) -> ReconstructionCoefficients:
        if x.dim != self.dictionary.dim:
            raise MismatchError(f"feature dim {x.dim} != dictionary dim {self.dictionary.dim}")
        w = cho_solve(self._factor, self.dictionary.columns.T @ x.columns)
        return ReconstructionCoefficients(w, self.beta)

    def reconstruct(self, x: FeatureMatrix) -> ReconstructionResult:
        coeff = self.solve(x)
        residual = x.columns - self.dictionary.columns @ coeff.matrix
        distance = float(np.linalg.norm(residual, axis=0).mean())
        return ReconstructionResult(coeff, residual, distance)


def solve_coefficients(x: FeatureMatrix, y: FeatureMatrix, beta: float) -> ReconstructionCoefficients:
    """Closed-form ridge solve of (Y^T Y + beta I) W = Y^T X.

    beta = 0 is accepted only when the Gram matrix is numerically positive
    definite; a failed factorization raises with a condition diagnostic.
    """
    return DictionaryFactor(y, beta).solve(x)


def sfr_distance(x: FeatureMatrix, y: FeatureMatrix, beta: float) -> ReconstructionResult:
    """Reconstruction distance: mean l2 norm of the columns of X - Y W."""
    return DictionaryFactor(y, beta).reconstruct(x)


def sfr_gradients(
    x_anchor: FeatureMatrix, x_other: FeatureMatrix, coefficients: ReconstructionCoefficients
) -> tuple[np.ndarray, np.ndarray]:
    """Exact gradients of ||Xa - Xo W||_F^2 with W held fixed.

    Returns (d/dXa, d/dXo) = (2 R, -2 R W^T) where R = Xa - Xo W.
    """
    w = coefficients.matrix
    if x_anchor.dim != x_other.dim:
        raise MismatchError(f"feature dims differ: {x_anchor.dim} vs {x_other.dim}")
    if w.shape != (x_other.count, x_anchor.count):
        raise MismatchError(
            f"coefficient shape {w.shape} inconsistent with counts ({x_other.count}, {x_anchor.count})"
        )
    residual = x_anchor.columns - x_other.columns @ w
    return 2.0 * residual, -2.0 * residual @ w.T


def reconstruction_objective(x: FeatureMatrix, y: FeatureMatrix, w: np.ndarray, beta: float) -> float:
    """||X - Y W||_F^2 + beta ||W||_F^2 for an arbitrary coefficient matrix."""
    w = np.asarray(w, dtype=np.float64)
    if x.dim != y.dim:
        raise MismatchError(f"feature dims differ: {x.dim} vs {y.dim}")
    if w.shape != (y.count, x.count):
        raise MismatchError(f"coefficient shape {w.shape} inconsistent with counts ({y.count}, {x.count})")
    residual = x.columns - y.columns @ w
    return float(np.sum(residual * residual) + beta * np.sum(w * w))
