"""
Reconstruction vulnerability (RV) of an attacked model.

RV measures how strongly the parameter gradient encodes the input through the
mixed derivative d/dx dF/dW. The estimator averages ||grad_x(v^T g(x))|| over
data samples x and random unit directions v; an analytic max-Frobenius form
is available for linear models with squared error.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Tensor
from .errors import ShapeError, ValidationError
from .models import AttackedModel, Label, gradient_jacobian
from .rng import SeededRNG

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RVEstimate:
    value: float
    M: int
    N: int
    stderr: float
    orthogonal: bool = True
    note: str = ""


def random_directions(M: int, P: int, rng: SeededRNG) -> Tuple[np.ndarray, bool, str]:
    """
    M unit directions in R^P, shape (M, P).

    Orthonormal (QR of a Gaussian matrix, signs fixed by the diagonal of R)
    when M <= P; otherwise independent unit-sphere draws.

    Returns:
        Tuple[np.ndarray, bool, str]: Directions, orthogonality flag, note
    """
    if M < 1:
        raise ValidationError(f"M must be >= 1, got {M}")
    if M > P:
        note = f"M={M} exceeds parameter count {P}; using non-orthogonal unit-sphere directions"
        logger.warning(note)
        return rng.unit_vectors(M, P), False, note
    q, r = np.linalg.qr(rng.normal((P, M)))
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return (q * signs).T, True, ""


def estimate_rv(
    model: AttackedModel,
    dataset: Sequence[Tensor],
    labels: Optional[Sequence[Label]],
    M: int,
    N: int,
    rng: SeededRNG,
    directions: Optional[np.ndarray] = None,
) -> RVEstimate:
    """
    Mean of ||grad_x(v_j^T g(x_i))|| over N samples and M directions.

    Args:
        model (AttackedModel): Model under assessment
        dataset (Sequence[Tensor]): Candidate inputs
        labels (Optional[Sequence[Label]]): Per-input labels; model label if None
        M (int): Number of directions
        N (int): Number of samples drawn without replacement from ``dataset``
        rng (SeededRNG): Source for sample choice and directions
        directions (Optional[np.ndarray]): Explicit (M, P) directions, e.g. an
            exhaustive basis; drawn when omitted

    Returns:
        RVEstimate: Mean and standard error over the N*M terms
    """
    if not 1 <= N <= len(dataset):
        raise ValidationError(f"N must lie in [1, {len(dataset)}], got {N}")
    if labels is not None and len(labels) != len(dataset):
        raise ValidationError("labels must match the dataset length")
    P = model.parameter_count
    note = ""
    orthogonal = True
    if directions is None:
        directions, orthogonal, note = random_directions(M, P, rng)
    else:
        directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
        if directions.shape != (M, P):
            raise ShapeError("estimate_rv directions", directions.shape, (M, P))
    chosen = np.sort(rng.permutation(len(dataset))[:N]) if N < len(dataset) else np.arange(N)
    terms: List[np.ndarray] = []
    for index in chosen:
        label = None if labels is None else labels[int(index)]
        jac = gradient_jacobian(model, dataset[int(index)], label)
        terms.append(np.linalg.norm(directions @ jac, axis=1))
    values = np.concatenate(terms)
    stderr = float(values.std(ddof=1) / np.sqrt(values.size)) if values.size > 1 else 0.0
    logger.info("RV of %s: %.6g (stderr %.3g, M=%d, N=%d)", model.model_id, values.mean(), stderr, M, N)
    return RVEstimate(float(values.mean()), M, N, stderr, orthogonal, note)


def _require_bilinear(model: AttackedModel) -> None:
    spec = model.spec
    if spec.name != "linear-1" or spec.loss != "half-squared-error":
        raise ValidationError(
            f"closed-form RV needs linear-1 with half-squared-error, got {spec.name} with {spec.loss}"
        )


def bilinear_jacobian(model: AttackedModel, x: Tensor) -> np.ndarray:
    """
    Closed-form d g / d x for F = 0.5 ||Wx + b - y||^2.

    With r = Wx + b - y: d(g_W)_ij / dx_k = W_ik x_j + r_i [j == k] and
    d(g_b)_i / dx_k = W_ik.
    """
    _require_bilinear(model)
    weight = model.params[0].data
    c, n = weight.shape
    point = x.data.reshape(-1)
    residual = weight @ point - model.label.data  # type: ignore[union-attr]
    if model.spec.bias:
        residual = residual + model.params[1].data
    mixed = np.einsum("ik,j->ijk", weight, point) + np.einsum("i,jk->ijk", residual, np.eye(n))
    blocks = [mixed.reshape(c * n, n)]
    if model.spec.bias:
        blocks.append(weight)
    return np.vstack(blocks)


def exact_rv_bilinear(model: AttackedModel, dataset: Sequence[Tensor]) -> float:
    """Max over the dataset of the Frobenius norm of the mixed derivative."""
    if not dataset:
        raise ValidationError("exact_rv_bilinear needs a nonempty dataset")
    return max(float(np.linalg.norm(bilinear_jacobian(model, x))) for x in dataset)


def exact_rv_basis_mean(model: AttackedModel, dataset: Sequence[Tensor]) -> float:
    """
    Expectation-form RV with the standard basis as directions, in closed form.

    Averages the row norms of the closed-form Jacobian over every parameter
    direction and every input.
    """
    if not dataset:
        raise ValidationError("exact_rv_basis_mean needs a nonempty dataset")
    rows = [np.linalg.norm(bilinear_jacobian(model, x), axis=1) for x in dataset]
    return float(np.concatenate(rows).mean())
