"""Training objectives: target reconstruction and proxy-gradient alignment.

Loss terms return raw sums on the autodiff tape; the trainer divides by
term counts so the balance weights keep their meaning across batch sizes.

The proxy term never compares absolute magnitudes: both the prediction
and the proxy field are standardized per timestep over cloud-free pixels
before differencing, so an affine distortion of the proxy (gain, offset)
leaves the constraint untouched and only spatial structure is enforced.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .graphs import GeoAdjacency


class LossError(ValueError):
    """Loss inputs are unusable."""


@dataclass(frozen=True)
class LossWeights:
    """Balance factors for the composite objective."""

    lambda1: float = 1.0
    lambda2: float = 0.1

    def __post_init__(self):
        for name in ("lambda1", "lambda2"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise LossError(f"{name} must be finite and >= 0, got {value}")


def _check_targets(x_hat: ad.Tensor, x_true: np.ndarray,
                   target_indices: np.ndarray) -> np.ndarray:
    x_true = np.asarray(x_true, dtype=np.float64)
    if x_hat.shape != x_true.shape:
        raise LossError(f"prediction shape {x_hat.shape} vs truth shape {x_true.shape}")
    idx = np.asarray(target_indices, dtype=int)
    if idx.size == 0:
        raise LossError("target set is empty")
    if idx.min() < 0 or idx.max() >= x_hat.shape[0]:
        raise LossError(f"target indices out of range for {x_hat.shape[0]} nodes")
    return idx


def infer_loss(x_hat: ad.Tensor, x_true: np.ndarray,
               target_indices: np.ndarray) -> ad.Tensor:
    """Sum of |prediction - truth| over target nodes and all timesteps.

    Reads the truth only at target rows, so observed-node truth values
    can never influence the value or its gradient.
    """
    idx = _check_targets(x_hat, x_true, target_indices)
    return ad.l1_loss(x_hat[idx], ad.Tensor(np.asarray(x_true, dtype=np.float64)[idx]))


def init_loss(x_init: ad.Tensor, x_true: np.ndarray,
              target_indices: np.ndarray) -> ad.Tensor:
    """Same structure as infer_loss, applied to the initial estimate."""
    idx = _check_targets(x_init, x_true, target_indices)
    return ad.l1_loss(x_init[idx], ad.Tensor(np.asarray(x_true, dtype=np.float64)[idx]))


_STD_GUARD = 1e-6


def _standardize_constant(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-column standardization of a plain array over masked-in rows."""
    count = mask.sum()
    mean = (values * mask).sum() / count
    std = np.sqrt(((values - mean) ** 2 * mask).sum() / count)
    if std < _STD_GUARD:
        std = 1.0
    return (values - mean) / std


def _standardize_on_tape(column: ad.Tensor, mask: np.ndarray) -> ad.Tensor:
    """Standardize a (N,) tensor over masked-in entries, differentiably.

    The std guard switches on the forward value: near-constant columns
    are only centered, which keeps the op finite and leaves gradients
    well-behaved.
    """
    count = float(mask.sum())
    mean = ad.tensor_sum(ad.mul(column, mask)) * (1.0 / count)
    centered = ad.sub(column, mean)
    var = ad.tensor_sum(ad.mul(ad.mul(centered, centered), mask)) * (1.0 / count)
    std = ad.sqrt(var)
    if float(std.data) < _STD_GUARD:
        return centered
    return ad.div(centered, std)


def aod_gradient_loss(x_hat: ad.Tensor, aod_values: np.ndarray, aod_valid: np.ndarray,
                      edges: np.ndarray) -> ad.Tensor:
    """Masked spatial-gradient alignment between prediction and proxy.

    For each timestep, both fields are standardized over that step's
    valid pixels; then for every edge (i, j) whose endpoints are both
    valid, the term |(pred_j - pred_i) - (proxy_j - proxy_i)| is summed.
    A fully masked field is legal and yields a constant zero with no
    gradient.

    Args:
        x_hat: (N, T) prediction tensor.
        aod_values: (N, T) proxy values (finite where valid).
        aod_valid: (N, T) binary validity mask, 1 = usable pixel.
        edges: (E, 2) node index pairs, i != j.

    Returns:
        Scalar tensor, >= 0.
    """
    aod_values = np.asarray(aod_values, dtype=np.float64)
    aod_valid = np.asarray(aod_valid, dtype=np.float64)
    if x_hat.shape != aod_values.shape or aod_values.shape != aod_valid.shape:
        raise LossError(
            f"shape mismatch: prediction {x_hat.shape}, proxy {aod_values.shape}, "
            f"mask {aod_valid.shape}")
    if not np.all((aod_valid == 0.0) | (aod_valid == 1.0)):
        raise LossError("validity mask must be binary")
    edges = validate_edges(edges, x_hat.shape[0])
    if np.any(~np.isfinite(aod_values) & (aod_valid == 1.0)):
        raise LossError("proxy values must be finite where valid")

    n, t = x_hat.shape
    src, dst = edges[:, 0], edges[:, 1]
    total: ad.Tensor | None = None
    for step in range(t):
        mask = aod_valid[:, step]
        if mask.sum() == 0:
            continue
        edge_mask = mask[src] * mask[dst]
        if edge_mask.sum() == 0:
            continue
        pred_std = _standardize_on_tape(x_hat[:, step], mask)
        proxy_std = _standardize_constant(aod_values[:, step], mask)
        pred_diff = ad.sub(pred_std[dst], pred_std[src])
        proxy_diff = proxy_std[dst] - proxy_std[src]
        terms = ad.mul(ad.absolute(ad.sub(pred_diff, proxy_diff)), edge_mask)
        step_sum = ad.tensor_sum(terms)
        total = step_sum if total is None else ad.add(total, step_sum)
    return total if total is not None else ad.Tensor(0.0)


def composite_loss(infer: ad.Tensor | float, init: ad.Tensor | float,
                   aod: ad.Tensor | float, weights: LossWeights) -> ad.Tensor:
    """infer + lambda1 * init + lambda2 * aod."""
    return ad.add(ad.as_tensor(infer),
                  ad.add(ad.mul(ad.as_tensor(init), weights.lambda1),
                         ad.mul(ad.as_tensor(aod), weights.lambda2)))


# -- edge sets ----------------------------------------------------------


def validate_edges(edges: np.ndarray, n: int) -> np.ndarray:
    edges = np.asarray(edges, dtype=int)
    if edges.ndim != 2 or edges.shape[1] != 2:
        raise LossError(f"edges must be (E, 2), got {edges.shape}")
    if edges.size and (edges.min() < 0 or edges.max() >= n):
        raise LossError(f"edge endpoints out of range for {n} nodes")
    if np.any(edges[:, 0] == edges[:, 1]):
        raise LossError("self-edges are not allowed")
    return edges


def edges_from_adjacency(geo: GeoAdjacency) -> np.ndarray:
    """Each undirected adjacency pair once, as (E, 2) with i < j."""
    coo = geo.weights.tocoo()
    keep = coo.row < coo.col
    return np.stack([coo.row[keep], coo.col[keep]], axis=1)


def grid_edges(nx: int, ny: int) -> np.ndarray:
    """4-neighbor edges of a row-major (iy * nx + ix) grid."""
    if nx < 1 or ny < 1:
        raise LossError(f"grid must be at least 1x1, got {nx}x{ny}")
    pairs = []
    for iy in range(ny):
        for ix in range(nx):
            cell = iy * nx + ix
            if ix + 1 < nx:
                pairs.append((cell, cell + 1))
            if iy + 1 < ny:
                pairs.append((cell, cell + nx))
    return np.asarray(pairs, dtype=int).reshape(-1, 2)


def count_valid_edge_terms(aod_valid: np.ndarray, edges: np.ndarray) -> int:
    """Number of (timestep, edge) terms the proxy loss actually sums."""
    aod_valid = np.asarray(aod_valid, dtype=np.float64)
    edges = np.asarray(edges, dtype=int)
    if edges.size == 0:
        return 0
    both = aod_valid[edges[:, 0], :] * aod_valid[edges[:, 1], :]
    return int(both.sum())
