"""
Iterative probabilistic data association for one sensor at one time step.

PT k (1..K) and measurement m (1..M) live at array index k-1 and m-1.
The PT-oriented variable a takes values 0..M and the measurement-oriented
variable b takes values 0..K, 0 meaning "not associated" in both cases.
"""
import logging
from typing import Optional

import numpy as np

from config import BP_ITERATIONS, BP_TOLERANCE

logger = logging.getLogger(__name__)

MAX_ORACLE_CONFIGURATIONS = 10 ** 7


class AssociationError(Exception):
    """Raised when association tables are malformed or messages become non-finite"""
    pass


def consistency_indicator(a: int, b: int, k: int, m: int, num_pts: int, num_measurements: int) -> int:
    """1 unless exactly one of (a = m) and (b = k) holds"""
    if not 0 <= a <= num_measurements:
        raise AssociationError(f"a = {a} outside 0..{num_measurements}")
    if not 0 <= b <= num_pts:
        raise AssociationError(f"b = {b} outside 0..{num_pts}")
    if not 1 <= k <= num_pts or not 1 <= m <= num_measurements:
        raise AssociationError(f"(k, m) = ({k}, {m}) outside 1..{num_pts} x 1..{num_measurements}")
    return int((a == m) == (b == k))


def consistency_tensor(num_pts: int, num_measurements: int) -> np.ndarray:
    """psi[k-1, m-1, a, b] for every PT/measurement pair"""
    k = np.arange(1, num_pts + 1)[:, None, None, None]
    m = np.arange(1, num_measurements + 1)[None, :, None, None]
    a = np.arange(num_measurements + 1)[None, None, :, None]
    b = np.arange(num_pts + 1)[None, None, None, :]
    return ((a == m) == (b == k)).astype(float)


def _validate_beta(beta, num_pts: int, num_measurements: int) -> np.ndarray:
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (num_pts, num_measurements + 1):
        raise AssociationError(f"beta must have shape ({num_pts}, {num_measurements + 1}), got {beta.shape}")
    if not np.all(np.isfinite(beta)) or np.any(beta < 0):
        raise AssociationError("beta entries must be finite and non-negative")
    empty_rows = np.flatnonzero(beta.sum(axis=1) <= 0)
    if empty_rows.size:
        raise AssociationError(f"beta rows {(empty_rows + 1).tolist()} are all zero")
    return beta


def _normalize(messages: np.ndarray, iteration: int) -> np.ndarray:
    totals = messages.sum(axis=-1, keepdims=True)
    if not np.all(np.isfinite(messages)) or np.any(totals <= 0) or not np.all(np.isfinite(totals)):
        raise AssociationError(f"Non-finite or vanishing association message at iteration {iteration}")
    return messages / totals


def _exclusive_product(messages: np.ndarray) -> np.ndarray:
    """Along axis 0, the product over every other entry"""
    prefix = np.ones_like(messages)
    suffix = np.ones_like(messages)
    prefix[1:] = np.cumprod(messages[:-1], axis=0)
    suffix[:-1] = np.cumprod(messages[::-1], axis=0)[::-1][1:]
    return prefix * suffix


def run_bp(
    beta,
    num_pts: int,
    num_measurements: int,
    max_iterations: int = BP_ITERATIONS,
    tol: float = BP_TOLERANCE,
) -> np.ndarray:
    """
    Loopy belief propagation between the PT-oriented and the
    measurement-oriented association variables.

    Returns eta with shape (K, M+1), eta[k-1, a] proportional to the
    product over m of nu_{m->k}(a); every row sums to 1.
    """
    beta = _validate_beta(beta, num_pts, num_measurements)
    if num_measurements == 0:
        return np.ones((num_pts, 1))
    if num_pts == 0:
        return np.zeros((0, num_measurements + 1))

    psi = consistency_tensor(num_pts, num_measurements)

    # zeta[k, m, b] (PT k to measurement m), nu[m, k, a] (measurement m to PT k)
    zeta = _normalize(np.einsum('ka,kmab->kmb', beta, psi), 0)
    nu = None
    for iteration in range(1, max_iterations + 1):
        new_nu = _normalize(np.einsum('kmab,kmb->mka', psi, _exclusive_product(zeta)), iteration)
        zeta = _normalize(np.einsum('ka,kmab,mka->kmb', beta, psi, _exclusive_product(new_nu)), iteration)
        change = np.inf if nu is None else float(np.max(np.abs(new_nu - nu)))
        nu = new_nu
        if change < tol:
            logger.debug(f"Association BP converged after {iteration} iterations")
            break
    else:
        logger.debug(f"Association BP stopped at {max_iterations} iterations (last change {change:.3g})")

    with np.errstate(divide="ignore"):
        log_eta = np.log(nu).sum(axis=0)
    log_eta -= log_eta.max(axis=1, keepdims=True)
    eta = np.exp(log_eta)
    if not np.all(np.isfinite(eta)):
        raise AssociationError("Non-finite eta after association BP")
    return eta / eta.sum(axis=1, keepdims=True)


def association_marginals(beta, eta) -> np.ndarray:
    """Per-PT posterior pmfs over a, proportional to beta * eta"""
    product = np.asarray(beta, dtype=float) * np.asarray(eta, dtype=float)
    totals = product.sum(axis=1, keepdims=True)
    if np.any(totals <= 0):
        raise AssociationError("Association marginals vanish for some PT")
    return product / totals


def exact_association_oracle(
    beta,
    num_pts: int,
    num_measurements: int,
    max_configurations: Optional[int] = MAX_ORACLE_CONFIGURATIONS,
) -> np.ndarray:
    """Exact marginals over a by enumerating every one-to-one partial matching"""
    beta = _validate_beta(beta, num_pts, num_measurements)
    if max_configurations is not None and (num_measurements + 1) ** num_pts > max_configurations:
        raise AssociationError(
            f"Instance with K={num_pts}, M={num_measurements} exceeds {max_configurations} configurations"
        )

    marginals = np.zeros_like(beta)
    chosen = [0] * num_pts

    def enumerate_from(k: int, used: set, weight: float):
        if k == num_pts:
            for pt, a in enumerate(chosen):
                marginals[pt, a] += weight
            return
        for a in range(num_measurements + 1):
            if a and a in used:
                continue
            w = weight * beta[k, a]
            if w == 0.0:
                continue
            chosen[k] = a
            enumerate_from(k + 1, used | {a} if a else used, w)

    enumerate_from(0, frozenset(), 1.0)
    totals = marginals.sum(axis=1, keepdims=True)
    if np.any(totals <= 0):
        raise AssociationError("No consistent association has positive weight")
    return marginals / totals
