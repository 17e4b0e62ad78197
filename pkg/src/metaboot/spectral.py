"""Positive-pair chains and minimax-optimal representations on finite view spaces.

A discrete view space is a latent-source model: sources x with prior p(x)
emit views a with conditionals p(a|x). Two independent draws from the same
source form the positive-pair joint

    joint(a1, a2) = sum_x p(a1|x) p(a2|x) p(x),

a symmetric distribution whose row-normalization is the positive-pair
Markov chain. Working in the symmetrized coordinates
S = D^NEG1/2 J D^NEG1/2 (D = diag of the view marginal), eigenfunctions of
the chain are v = D^NEG1/2 u for euclidean-orthonormal eigenvectors u of S,
which makes them orthonormal in the marginal-weighted inner product.

``minimax_gap`` computes, exactly on these finite spaces, the worst-case
least-squares residual of approximating any unit-second-moment function
whose positive-pair variation is at most eps from a given d-dimensional
subspace. In symmetrized coordinates that is

    max ||(I - P) g||^2   s.t.  ||g|| = 1,  2 g^T (I - S) g <= eps,

a maximization of one quadratic form under another on the sphere. The
joint numerical range of two quadratic forms on a sphere is convex (for
dimension >= 3), so the Lagrangian dual

    min_{lam >= 0}  lam * eps/2 + lambda_max(M - lam * (I - S))

is tight; it is a 1-D convex minimization solved here by golden-section
after bracket expansion. The top-d eigenspace minimizes this gap over all
d-dimensional subspaces, which the sampling oracle checks against random
subspaces drawn orthonormal in the weighted inner product.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .rng import derive_seed, generator

_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class DiscreteViewSpace:
    conditional: np.ndarray  # (source_count, m), rows sum to 1
    prior: np.ndarray        # (source_count,), sums to 1

    def __post_init__(self):
        cond = np.ascontiguousarray(np.asarray(self.conditional, dtype=np.float64))
        prior = np.ascontiguousarray(np.asarray(self.prior, dtype=np.float64))
        if cond.ndim != 2 or prior.ndim != 1 or cond.shape[0] != prior.size:
            raise ValidationError("conditional must be (sources, m) with a prior per source")
        if np.any(cond < 0) or np.any(prior < 0):
            raise ValidationError("probabilities must be nonnegative")
        if np.any(np.abs(cond.sum(axis=1) - 1.0) > 1e-12):
            raise ValidationError("conditional rows must sum to 1")
        if abs(prior.sum() - 1.0) > 1e-12:
            raise ValidationError("prior must sum to 1")
        object.__setattr__(self, "conditional", cond)
        object.__setattr__(self, "prior", prior)

    @property
    def m(self) -> int:
        return self.conditional.shape[1]

    @property
    def source_count(self) -> int:
        return self.conditional.shape[0]


@dataclass(frozen=True)
class PositivePairChain:
    joint: np.ndarray       # (m, m), symmetric, sums to 1
    marginal: np.ndarray    # (m,)
    transition: np.ndarray  # (m, m), row-stochastic

    @property
    def m(self) -> int:
        return self.joint.shape[0]


def build_chain(space: DiscreteViewSpace) -> PositivePairChain:
    """Exact positive-pair joint; symmetry is structural (upper triangle once)."""
    c, p = space.conditional, space.prior
    m = space.m
    joint = np.empty((m, m))
    weighted = c * p[:, None]
    for a in range(m):
        for b in range(a, m):
            v = float(np.dot(weighted[:, a], c[:, b]))
            joint[a, b] = v
            joint[b, a] = v
    marginal = joint.sum(axis=1)
    dead = np.nonzero(marginal <= 0.0)[0]
    if dead.size:
        raise ValidationError(f"views {dead.tolist()} have zero marginal probability")
    return PositivePairChain(joint, marginal, joint / marginal[:, None])


def symmetrized(chain: PositivePairChain) -> np.ndarray:
    """S = D^1/2 T D^-1/2 = D^-1/2 J D^-1/2, symmetric with spectrum in [-1, 1]."""
    inv_sqrt = 1.0 / np.sqrt(chain.marginal)
    s = chain.joint * np.outer(inv_sqrt, inv_sqrt)
    return (s + s.T) / 2.0


@dataclass(frozen=True)
class EigenReport:
    functions: np.ndarray    # (m, d), orthonormal under the marginal inner product
    eigenvalues: np.ndarray  # (d,), descending
    boundary_degenerate: bool


def top_eigenfunctions(chain: PositivePairChain, d: int,
                       degeneracy_tol: float = 1e-10) -> EigenReport:
    """Top-d eigenpairs of the transition operator via the symmetrized matrix."""
    m = chain.m
    if not (1 <= d <= m):
        raise ValidationError(f"d must lie in [1, {m}], got {d}")
    vals, vecs = np.linalg.eigh(symmetrized(chain))
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    funcs = vecs[:, :d] / np.sqrt(chain.marginal)[:, None]
    degenerate = d < m and abs(vals[d - 1] - vals[d]) < degeneracy_tol
    return EigenReport(funcs, vals[:d].copy(), degenerate)


def _weighted_projector(chain: PositivePairChain, subspace: np.ndarray) -> np.ndarray:
    """Euclidean projector onto D^1/2 * span(subspace); rejects rank deficiency."""
    basis = np.asarray(subspace, dtype=np.float64)
    if basis.ndim != 2 or basis.shape[0] != chain.m:
        raise ValidationError(f"subspace must be ({chain.m}, d)")
    lifted = np.sqrt(chain.marginal)[:, None] * basis
    q, r = np.linalg.qr(lifted)
    if np.any(np.abs(np.diag(r)) < 1e-10 * max(1.0, np.abs(r).max())):
        raise ValidationError("subspace columns are linearly dependent")
    return q @ q.T


def minimax_gap(chain: PositivePairChain, subspace: np.ndarray,
                eps: float) -> float:
    """Worst-case approximation residual over the eps-invariant function class."""
    if eps < 0:
        raise ValidationError("eps must be >= 0")
    proj = _weighted_projector(chain, subspace)
    if subspace.shape[1] >= chain.m:
        return 0.0
    resid = np.eye(chain.m) - proj
    a = np.eye(chain.m) - symmetrized(chain)
    if eps == 0.0:
        # Feasible functions are exactly the invariant ones: null space of A.
        vals, vecs = np.linalg.eigh(a)
        null = vecs[:, vals < 1e-12]
        if null.shape[1] == 0:
            return 0.0
        return float(np.linalg.eigvalsh(null.T @ resid @ null)[-1])
    return float(_dual_minimize(resid[None], a, eps / 2.0)[0])


def _dual_minimize(resid_stack: np.ndarray, a: np.ndarray, c: float,
                   iters: int = 90) -> np.ndarray:
    """min over lam >= 0 of lam*c + lambda_max(M_i - lam*A), batched over i.

    The objective is convex in lam (a pointwise max of affine functions),
    so bracket expansion plus golden-section converges; one eigvalsh over
    the whole stack per iteration.
    """

    def h(lams: np.ndarray) -> np.ndarray:
        mats = resid_stack - lams[:, None, None] * a[None]
        return lams * c + np.linalg.eigvalsh(mats)[:, -1]

    n = resid_stack.shape[0]
    lo = np.zeros(n)
    hi = np.full(n, 1.0)
    for _ in range(60):  # expand brackets until the minimum is interior
        grow = h(hi) < h(0.5 * hi)
        if not grow.any():
            break
        hi[grow] *= 4.0
    x1 = hi - _GOLDEN * (hi - lo)
    x2 = lo + _GOLDEN * (hi - lo)
    f1, f2 = h(x1), h(x2)
    for _ in range(iters):
        left = f1 < f2  # minimum lies in [lo, x2]
        hi = np.where(left, x2, hi)
        lo = np.where(left, lo, x1)
        keep_x = np.where(left, x1, x2)  # golden ratio: the surviving interior point
        keep_f = np.where(left, f1, f2)
        new_x = np.where(left, hi - _GOLDEN * (hi - lo), lo + _GOLDEN * (hi - lo))
        new_f = h(new_x)
        x1 = np.where(left, new_x, keep_x)
        f1 = np.where(left, new_f, keep_f)
        x2 = np.where(left, keep_x, new_x)
        f2 = np.where(left, keep_f, new_f)
    return np.minimum(f1, f2)


def minimax_gap_batch(chain: PositivePairChain, subspaces: list[np.ndarray],
                      eps: float) -> np.ndarray:
    """Batched ``minimax_gap`` sharing the golden-section sweeps."""
    if eps <= 0:
        raise ValidationError("batched gap needs eps > 0")
    m = chain.m
    stack = np.empty((len(subspaces), m, m))
    full_rank = []
    for i, sub in enumerate(subspaces):
        if sub.shape[1] >= m:
            full_rank.append(i)
            stack[i] = 0.0
        else:
            stack[i] = np.eye(m) - _weighted_projector(chain, sub)
    a = np.eye(m) - symmetrized(chain)
    gaps = _dual_minimize(stack, a, eps / 2.0)
    gaps[full_rank] = 0.0
    return gaps


def random_weighted_subspaces(chain: PositivePairChain, d: int, count: int,
                              seed: int) -> list[np.ndarray]:
    """Gaussian subspaces orthonormalized under the marginal inner product."""
    out = []
    inv_sqrt = 1.0 / np.sqrt(chain.marginal)
    for i in range(count):
        g = generator(derive_seed(seed, 0x5B5, i)).normal(size=(chain.m, d))
        q, _ = np.linalg.qr(np.sqrt(chain.marginal)[:, None] * g)
        out.append(inv_sqrt[:, None] * q)
    return out


def random_space(m: int, sources: int, seed: int) -> DiscreteViewSpace:
    """Random dense view space with all marginals bounded away from zero."""
    if m < 3 or sources < 1:
        raise ValidationError("need m >= 3 views and at least one source")
    rng = generator(derive_seed(seed, 0xD15C))
    cond = rng.gamma(1.0, 1.0, size=(sources, m)) + 0.05
    cond /= cond.sum(axis=1, keepdims=True)
    prior = rng.gamma(1.0, 1.0, size=sources) + 0.2
    prior /= prior.sum()
    return DiscreteViewSpace(cond, prior)


def connected_components(chain: PositivePairChain, tol: float = 0.0) -> int:
    """Components of the positive-pair graph (edges where joint > tol)."""
    m = chain.m
    seen = np.zeros(m, dtype=bool)
    count = 0
    for start in range(m):
        if seen[start]:
            continue
        count += 1
        stack = [start]
        seen[start] = True
        while stack:
            a = stack.pop()
            for b in np.nonzero(chain.joint[a] > tol)[0]:
                if not seen[b]:
                    seen[b] = True
                    stack.append(int(b))
    return count
