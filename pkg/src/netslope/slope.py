"""Slope of a network: the operator p-norm of its input Jacobian.

At a differentiable point the slope equals ||J_f(x)||_p, the maximal
instantaneous rate of change of the output over unit-p-norm input
directions.  ReLU networks are piecewise affine, so inside an activation
region the Jacobian is constant and the slope is exact; on region
boundaries the strict ``> 0`` mask convention is used (a measure-zero
event, bounded by the max over adjacent regions).

The directional oracle here estimates the same quantity from forward
evaluations only, never touching the analytic Jacobian path; tests and the
verification suite sandwich the two against each other.
"""

from __future__ import annotations

import concurrent.futures
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from netslope import linalg
from netslope.linalg import as_p, matrix_opnorm, vector_pnorm
from netslope.nn import Network, forward_many, output_jacobian


@dataclass(frozen=True)
class SlopeReport:
    """Per-point slopes over a sample, with summary statistics.

    The summary is always recomputable from the per-point list; ``std`` is
    the population standard deviation and quartiles use numpy's default
    (linear-interpolation) quantile rule.
    """

    point_ids: tuple[int, ...]
    slopes: np.ndarray
    p: float

    def __post_init__(self):
        slopes = np.asarray(self.slopes, dtype=np.float64)
        if slopes.ndim != 1 or slopes.size == 0:
            raise ValueError("a slope report needs at least one point")
        if len(self.point_ids) != slopes.size:
            raise ValueError("point_ids and slopes must have equal length")
        if np.any(slopes < 0) or not np.all(np.isfinite(slopes)):
            raise ValueError("slopes must be finite and nonnegative")
        slopes.flags.writeable = False
        object.__setattr__(self, "slopes", slopes)
        object.__setattr__(self, "point_ids", tuple(int(i) for i in self.point_ids))
        object.__setattr__(self, "p", as_p(self.p))

    @property
    def sample_size(self) -> int:
        return self.slopes.size

    @property
    def mean(self) -> float:
        return float(self.slopes.mean())

    @property
    def std(self) -> float:
        return float(self.slopes.std())

    def summary(self) -> dict:
        q25, median, q75 = (
            float(v) for v in np.quantile(self.slopes, [0.25, 0.5, 0.75])
        )
        return {
            "p": linalg.p_label(self.p),
            "n": self.sample_size,
            "mean": self.mean,
            "std": self.std,
            "min": float(self.slopes.min()),
            "q25": q25,
            "median": median,
            "q75": q75,
            "max": float(self.slopes.max()),
        }

    def to_file(self, path) -> None:
        """Columnar text: one summary header line, then point_id,slope rows."""
        header = json.dumps(self.summary(), sort_keys=True, separators=(",", ":"))
        lines = [f"# netslope-slope-report v1 {header}", "point_id,slope"]
        for pid, value in zip(self.point_ids, self.slopes):
            lines.append(f"{pid},{float(value)!r}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def from_file(cls, path) -> "SlopeReport":
        text = Path(path).read_text(encoding="utf-8").splitlines()
        if not text or not text[0].startswith("# netslope-slope-report v1 "):
            raise ValueError(f"{path}: not a slope report file")
        meta = json.loads(text[0][len("# netslope-slope-report v1 "):])
        ids, values = [], []
        for line in text[2:]:
            if not line:
                continue
            pid, value = line.split(",")
            ids.append(int(pid))
            values.append(float(value))
        return cls(tuple(ids), np.asarray(values), as_p(meta["p"]))


def slope_at(net: Network, x, p) -> float:
    """Slope at a point: operator p-norm of the input Jacobian there."""
    return matrix_opnorm(output_jacobian(net, x), p)


def _unit_p_rows(rows: np.ndarray, p: float) -> np.ndarray:
    """Normalize each row to unit p-norm, dropping zero rows."""
    if p == 1.0:
        norms = np.abs(rows).sum(axis=1)
    elif p == 2.0:
        norms = np.sqrt((rows * rows).sum(axis=1))
    else:
        norms = np.abs(rows).max(axis=1)
    keep = norms > 0
    return rows[keep] / norms[keep][:, None]


def _oracle_directions(
    net: Network, x: np.ndarray, p: float, n_directions: int, t: float, seed: int
) -> np.ndarray:
    """Candidate unit-p-norm directions for the directional supremum.

    Deterministic part: the 2*n signed coordinate directions (these attain
    the p=1 norm), every sign vector when the input dimension allows it and
    p=inf (these attain the p=inf norm), and directions extracted from a
    finite-difference Jacobian estimate (built from forward evaluations
    only): its top right-singular vector plus per-row sign vectors.  The
    rest are random points on the unit p-sphere.
    """
    n = x.size
    rng = np.random.default_rng(seed)
    blocks = [np.eye(n), -np.eye(n)]

    # finite-difference Jacobian from forward differences along coordinates
    base = forward_many(net, x[None])[0]
    shifted = forward_many(net, x[None] + t * np.eye(n))
    fd_jacobian = (shifted - base).T / t
    signs = np.sign(fd_jacobian)
    signs[signs == 0] = 1.0
    blocks.append(signs)
    if p == 2.0:
        _, _, vt = np.linalg.svd(fd_jacobian, full_matrices=False)
        blocks.append(vt[:1])
        blocks.append(-vt[:1])
    if p == math.inf and n <= 12:
        grid = np.array(
            np.meshgrid(*([[-1.0, 1.0]] * n), indexing="ij")
        ).reshape(n, -1).T
        blocks.append(grid)

    random_dirs = rng.standard_normal((n_directions, n))
    blocks.append(random_dirs)
    return _unit_p_rows(np.vstack(blocks), p)


def slope_oracle(
    net: Network,
    x,
    p,
    n_directions: int = 5000,
    t: float = 1e-6,
    seed: int = 0,
) -> float:
    """Directional lower-bound estimate of the slope, from forward passes only.

    Evaluates max over sampled unit-p-norm directions v of
    ||f(x + t v) - f(x)||_p / t.  Inside an activation region the quotient
    is exact for each direction, so with the attaining directions in the
    sample the estimate meets the true slope.  Testing aid, not a fast path.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    p = as_p(p)
    if not t > 0:
        raise ValueError("step t must be positive")
    if n_directions < 1:
        raise ValueError("need at least one direction")
    dirs = _oracle_directions(net, x, p, n_directions, t, seed)
    base = forward_many(net, x[None])[0]
    best = 0.0
    for start in range(0, dirs.shape[0], 4096):
        chunk = dirs[start:start + 4096]
        deltas = forward_many(net, x[None] + t * chunk) - base
        if p == 1.0:
            norms = np.abs(deltas).sum(axis=1)
        elif p == 2.0:
            norms = np.sqrt((deltas * deltas).sum(axis=1))
        else:
            norms = np.abs(deltas).max(axis=1)
        best = max(best, float(norms.max()) / t)
    return best


def mean_slope(
    net: Network,
    points,
    p,
    point_ids=None,
    n_threads: int = 1,
) -> SlopeReport:
    """Slope at every point of a sample, reduced into a :class:`SlopeReport`.

    Per-point computations are independent; with ``n_threads > 1`` they run
    on a thread pool.  Results are assembled in point order, so the report
    is identical whatever the parallelism.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise ValueError("points must be a nonempty (n, input_dim) array")
    p = as_p(p)
    if point_ids is None:
        point_ids = range(pts.shape[0])
    point_ids = tuple(int(i) for i in point_ids)
    if len(point_ids) != pts.shape[0]:
        raise ValueError("point_ids must match the number of points")

    if n_threads > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=n_threads) as pool:
            slopes = list(pool.map(lambda row: slope_at(net, row, p), pts))
    else:
        slopes = [slope_at(net, row, p) for row in pts]
    return SlopeReport(point_ids, np.asarray(slopes), p)


class ProductBound(NamedTuple):
    """Layerwise norm-product upper bound on the slope.

    ``opnorm`` multiplies the per-layer operator p-norms; ``frobenius``
    (p=2 only, else None) multiplies the per-layer Frobenius norms, which
    bound the spectral norms from above.
    """

    opnorm: float
    frobenius: float | None


def weight_product_bound(net: Network, p) -> ProductBound:
    """Product of per-layer weight operator norms; bounds the slope everywhere.

    Follows from submultiplicativity applied to the masked weight product,
    since the activation masks have operator norm at most 1.  Dense-only:
    conv layers would need the operator norm of the convolution as a linear
    map, which is out of scope.
    """
    if net.spec.has_conv:
        raise ValueError("weight_product_bound supports dense-only networks")
    p = as_p(p)
    bound = 1.0
    for w in net.weights:
        bound *= matrix_opnorm(w, p)
    if p != 2.0:
        return ProductBound(bound, None)
    frob = 1.0
    for w in net.weights:
        frob *= linalg.frobenius_norm(w)
    return ProductBound(bound, frob)


@dataclass(frozen=True)
class LipschitzCheck:
    ok: bool
    max_ratio: float
    n_checked: int
    n_skipped: int


def lipschitz_check(net: Network, pairs, bound: float, p) -> LipschitzCheck:
    """Check ||f(x) - f(y)||_p <= K ||x - y||_p over a list of point pairs.

    Coincident pairs (zero denominator) are skipped and counted.  Returns
    the verdict together with the largest observed ratio.
    """
    p = as_p(p)
    xs = np.asarray([pair[0] for pair in pairs], dtype=np.float64)
    ys = np.asarray([pair[1] for pair in pairs], dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 2:
        raise ValueError("pairs must be (x, y) vectors of equal dimension")
    fx = forward_many(net, xs)
    fy = forward_many(net, ys)
    if p == 1.0:
        num = np.abs(fx - fy).sum(axis=1)
        den = np.abs(xs - ys).sum(axis=1)
    elif p == 2.0:
        num = np.sqrt(((fx - fy) ** 2).sum(axis=1))
        den = np.sqrt(((xs - ys) ** 2).sum(axis=1))
    else:
        num = np.abs(fx - fy).max(axis=1)
        den = np.abs(xs - ys).max(axis=1)
    usable = den > 0
    ratios = num[usable] / den[usable]
    max_ratio = float(ratios.max()) if ratios.size else 0.0
    return LipschitzCheck(
        ok=bool(np.all(ratios <= bound)),
        max_ratio=max_ratio,
        n_checked=int(usable.sum()),
        n_skipped=int((~usable).sum()),
    )
