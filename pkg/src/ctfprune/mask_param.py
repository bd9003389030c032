"""Differentiable pruning masks over latent weights.

A layer's effective weight is ``latent * mask(latent)``.  Three masks are
available:

* fine:      2*sigmoid(sigma*w**2) - 1, per entry; ~0 near w = 0, ~1 for large |w|.
* coarse:    product of a row, a column and a block aggregate of the fine mask,
             so whole rows/columns/blocks switch off together.
* composed:  coarse * fine, the coarse-to-fine mask.

Two aggregates are provided for the coarse factor.  ``"mean"`` multiplies the
group means of the fine mask; it is exact on the textbook cases (all-ones maps
to all-ones, a zero row annihilates its row) but its value on a surviving
entry equals the product of three group densities, which stays far from 1 once
most of a group is pruned.  ``"saturating"`` replaces each group mean by a
soft "any member alive" gate ``S / (S + eps)`` with ``S = sum(fine**power)``;
raising to a power keeps residual near-zero entries from adding up to an open
gate.  Training uses the saturating gate by default.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .errors import ConfigError, DimensionError, FormatError

AGGREGATES = ("mean", "saturating")


def even_spans(length, parts):
    """Split range(length) into ``min(parts, length)`` near-equal contiguous spans."""
    parts = max(1, min(int(parts), length))
    cuts = np.linspace(0, length, parts + 1).round().astype(int)
    return tuple((int(a), int(b)) for a, b in zip(cuts[:-1], cuts[1:]))


def _check_partition(spans, length, axis):
    pos = 0
    for a, b in spans:
        if a != pos or b <= a:
            raise DimensionError(f"{axis} spans {spans} do not partition [0, {length})")
        pos = b
    if pos != length:
        raise DimensionError(f"{axis} spans {spans} do not partition [0, {length})")


@dataclass(frozen=True)
class ChannelLayout:
    """Row and column spans that tile a rows x cols tensor into blocks.

    Block ``(p, q)`` covers ``row_spans[p] x col_spans[q]``.  For headed layers
    the diagonal blocks ``(k, k)`` are the channels.
    """

    rows: int
    cols: int
    row_spans: tuple
    col_spans: tuple

    def __post_init__(self):
        object.__setattr__(self, "row_spans", tuple(tuple(map(int, s)) for s in self.row_spans))
        object.__setattr__(self, "col_spans", tuple(tuple(map(int, s)) for s in self.col_spans))
        _check_partition(self.row_spans, self.rows, "row")
        _check_partition(self.col_spans, self.cols, "column")

    @classmethod
    def grid(cls, rows, cols, block_rows=4, block_cols=4):
        return cls(rows, cols, even_spans(rows, block_rows), even_spans(cols, block_cols))

    @classmethod
    def headed(cls, heads, rows_per_head, cols, col_groups=None):
        """Row span per head; columns split into ``col_groups`` (default: one per head)."""
        row_spans = tuple((k * rows_per_head, (k + 1) * rows_per_head) for k in range(heads))
        return cls(heads * rows_per_head, cols, row_spans, even_spans(cols, col_groups or heads))

    @property
    def shape(self):
        return (self.rows, self.cols)

    @property
    def blocks(self):
        return [(p, q) for p in range(len(self.row_spans)) for q in range(len(self.col_spans))]

    def block_slices(self, block):
        (r0, r1), (c0, c1) = self.row_spans[block[0]], self.col_spans[block[1]]
        return slice(r0, r1), slice(c0, c1)

    def row_group(self):
        """Block-row index of every tensor row."""
        return np.repeat(np.arange(len(self.row_spans)), [b - a for a, b in self.row_spans])

    def col_group(self):
        return np.repeat(np.arange(len(self.col_spans)), [b - a for a, b in self.col_spans])


class _Pooling:
    """Sum or mean over a rectangular tiling, broadcast back to every entry.

    The map is linear and self-adjoint, so its backward rule is itself.
    """

    def __init__(self, shape, row_spans, col_spans, mean):
        rows, cols = shape
        self.shape = shape
        self.row_starts = np.array([a for a, _ in row_spans])
        self.col_starts = np.array([a for a, _ in col_spans])
        self.row_reps = np.array([b - a for a, b in row_spans])
        self.col_reps = np.array([b - a for a, b in col_spans])
        self.whole_rows = len(row_spans) == rows
        self.whole_cols = len(col_spans) == cols
        self.norm = np.outer(self.row_reps, self.col_reps).astype(float) if mean else None

    def __call__(self, x):
        if self.whole_rows and len(self.col_starts) == 1:
            s = x.sum(axis=1, keepdims=True)
        elif self.whole_cols and len(self.row_starts) == 1:
            s = x.sum(axis=0, keepdims=True)
        else:
            s = np.add.reduceat(np.add.reduceat(x, self.row_starts, axis=0), self.col_starts, axis=1)
        if self.norm is not None:
            s = s / self.norm
        return np.repeat(np.repeat(s, self.row_reps, axis=0), self.col_reps, axis=1)


def _pooling_ops(layout, mean):
    rows, cols = layout.shape
    whole_r = tuple((i, i + 1) for i in range(rows))
    whole_c = tuple((j, j + 1) for j in range(cols))
    return (
        _Pooling(layout.shape, whole_r, ((0, cols),), mean),
        _Pooling(layout.shape, ((0, rows),), whole_c, mean),
        _Pooling(layout.shape, layout.row_spans, layout.col_spans, mean),
    )


_POOL_CACHE = {}


def _pools(layout, mean):
    key = (layout, mean)
    if key not in _POOL_CACHE:
        _POOL_CACHE[key] = _pooling_ops(layout, mean)
    return _POOL_CACHE[key]


def pool(a, pooling):
    return tc.record("group_pool", pooling(a.data), (a,), lambda g: (pooling(g),))


def saturate(a, eps):
    """Entry-wise ``a / (a + eps)`` for ``a >= 0``."""
    d = a.data + eps
    return tc.record("saturate", a.data / d, (a,), lambda g: (g * eps / (d * d),))


def fine_mask(latent, sigma):
    """2*sigmoid(sigma*w**2) - 1, entry-wise."""
    if not sigma > 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    return tc.sub_scalar(tc.scale(tc.sigmoid(tc.scale(tc.square(latent), sigma)), 2.0), 1.0)


def coarse_mask(fine, layout, aggregate="mean", power=4, eps=0.01):
    """Row x column x block aggregate of ``fine``, broadcast back per entry."""
    if fine.shape != layout.shape:
        raise DimensionError(f"layout {layout.shape} does not match mask {fine.shape}")
    if aggregate == "mean":
        row, col, blk = (pool(fine, p) for p in _pools(layout, True))
    elif aggregate == "saturating":
        lifted = fine
        for _ in range(int(np.log2(power))):
            lifted = tc.square(lifted)
        if 2 ** int(np.log2(power)) != power:
            raise ConfigError(f"saturating power must be a power of two, got {power}")
        row, col, blk = (saturate(pool(lifted, p), eps) for p in _pools(layout, False))
    else:
        raise ConfigError(f"unknown coarse aggregate {aggregate!r}; choose from {AGGREGATES}")
    return tc.hadamard(tc.hadamard(row, col), blk)


@dataclass
class MaskTriple:
    fine: tc.Tensor
    coarse: tc.Tensor
    composed: tc.Tensor

    def select(self, field):
        return getattr(self, field)


@dataclass
class LatentLayer:
    """Latent weights plus their block layout and the current sigma."""

    latent: tc.Tensor
    layout: ChannelLayout
    sigma: float = 1.0

    def __post_init__(self):
        if self.latent.shape != self.layout.shape:
            raise DimensionError(f"latent {self.latent.shape} vs layout {self.layout.shape}")

    @classmethod
    def glorot(cls, layout, rng, sigma=1.0):
        bound = np.sqrt(6.0 / (layout.rows + layout.cols))
        data = rng.uniform(-bound, bound, size=layout.shape)
        return cls(tc.Tensor(data, requires_grad=True), layout, sigma)

    def set_sigma(self, sigma):
        if not sigma > 0:
            raise ConfigError(f"sigma must be positive, got {sigma}")
        if sigma < self.sigma:
            raise ConfigError(f"sigma may not decrease ({self.sigma} -> {sigma})")
        self.sigma = float(sigma)


def invert_fine_reparam(weights, sigma, iters=80):
    """Latents ``v`` with ``v * fine(v) == weights`` entry-wise (bisection).

    ``v * (2*sigmoid(sigma*v**2) - 1)`` is odd and strictly increasing, and
    exceeds ``|w|`` at ``v = 2|w| + 3/sqrt(sigma)``, which brackets the root.
    """
    if not sigma > 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    w = np.asarray(weights, dtype=float)
    target = np.abs(w)
    lo = target.copy()
    hi = 2.0 * target + 3.0 / np.sqrt(sigma)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        val = mid * (2.0 / (1.0 + np.exp(-sigma * mid * mid)) - 1.0)
        below = val < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return np.sign(w) * 0.5 * (lo + hi)


def ctf_mask(layer, aggregate="mean", power=4, eps=0.01):
    fine = fine_mask(layer.latent, layer.sigma)
    coarse = coarse_mask(fine, layer.layout, aggregate, power, eps)
    return MaskTriple(fine, coarse, tc.hadamard(coarse, fine))


def effective_weights(layer, mask, field="composed"):
    """latent * mask, where ``mask`` is a MaskTriple (uses ``field``) or a tensor."""
    m = mask.select(field) if isinstance(mask, MaskTriple) else mask
    return tc.hadamard(layer.latent, m)


@dataclass(frozen=True)
class SigmaSchedule:
    sigma0: float = 1.0
    sigma_max: float = 1000.0
    total_epochs: int = 300

    def __post_init__(self):
        if not 0 < self.sigma0 <= self.sigma_max:
            raise ConfigError(f"need 0 < sigma0 <= sigma_max, got {self.sigma0}, {self.sigma_max}")
        if self.total_epochs < 0:
            raise ConfigError("total_epochs must be non-negative")


def anneal_sigma(schedule, epoch):
    """Geometric interpolation from sigma0 (epoch 0) to sigma_max (final epoch)."""
    if not 0 <= epoch <= schedule.total_epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {schedule.total_epochs}]")
    if schedule.total_epochs == 0:
        return schedule.sigma_max
    t = epoch / schedule.total_epochs
    return float(schedule.sigma0 * (schedule.sigma_max / schedule.sigma0) ** t)


AMBIGUOUS_BAND = (0.05, 0.95)


@dataclass
class BinaryMask:
    mask: np.ndarray
    ambiguous_fraction: float


def binarize(mask, threshold=0.5):
    """Hard 0/1 cut at ``threshold`` plus the share of entries in the ambiguous band."""
    if not 0 < threshold < 1:
        raise ConfigError(f"threshold must lie in (0, 1), got {threshold}")
    values = mask.data if isinstance(mask, tc.Tensor) else np.asarray(mask, dtype=float)
    lo, hi = AMBIGUOUS_BAND
    ambiguous = float(((values >= lo) & (values <= hi)).mean())
    return BinaryMask((values >= threshold).astype(np.float64), ambiguous)


def write_mask_file(path, mask, real=False):
    """``rows cols`` header, then one line per row (0/1, or decimals when ``real``)."""
    values = np.asarray(mask, dtype=float)
    rows, cols = values.shape
    lines = [f"{rows} {cols}"]
    for row in values:
        lines.append(" ".join(repr(float(v)) if real else str(int(v)) for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_mask_file(path):
    with open(path) as fh:
        lines = [ln.split() for ln in fh if ln.strip()]
    try:
        rows, cols = (int(v) for v in lines[0])
        values = np.array([[float(v) for v in ln] for ln in lines[1:]], dtype=float)
    except (ValueError, IndexError) as exc:
        raise FormatError(f"{path}: not a mask file ({exc})") from None
    if values.shape != (rows, cols):
        raise FormatError(f"{path}: header says {rows}x{cols}, body is {values.shape}")
    return values
