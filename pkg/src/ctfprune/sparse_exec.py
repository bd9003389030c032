"""Structured-sparsity analysis, model compaction and inference benchmarks.

A binary mask is classified greedily: zero blocks first, then zero columns,
then zero rows; remaining zeros are individually pruned.  Compaction turns
the masked GCN into per-stage :class:`CompactMatrix` kernels that skip every
deleted input row and output column.  Entries that sit alone in their row or
column are peeled into a residual coordinate list instead of keeping a whole
row or column of the dense core alive.

Liveness crosses layers.  A dead filter column removes the matching classifier
rows, a node with no live classifier rows drops out of the aggregation, and a
head with no surviving filters is skipped.  Alive entries that can never
influence the logits are kept as *inert* triples, so :meth:`CompactModel.expand`
still reconstructs ``mask * weights`` exactly.

Every activation in :mod:`ctfprune.gcn` maps 0 to 0, which is what makes a
structurally zero pre-activation safe to drop.
"""

import statistics
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import ConfigError, DimensionError, StructuralError
from .gcn import LAYER_NAMES

# activations as plain numpy; each maps 0 to 0
_ACT = {"relu": lambda x: np.maximum(x, 0.0), "identity": lambda x: x, "tanh": np.tanh}


@dataclass
class SparsitySummary:
    """Greedy inventory of one binary mask.

    ``counts`` splits the zero entries into ``block``, ``col``, ``row`` and
    ``residual`` (individually pruned); the four always add up to ``pruned``.
    """

    shape: tuple
    mask: np.ndarray
    dead_blocks: list
    dead_cols: list
    dead_rows: list
    residual_entries: np.ndarray  # k x 2 (row, col) survivors in partially alive rows/cols
    counts: dict
    pruned: int
    no_pruning: bool

    @property
    def structured_fraction(self):
        if self.pruned == 0:
            return 0.0
        return (self.counts["block"] + self.counts["col"] + self.counts["row"]) / self.pruned


def analyze_mask(mask, layout):
    """Classify every zero of a binary mask by the block > column > row priority."""
    m = np.asarray(getattr(mask, "mask", mask), dtype=float)
    if m.shape != layout.shape:
        raise DimensionError(f"mask {m.shape} does not match layout {layout.shape}")
    if not np.all((m == 0) | (m == 1)):
        raise ConfigError("analyze_mask needs a binary mask")
    alive = m > 0
    covered = np.zeros(m.shape, dtype=bool)
    category = np.zeros(m.shape, dtype=np.int8)  # 1 block, 2 col, 3 row, 4 residual

    dead_blocks = []
    for block in layout.blocks:
        rs, cs = layout.block_slices(block)
        if not alive[rs, cs].any():
            dead_blocks.append(block)
            covered[rs, cs] = True
            category[rs, cs] = 1

    dead_cols = []
    for j in range(m.shape[1]):
        open_ = ~covered[:, j]
        if open_.any() and not alive[open_, j].any():
            dead_cols.append(j)
            category[open_, j] = 2
            covered[open_, j] = True

    dead_rows = []
    for i in range(m.shape[0]):
        open_ = ~covered[i]
        if open_.any() and not alive[i, open_].any():
            dead_rows.append(i)
            category[i, open_] = 3
            covered[i, open_] = True

    loose = ~alive & ~covered
    category[loose] = 4
    # survivors sharing a row or column with an individually pruned zero
    partial = loose.any(axis=1)[:, None] | loose.any(axis=0)[None, :]
    residual = np.argwhere(alive & partial)
    counts = {name: int((category == code).sum()) for code, name in
              ((1, "block"), (2, "col"), (3, "row"), (4, "residual"))}
    pruned = int((~alive).sum())
    return SparsitySummary(m.shape, m, dead_blocks, dead_cols, dead_rows, residual, counts, pruned,
                           pruned == 0)


def structured_fraction(summaries):
    """Share of all pruned entries, pooled over layers, removed by group deletion."""
    pruned = sum(s.pruned for s in summaries.values())
    if pruned == 0:
        return 0.0
    grouped = sum(s.counts["block"] + s.counts["col"] + s.counts["row"] for s in summaries.values())
    return grouped / pruned


@dataclass
class CompactMatrix:
    """Right-multiplication kernel ``x -> x @ M`` for a masked matrix M.

    ``row_map``/``col_map`` give the original indices of the sub-matrix this
    kernel was built on.  ``out`` lists the sub-matrix columns the kernel
    produces; ``core_rows`` x ``core_cols`` (positions into the sub-matrix rows
    and into ``out``) hold the dense core, and ``res_*`` the peeled entries.
    """

    shape: tuple
    row_map: np.ndarray
    col_map: np.ndarray
    out: np.ndarray
    core_rows: np.ndarray
    core_cols: np.ndarray
    core: np.ndarray
    res_rows: np.ndarray
    res_cols: np.ndarray
    res_vals: np.ndarray

    @classmethod
    def build(cls, values, pattern, row_map, col_map, shape, peel=True):
        values = np.where(pattern, values, 0.0)
        live = pattern.copy()
        rows_on = live.any(axis=1)
        cols_on = live.any(axis=0)
        res = []
        while peel:
            changed = False
            r_count = live[:, cols_on].sum(axis=1) * rows_on
            c_count = live[rows_on].sum(axis=0) * cols_on
            if cols_on.sum() > 1:
                for i in np.flatnonzero(r_count == 1):
                    j = np.flatnonzero(live[i] & cols_on)[0]
                    res.append((i, j))
                    live[i, j] = False
                    rows_on[i] = False
                    changed = True
            if rows_on.sum() > 1:
                for j in np.flatnonzero(c_count == 1):
                    if not cols_on[j]:
                        continue
                    hit = np.flatnonzero(live[:, j] & rows_on)
                    if len(hit) != 1:
                        continue
                    res.append((hit[0], j))
                    live[hit[0], j] = False
                    cols_on[j] = False
                    changed = True
            rows_on &= live.any(axis=1)
            cols_on &= live.any(axis=0)
            if not changed:
                break
        out = np.flatnonzero(cols_on | pattern.any(axis=0))
        pos = {int(j): p for p, j in enumerate(out)}
        core_rows = np.flatnonzero(rows_on)
        core_cols_sub = np.flatnonzero(cols_on)
        core = np.ascontiguousarray(values[np.ix_(core_rows, core_cols_sub)])
        res = sorted(res)
        rr = np.array([i for i, _ in res], dtype=np.intp)
        rc = np.array([pos[int(j)] for _, j in res], dtype=np.intp)
        rv = np.array([values[i, j] for i, j in res], dtype=np.float64)
        return cls(tuple(shape), np.asarray(row_map), np.asarray(col_map), out, core_rows,
                   np.array([pos[int(j)] for j in core_cols_sub], dtype=np.intp), core, rr, rc, rv)

    @property
    def in_dim(self):
        return len(self.row_map)

    @property
    def out_dim(self):
        return len(self.out)

    def apply(self, x):
        """x: batch x in_dim -> batch x out_dim."""
        if x.shape[1] != self.in_dim:
            raise DimensionError(f"kernel expects {self.in_dim} inputs, got {x.shape[1]}")
        full_rows = len(self.core_rows) == self.in_dim
        full_cols = len(self.core_cols) == self.out_dim
        if full_rows and full_cols and not len(self.res_vals):
            return x @ self.core
        y = np.zeros((x.shape[0], self.out_dim))
        if len(self.core_rows):
            xc = x if full_rows else x[:, self.core_rows]
            if full_cols:
                y += xc @ self.core
            else:
                y[:, self.core_cols] = xc @ self.core
        if len(self.res_vals):
            np.add.at(y.T, self.res_cols, (x[:, self.res_rows] * self.res_vals).T)
        return y

    def flops(self, batch_rows):
        return 2 * batch_rows * (self.core.size + len(self.res_vals))

    def scatter_into(self, full):
        """Write this kernel's entries into ``full`` at their original coordinates."""
        cols = self.col_map[self.out]
        full[np.ix_(self.row_map[self.core_rows], cols[self.core_cols])] += self.core
        np.add.at(full, (self.row_map[self.res_rows], cols[self.res_cols]), self.res_vals)


@dataclass
class HeadStage:
    head: int
    feats: np.ndarray  # filter-bank rows (within the head) this head feeds
    kernel: CompactMatrix  # A_k^T restricted to the kept nodes


@dataclass
class CompactModel:
    config: object
    nodes: np.ndarray  # original node indices carried through the network
    heads: list  # HeadStage per head that contributes
    conv: CompactMatrix
    dense: CompactMatrix
    inert: dict  # layer -> (rows, cols, values) of alive but unreachable entries
    structural: bool
    source: str = None
    shapes: dict = field(default_factory=dict)
    pruned: bool = True  # False when every mask was all ones

    @property
    def shape_preserving(self):
        """True when no tensor shrank."""
        return not self.structural

    def expand(self):
        """Full-size weights rebuilt from the compact pieces."""
        cfg = self.config
        n = cfg.nodes
        full = {name: np.zeros(self.shapes[name]) for name in LAYER_NAMES}
        for stage in self.heads:
            block = np.zeros((n, n))
            stage.kernel.scatter_into(block)  # holds A_k^T
            full["adjacency"][stage.head * n:(stage.head + 1) * n] += block.T
        self.conv.scatter_into(full["conv"])
        self.dense.scatter_into(full["dense"])
        for name, (r, c, v) in self.inert.items():
            np.add.at(full[name], (r, c), v)
        return full

    def flops(self, batch):
        total = sum(st.kernel.flops(batch * len(st.feats)) for st in self.heads)
        return total + self.conv.flops(batch * len(self.nodes)) + self.dense.flops(batch)

    def describe(self):
        return {
            "nodes": len(self.nodes), "heads": len(self.heads),
            "conv_core": self.conv.core.shape, "conv_residual": len(self.conv.res_vals),
            "dense_core": self.dense.core.shape, "dense_residual": len(self.dense.res_vals),
        }


def dense_flops(config, batch):
    n, s, K, C = config.nodes, config.features, config.heads, config.filters
    return 2 * batch * (K * s * n * n + n * K * s * C + n * C * config.classes)


def _masked(weights, summaries, name):
    w = np.asarray(weights[name], dtype=float)
    if name in summaries:
        m = summaries[name].mask
        if m.shape != w.shape:
            raise StructuralError(f"{name}: mask {m.shape} does not fit weights {w.shape}")
        return w * m, m > 0
    return w.copy(), np.ones(w.shape, dtype=bool)


def compact_model(config, weights, summaries, structural=True, source=None):
    """Build a CompactModel from effective weights and per-layer summaries.

    With ``structural=False`` every tensor keeps its original shape, which is
    the execution a purely unstructured mask gets.
    """
    if config.attention_softmax:
        raise StructuralError("softmax-normalized adjacency is dense after normalization; "
                              "compaction is not supported")
    if config.activation not in _ACT:
        raise StructuralError(f"no compact kernel for activation {config.activation!r}")
    n, s, K, C, Q = config.nodes, config.features, config.heads, config.filters, config.classes
    A, Am = _masked(weights, summaries, "adjacency")
    W, Wm = _masked(weights, summaries, "conv")
    D, Dm = _masked(weights, summaries, "dense")
    shapes = {"adjacency": (K * n, n), "conv": (K * s, C), "dense": (n * C, Q)}
    for name, arr in (("adjacency", A), ("conv", W), ("dense", D)):
        if arr.shape != shapes[name]:
            raise StructuralError(f"{name}: weights {arr.shape} do not match the configuration {shapes[name]}")

    if not structural:
        full_a = np.ones((n, n), dtype=bool)
        heads = [HeadStage(k, np.arange(s),
                           CompactMatrix.build(A[k * n:(k + 1) * n].T, full_a, np.arange(n), np.arange(n),
                                               (n, n), peel=False))
                 for k in range(K)]
        conv = CompactMatrix.build(W, np.ones(W.shape, bool), np.arange(K * s), np.arange(C), W.shape, peel=False)
        dense = CompactMatrix.build(D, np.ones(D.shape, bool), np.arange(n * C), np.arange(Q), D.shape, peel=False)
        pruned = any(summaries[k].pruned for k in summaries)
        return CompactModel(config, np.arange(n), heads, conv, dense, {}, False, source, shapes, pruned)

    head_rows = Am.reshape(K, n, n).any(axis=2)  # head k, output node i has a live A row
    W3 = Wm.reshape(K, s, C)
    head_cols = W3.any(axis=1)  # head k reaches filter c
    p_alive = (head_rows[:, :, None] & head_cols[:, None, :]).any(axis=0)  # n x C
    used_d = Dm.reshape(n, C, Q) & p_alive[:, :, None]
    need_z = used_d.any(axis=2)
    nodes = np.flatnonzero(need_z.any(axis=1))
    cols = np.flatnonzero(need_z.any(axis=0))
    if len(nodes) == 0:
        raise StructuralError("mask disconnects the network: no live path from the input to the logits")

    heads, feats_all = [], []
    for k in range(K):
        if not head_rows[k, nodes].any():
            continue
        feats = np.flatnonzero(W3[k][:, cols].any(axis=1))
        if len(feats) == 0:
            continue
        sub = A[k * n:(k + 1) * n][nodes].T  # n_in x |nodes|
        pat = Am[k * n:(k + 1) * n][nodes].T
        heads.append(HeadStage(k, feats, CompactMatrix.build(sub, pat, np.arange(n), nodes, (n, n))))
        feats_all.append(k * s + feats)
    conv_rows = np.concatenate(feats_all)
    conv = CompactMatrix.build(W[np.ix_(conv_rows, cols)], Wm[np.ix_(conv_rows, cols)],
                               conv_rows, cols, W.shape)
    # classifier input is the flattened (node, filter) grid the conv stage produces
    conv_out = cols[conv.out]
    grid = (nodes[:, None] * C + conv_out[None, :]).ravel()
    dpat = used_d.reshape(n * C, Q)[grid]
    dense = CompactMatrix.build(D[grid], dpat, grid, np.arange(Q), D.shape)

    # heads whose aggregation output was not fully kept need zero-filled node slots
    pruned = any(summaries[k].pruned for k in summaries)
    model = CompactModel(config, nodes, heads, conv, dense, {}, True, source, shapes, pruned)
    executed = model.expand()
    for name, arr, pat in (("adjacency", A, Am), ("conv", W, Wm), ("dense", D, Dm)):
        left = pat & (executed[name] == 0) & (arr != 0)
        r, c = np.nonzero(left)
        model.inert[name] = (r, c, arr[r, c])
    return model


def compact_forward(cm, batch):
    """Logits for a batch of s x n signals (same layout as ``gcn.model_forward``)."""
    cfg = cm.config
    U = np.asarray(batch, dtype=np.float64)
    if U.ndim == 2:
        U = U[None]
    if U.ndim != 3 or U.shape[1:] != (cfg.features, cfg.nodes):
        raise DimensionError(f"batch must be B x {cfg.features} x {cfg.nodes}, got {U.shape}")
    if not cm.structural:
        return _dense_forward(cm, U)
    B, N = U.shape[0], len(cm.nodes)
    parts = []
    for st in cm.heads:
        f = len(st.feats)
        x = U[:, st.feats, :].reshape(B * f, cfg.nodes)
        h = st.kernel.apply(x)
        if st.kernel.out_dim != N:
            full = np.zeros((B * f, N))
            full[:, st.kernel.out] = h
            h = full
        parts.append(h.reshape(B, f, N))
    R = np.concatenate(parts, axis=1).transpose(0, 2, 1).reshape(B * N, -1)
    Z = _ACT[cfg.activation](cm.conv.apply(R))
    logits = cm.dense.apply(Z.reshape(B, -1))
    if cm.dense.out_dim != cfg.classes:
        full = np.zeros((B, cfg.classes))
        full[:, cm.dense.out] = logits
        logits = full
    return logits


def _dense_forward(cm, U):
    cfg = cm.config
    B, n, s, K = U.shape[0], cfg.nodes, cfg.features, cfg.heads
    At = np.stack([st.kernel.core for st in cm.heads])  # K x n x n, each A_k^T
    H = np.matmul(U[:, None], At[None])  # B, K, s, n
    R = H.transpose(0, 3, 1, 2).reshape(B * n, K * s)
    Z = _ACT[cfg.activation](R @ cm.conv.core)
    return Z.reshape(B, -1) @ cm.dense.core


@dataclass
class BenchResult:
    dense_ms: float
    compact_ms: float
    wallclock_speedup: object  # float, or None when shapes are unchanged
    flops_dense: int
    flops_compact: int
    flop_speedup: object
    threads: object
    repetitions: int

    def speedup_text(self, which="wallclock"):
        v = self.wallclock_speedup if which == "wallclock" else self.flop_speedup
        return "none" if v is None else f"{v:.4g}"


def _median_ms(fn, batch, repetitions, warmup):
    for _ in range(warmup):
        fn(batch)
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        fn(batch)
        times.append(time.perf_counter() - t0)
    return 1000.0 * statistics.median(times)


def benchmark(dense, cm, batch, repetitions=30, warmup=3, threads=1):
    """Median wall-clock of ``dense`` vs ``cm`` plus analytic FLOP counts.

    ``dense`` is the unpruned reference (a shape-preserving CompactModel).
    ``threads=None`` leaves the BLAS thread pool alone.
    """
    if repetitions < 10:
        raise ConfigError("benchmark needs at least 10 repetitions")
    B = np.asarray(batch).shape[0]
    run_dense = lambda x: compact_forward(dense, x)
    run_compact = lambda x: compact_forward(cm, x)
    if threads is None:
        d_ms = _median_ms(run_dense, batch, repetitions, warmup)
        c_ms = _median_ms(run_compact, batch, repetitions, warmup)
    else:
        with threadpool_limits(limits=threads):
            d_ms = _median_ms(run_dense, batch, repetitions, warmup)
            c_ms = _median_ms(run_compact, batch, repetitions, warmup)
    f_dense = dense_flops(dense.config, B)
    f_compact = cm.flops(B)
    if cm.shape_preserving and cm.pruned:
        # pruned but nothing shrank: no actual speedup to report
        wall = flop = None
    else:
        wall = d_ms / c_ms
        flop = f_dense / f_compact if f_compact else float("inf")
    return BenchResult(d_ms, c_ms, wall, f_dense, f_compact, flop, threads, repetitions)
