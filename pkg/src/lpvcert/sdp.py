"""Block-diagonal semidefinite feasibility problems and a built-in solver.

Problem form: find symmetric block variables X_b subject to linear
equality constraints sum_{b,i<=j} c_{bij} X_b[i,j] = rhs, where each
block is either "psd" (X_b must be positive semidefinite) or "sym"
(free symmetric, no cone constraint).

The solver minimizes sum of traces of the psd blocks, which bounds the
feasible-case iterates and makes the dual strictly feasible, then runs
a primal-dual path-following interior point method with Nesterov-Todd
scaling on the homogeneous self-dual embedding, so both feasibility and
infeasibility come with checkable certificates:

  * feasible:   block values with small equality residual, re-verified
                by an eigenvalue/residual pass independent of the
                solver internals;
  * infeasible: a dual ray y with y.b < 0 whose aggregate matrix
                sum_i y_i A_i is positive semidefinite within feas-tol.

Free symmetric blocks are eliminated from the equality system before
the interior point iterations (sparse Gaussian elimination with
Markowitz-style pivoting) and recovered by back-substitution, so they
never enter the cone machinery.  The Schur complement is assembled
densely per block with batched congruence transforms; a Cholesky solve
produces the search directions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse

SQRT2 = math.sqrt(2.0)


class SdpFormatError(ValueError):
    """Malformed problem data (bad block/entry references)."""


@dataclass(frozen=True)
class SdpBlock:
    size: int
    kind: str  # "psd" | "sym"


@dataclass
class SdpConstraint:
    """Linear functional sum c_{bij} X_b[i,j] (i<=j) pinned to rhs."""

    entries: list  # [(block, i, j, coeff), ...]
    rhs: float


@dataclass
class SdpProblem:
    blocks: list
    constraints: list
    name: str = ""

    def n_scalar_vars(self) -> int:
        return sum(b.size * (b.size + 1) // 2 for b in self.blocks)

    def n_psd_vars(self) -> int:
        return sum(b.size * (b.size + 1) // 2 for b in self.blocks if b.kind == "psd")

    def validate(self) -> None:
        for b in self.blocks:
            if b.size < 1:
                raise SdpFormatError(f"block size must be >= 1, got {b.size}")
            if b.kind not in ("psd", "sym"):
                raise SdpFormatError(f"unknown block kind {b.kind!r}")
        for ci, con in enumerate(self.constraints):
            if not math.isfinite(con.rhs):
                raise SdpFormatError(f"constraint {ci}: non-finite rhs")
            for (bk, i, j, cval) in con.entries:
                if not (0 <= bk < len(self.blocks)):
                    raise SdpFormatError(f"constraint {ci}: bad block index {bk}")
                n = self.blocks[bk].size
                if not (0 <= i <= j < n):
                    raise SdpFormatError(
                        f"constraint {ci}: entry ({i},{j}) outside upper triangle of "
                        f"block {bk} (size {n})")
                if not math.isfinite(cval):
                    raise SdpFormatError(f"constraint {ci}: non-finite coefficient")


@dataclass
class SdpSolution:
    status: str  # "feasible" | "infeasible" | "numerical-failure"
    block_values: list | None = None
    max_equality_violation: float = math.nan
    min_psd_eigenvalue: float = math.nan
    iterations: int = 0
    ray: np.ndarray | None = None
    ray_objective: float = math.nan        # ray.b, negative for a valid ray
    ray_slack_min_eigenvalue: float = math.nan
    message: str = ""

    @property
    def feasible(self) -> bool:
        return self.status == "feasible"


@dataclass
class SolveOptions:
    feas_tol: float = 1e-7
    gap_tol: float = 1e-7
    max_iters: int = 200
    step_fraction: float = 0.99
    dense_qr_limit: int = 2_000_000  # m*n cap for rank-revealing row removal


# ---------------------------------------------------------------------------
# text dump format
# ---------------------------------------------------------------------------

def dump_problem(p: SdpProblem) -> str:
    """Sparse text dump (one constraint entry per line) for cross-checks.

    Lines: "block <idx> <size> <kind>", "e <con> <blk> <i> <j> <coeff>",
    "rhs <con> <value>".  Floats use repr for exact round-trips.
    """
    lines = ["# lpvcert sdp dump v1", f"problem {p.name or 'unnamed'}",
             f"blocks {len(p.blocks)}"]
    for k, b in enumerate(p.blocks):
        lines.append(f"block {k} {b.size} {b.kind}")
    lines.append(f"constraints {len(p.constraints)}")
    for ci, con in enumerate(p.constraints):
        for (bk, i, j, cval) in con.entries:
            lines.append(f"e {ci} {bk} {i} {j} {cval!r}")
        lines.append(f"rhs {ci} {con.rhs!r}")
    lines.append("end")
    return "\n".join(lines) + "\n"


def load_problem(text: str) -> SdpProblem:
    blocks: list[SdpBlock] = []
    constraints: list[SdpConstraint] = []
    name = ""
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if parts[0] == "problem":
            name = parts[1] if len(parts) > 1 else ""
        elif parts[0] == "block":
            blocks.append(SdpBlock(size=int(parts[2]), kind=parts[3]))
        elif parts[0] == "constraints":
            constraints = [SdpConstraint(entries=[], rhs=0.0) for _ in range(int(parts[1]))]
        elif parts[0] == "e":
            ci = int(parts[1])
            constraints[ci].entries.append(
                (int(parts[2]), int(parts[3]), int(parts[4]), float(parts[5])))
        elif parts[0] == "rhs":
            constraints[int(parts[1])].rhs = float(parts[2])
        elif parts[0] in ("blocks", "end"):
            continue
        else:
            raise SdpFormatError(f"unrecognized dump line: {line!r}")
    p = SdpProblem(blocks=blocks, constraints=constraints, name=name)
    p.validate()
    return p


# ---------------------------------------------------------------------------
# svec helpers
# ---------------------------------------------------------------------------

def tri_index(i: int, j: int) -> int:
    """Position of upper-triangle entry (i<=j) in column-major svec order."""
    return j * (j + 1) // 2 + i


def svec_indices(n: int):
    """(i_arr, j_arr, scale) arrays for the svec layout of an n x n block."""
    ii, jj = [], []
    for j in range(n):
        for i in range(j + 1):
            ii.append(i)
            jj.append(j)
    ii = np.array(ii, dtype=int)
    jj = np.array(jj, dtype=int)
    scale = np.where(ii == jj, 1.0, SQRT2)
    return ii, jj, scale


def svec(mat: np.ndarray, idx=None) -> np.ndarray:
    n = mat.shape[0]
    ii, jj, scale = idx if idx is not None else svec_indices(n)
    return mat[ii, jj] * scale


def unsvec(v: np.ndarray, n: int, idx=None) -> np.ndarray:
    ii, jj, scale = idx if idx is not None else svec_indices(n)
    out = np.zeros((n, n))
    vals = v / scale
    out[ii, jj] = vals
    out[jj, ii] = vals
    return out


# ---------------------------------------------------------------------------
# preprocessing: validation, free-variable elimination, row reduction
# ---------------------------------------------------------------------------

_ZERO_ROW_TOL = 1e-11
_RHS_TOL = 1e-9


@dataclass
class _Preprocessed:
    problem: SdpProblem
    psd_sizes: list
    psd_block_of: list            # original block index per psd block
    rows: list                    # list of dicts {psd_gid: coeff} (entry convention)
    rhs: np.ndarray
    combos: list                  # per reduced row: {orig_row: weight}
    pivots: list                  # [(free_gid, row_dict, rhs)] in elimination order
    gid_block: np.ndarray         # entry gid -> block index
    gid_i: np.ndarray
    gid_j: np.ndarray
    free_gids: set
    verdict: str = "ok"           # "ok" | "infeasible"
    verdict_ray: np.ndarray | None = None
    verdict_message: str = ""


def _entry_gids(blocks: Sequence[SdpBlock]):
    offsets = []
    total = 0
    for b in blocks:
        offsets.append(total)
        total += b.size * (b.size + 1) // 2
    gid_block = np.empty(total, dtype=int)
    gid_i = np.empty(total, dtype=int)
    gid_j = np.empty(total, dtype=int)
    for bk, b in enumerate(blocks):
        for j in range(b.size):
            for i in range(j + 1):
                g = offsets[bk] + tri_index(i, j)
                gid_block[g] = bk
                gid_i[g] = i
                gid_j[g] = j
    return offsets, gid_block, gid_i, gid_j


def _preprocess(problem: SdpProblem, opts: SolveOptions) -> _Preprocessed:
    problem.validate()
    offsets, gid_block, gid_i, gid_j = _entry_gids(problem.blocks)
    free_gids: set[int] = set()
    for bk, b in enumerate(problem.blocks):
        if b.kind == "sym":
            free_gids.update(range(offsets[bk], offsets[bk] + b.size * (b.size + 1) // 2))

    rows: list[dict] = []
    rhs: list[float] = []
    combos: list[dict] = []
    for ci, con in enumerate(problem.constraints):
        row: dict[int, float] = {}
        for (bk, i, j, cval) in con.entries:
            g = offsets[bk] + tri_index(i, j)
            row[g] = row.get(g, 0.0) + cval
        rows.append({g: c for g, c in row.items() if abs(c) > 0.0})
        rhs.append(con.rhs)
        combos.append({ci: 1.0})

    psd_sizes = [b.size for b in problem.blocks if b.kind == "psd"]
    psd_block_of = [bk for bk, b in enumerate(problem.blocks) if b.kind == "psd"]

    pre = _Preprocessed(problem=problem, psd_sizes=psd_sizes, psd_block_of=psd_block_of,
                        rows=rows, rhs=np.asarray(rhs), combos=combos, pivots=[],
                        gid_block=gid_block, gid_i=gid_i, gid_j=gid_j,
                        free_gids=free_gids)

    active = [True] * len(rows)

    # --- sparse elimination of free entries --------------------------------
    col_rows: dict[int, set] = {}
    for r, row in enumerate(rows):
        for g in row:
            if g in free_gids:
                col_rows.setdefault(g, set()).add(r)

    def _combine(r: int, factor: float, p: int) -> None:
        """rows[r] -= factor * rows[p]; keeps col_rows in sync."""
        prow = rows[p]
        row = rows[r]
        for g, c in prow.items():
            nv = row.get(g, 0.0) - factor * c
            if abs(nv) <= 1e-13:
                if g in row:
                    del row[g]
                    if g in col_rows:
                        col_rows[g].discard(r)
            else:
                if g not in row and g in col_rows:
                    col_rows[g].add(r)
                row[g] = nv
        rhs[r] -= factor * rhs[p]
        cr, cp = combos[r], combos[p]
        for orig, w in cp.items():
            nv = cr.get(orig, 0.0) - factor * w
            if abs(nv) <= 1e-300:
                cr.pop(orig, None)
            else:
                cr[orig] = nv

    while col_rows:
        col = min(col_rows, key=lambda g: (len(col_rows[g]), g))
        holders = sorted(col_rows.pop(col))
        holders = [r for r in holders if active[r] and col in rows[r]]
        if not holders:
            continue  # variable vanished; recovered as zero
        colmax = max(abs(rows[r][col]) for r in holders)
        candidates = [r for r in holders if abs(rows[r][col]) >= 0.1 * colmax]
        pivot = min(candidates, key=lambda r: (len(rows[r]), r))
        pc = rows[pivot][col]
        for r in holders:
            if r == pivot:
                continue
            _combine(r, rows[r][col] / pc, pivot)
        active[pivot] = False
        for g in rows[pivot]:
            if g in col_rows:
                col_rows[g].discard(pivot)
        pre.pivots.append((col, dict(rows[pivot]), rhs[pivot]))

    # --- drop zero rows / detect contradictions ----------------------------
    kept: list[int] = []
    for r, row in enumerate(rows):
        if not active[r]:
            continue
        stray = [g for g in row if g in free_gids]
        for g in stray:
            if abs(row[g]) > 1e-9:
                raise AssertionError("free variable survived elimination")
            del row[g]
        norm = math.sqrt(sum(c * c for c in row.values()))
        if norm <= _ZERO_ROW_TOL:
            if abs(rhs[r]) > _RHS_TOL:
                return _infeasible_verdict(pre, combos[r], rhs[r],
                                           "inconsistent equality (0 = nonzero)")
            active[r] = False
            continue
        scale = 1.0 / norm
        rows[r] = {g: c * scale for g, c in row.items()}
        rhs[r] *= scale
        combos[r] = {o: w * scale for o, w in combos[r].items()}
        kept.append(r)

    # --- exact-duplicate removal -------------------------------------------
    groups: dict[tuple, list] = {}
    deduped: list[int] = []
    for r in kept:
        row = rows[r]
        first = min(row)
        sign = 1.0 if row[first] > 0 else -1.0
        key = tuple(sorted(row))
        match = None
        for other in groups.get(key, []):
            orow = rows[other]
            osign = 1.0 if orow[min(orow)] > 0 else -1.0
            if all(abs(sign * row[g] - osign * orow[g]) <= 1e-9 for g in row):
                match = (other, osign)
                break
        if match is None:
            groups.setdefault(key, []).append(r)
            deduped.append(r)
        else:
            other, osign = match
            if abs(sign * rhs[r] - osign * rhs[other]) > _RHS_TOL:
                ray = dict(combos[r])
                for o, w in combos[other].items():
                    ray[o] = ray.get(o, 0.0) - (sign / osign) * w
                return _infeasible_verdict(pre, ray, rhs[r] - (sign / osign) * rhs[other],
                                           "contradictory duplicate constraints")
            active[r] = False

    # --- rank-revealing removal on small problems --------------------------
    psd_cols = sorted({g for r in deduped for g in rows[r]})
    if deduped and psd_cols and len(deduped) * len(psd_cols) <= opts.dense_qr_limit:
        colpos = {g: k for k, g in enumerate(psd_cols)}
        dense = np.zeros((len(deduped), len(psd_cols)))
        for rr, r in enumerate(deduped):
            for g, c in rows[r].items():
                dense[rr, colpos[g]] = c
        _, rmat, perm = scipy.linalg.qr(dense.T, mode="economic", pivoting=True)
        diag = np.abs(np.diag(rmat))
        rank = int(np.sum(diag > max(diag[0], 1.0) * 1e-11)) if diag.size else 0
        if rank < len(deduped):
            keep_rows = sorted(perm[:rank])
            drop_rows = sorted(perm[rank:])
            akept = dense[keep_rows]
            for dr in drop_rows:
                coef, *_ = np.linalg.lstsq(akept.T, dense[dr], rcond=None)
                resid = rhs[deduped[dr]] - float(coef @ np.asarray(
                    [rhs[deduped[k]] for k in keep_rows]))
                if abs(resid) > 1e-7:
                    ray = dict(combos[deduped[dr]])
                    for w, k in zip(coef, keep_rows):
                        for o, ww in combos[deduped[k]].items():
                            ray[o] = ray.get(o, 0.0) - w * ww
                    return _infeasible_verdict(pre, ray, resid,
                                               "inconsistent dependent constraints")
                active[deduped[dr]] = False
            deduped = [deduped[k] for k in keep_rows]

    pre.rows = [rows[r] for r in deduped]
    pre.rhs = np.asarray([rhs[r] for r in deduped])
    pre.combos = [combos[r] for r in deduped]
    return pre


def _infeasible_verdict(pre: _Preprocessed, combo: dict, rhs_value: float,
                        message: str) -> _Preprocessed:
    ray = np.zeros(len(pre.problem.constraints))
    for o, w in combo.items():
        ray[o] = w
    if rhs_value > 0:
        ray = -ray
    scale = max(abs(rhs_value), 1e-300)
    pre.verdict = "infeasible"
    pre.verdict_ray = ray / scale
    pre.verdict_message = message
    return pre


def preprocess(problem: SdpProblem) -> SdpProblem:
    """Public preprocessing: eliminate free blocks, drop redundant rows,
    rescale rows to unit norm.  Returns the reduced psd-only problem."""
    pre = _preprocess(problem, SolveOptions())
    blocks = [SdpBlock(size=s, kind="psd") for s in pre.psd_sizes]
    remap = {bk: k for k, bk in enumerate(pre.psd_block_of)}
    constraints = []
    if pre.verdict == "infeasible":
        constraints.append(SdpConstraint(entries=[], rhs=1.0))
    else:
        for row, r in zip(pre.rows, pre.rhs):
            entries = [(remap[pre.gid_block[g]], int(pre.gid_i[g]), int(pre.gid_j[g]), c)
                       for g, c in sorted(row.items())]
            constraints.append(SdpConstraint(entries=entries, rhs=float(r)))
    return SdpProblem(blocks=blocks, constraints=constraints,
                      name=problem.name + ":reduced" if problem.name else "reduced")


# ---------------------------------------------------------------------------
# interior point core (homogeneous self-dual embedding, NT scaling)
# ---------------------------------------------------------------------------

class _BlockData:
    """Per-psd-block constraint data with batched congruence transforms."""

    def __init__(self, n: int, col_offset: int):
        self.n = n
        self.s = n * (n + 1) // 2
        self.col_offset = col_offset
        self.idx = svec_indices(n)
        self.touch: list[int] = []
        self._touch_pos: dict[int, int] = {}
        self._coo_row: list[int] = []
        self._coo_k: list[int] = []
        self._coo_mat: list[float] = []
        self._svec_entries: list[tuple] = []

    def add(self, reduced_row: int, i: int, j: int, coeff: float) -> None:
        pos = self._touch_pos.get(reduced_row)
        if pos is None:
            pos = len(self.touch)
            self._touch_pos[reduced_row] = pos
            self.touch.append(reduced_row)
        k = tri_index(i, j)
        self._coo_row.append(pos)
        self._coo_k.append(k)
        self._coo_mat.append(coeff if i == j else coeff / 2.0)
        self._svec_entries.append((pos, k, coeff if i == j else coeff / SQRT2))

    def finalize(self) -> None:
        self.touch_arr = np.asarray(self.touch, dtype=int)
        self.coo_row = np.asarray(self._coo_row, dtype=int)
        self.coo_i = np.asarray([int(self.idx[0][k]) for k in self._coo_k], dtype=int)
        self.coo_j = np.asarray([int(self.idx[1][k]) for k in self._coo_k], dtype=int)
        self.coo_mat = np.asarray(self._coo_mat)
        rows = [e[0] for e in self._svec_entries]
        cols = [e[1] for e in self._svec_entries]
        vals = [e[2] for e in self._svec_entries]
        self.svec_csr = scipy.sparse.csr_matrix(
            (vals, (rows, cols)), shape=(len(self.touch), self.s))
        self._coo_row = self._coo_k = self._coo_mat = None
        self._svec_entries = None

    def schur_accumulate(self, M: np.ndarray, W: np.ndarray,
                         chunk_target: int = 8_000_000) -> None:
        """M[touch, touch] += S (W (x) W) S^T for this block."""
        m_t = len(self.touch)
        if m_t == 0:
            return
        n = self.n
        chunk = max(1, min(m_t, chunk_target // max(1, n * n)))
        ii, jj, scale = self.idx
        for start in range(0, m_t, chunk):
            stop = min(start + chunk, m_t)
            sel = (self.coo_row >= start) & (self.coo_row < stop)
            rows = self.coo_row[sel] - start
            U = np.zeros((stop - start, n, n))
            np.add.at(U, (rows, self.coo_i[sel], self.coo_j[sel]), self.coo_mat[sel])
            off = self.coo_i[sel] != self.coo_j[sel]
            np.add.at(U, (rows[off], self.coo_j[sel][off], self.coo_i[sel][off]),
                      self.coo_mat[sel][off])
            V = np.einsum("pq,bqr,rs->bps", W, U, W, optimize=True)
            sv = V[:, ii, jj] * scale[None, :]
            contrib = self.svec_csr @ sv.T  # (m_t, chunk)
            M[np.ix_(self.touch_arr, self.touch_arr[start:stop])] += contrib


@dataclass
class _IpmResult:
    status: str  # "optimal" | "infeasible" | "failure"
    x: np.ndarray | None = None
    y: np.ndarray | None = None
    z: np.ndarray | None = None
    tau: float = 1.0
    iterations: int = 0
    message: str = ""


def _nt_scaling(X: np.ndarray, Z: np.ndarray):
    """NT scaling point: returns (R, Rinv, W, lam) with
    R^-1 X R^-T = R^T Z R = diag(lam) and W = R R^T."""
    def factor(Mt):
        try:
            return np.linalg.cholesky(Mt)
        except np.linalg.LinAlgError:
            w, Q = np.linalg.eigh(Mt)
            w = np.maximum(w, max(w.max(), 1.0) * 1e-14)
            return Q * np.sqrt(w)[None, :]

    Lx = factor(X)
    Lz = factor(Z)
    U, sig, Vt = np.linalg.svd(Lz.T @ Lx)
    sig = np.maximum(sig, 1e-150)
    inv_sqrt = 1.0 / np.sqrt(sig)
    R = Lx @ (Vt.T * inv_sqrt[None, :])
    Rinv = (Lz @ (U * inv_sqrt[None, :])).T
    W = R @ R.T
    return R, Rinv, W, sig


def _max_step(lam: np.ndarray, dscaled: np.ndarray) -> float:
    """Largest alpha with diag(lam) + alpha*dscaled psd (inf if unbounded)."""
    denom = np.sqrt(np.outer(lam, lam))
    T = (dscaled + dscaled.T) / (2.0 * denom)
    emin = np.linalg.eigvalsh(T)[0]
    if emin >= -1e-16:
        return math.inf
    return 1.0 / (-emin)


def _ipm_solve(rows: list, rhs: np.ndarray, psd_sizes: list,
               gid_block: np.ndarray, gid_i: np.ndarray, gid_j: np.ndarray,
               psd_block_of: list, opts: SolveOptions) -> _IpmResult:
    m = len(rows)
    nb = len(psd_sizes)
    col_offset = np.concatenate([[0], np.cumsum([n * (n + 1) // 2 for n in psd_sizes])])
    ns = int(col_offset[-1])
    block_index = {bk: k for k, bk in enumerate(psd_block_of)}
    idx_cache = [svec_indices(n) for n in psd_sizes]

    blocks = [_BlockData(n, int(col_offset[k])) for k, n in enumerate(psd_sizes)]
    a_rows, a_cols, a_vals = [], [], []
    for r, row in enumerate(rows):
        for g, cval in sorted(row.items()):
            bk = block_index[gid_block[g]]
            i, j = int(gid_i[g]), int(gid_j[g])
            blocks[bk].add(r, i, j, cval)
            a_rows.append(r)
            a_cols.append(int(col_offset[bk]) + tri_index(i, j))
            a_vals.append(cval if i == j else cval / SQRT2)
    for blk in blocks:
        blk.finalize()
    A = scipy.sparse.csr_matrix((a_vals, (a_rows, a_cols)), shape=(m, ns))
    At = A.T.tocsr()

    c = np.zeros(ns)
    for k, n in enumerate(psd_sizes):
        ii, jj, _ = idx_cache[k]
        base = int(col_offset[k])
        for s in range(len(ii)):
            if ii[s] == jj[s]:
                c[base + s] = 1.0

    def blk_slice(k):
        return slice(int(col_offset[k]), int(col_offset[k + 1]))

    def unsvec_block(v, k):
        return unsvec(v[blk_slice(k)], psd_sizes[k], idx_cache[k])

    x = c.copy()
    z = c.copy()
    y = np.zeros(m)
    tau, kappa = 1.0, 1.0
    nu = sum(psd_sizes) + 1.0
    bscale = np.maximum(1.0, np.abs(rhs)) if m else np.ones(0)

    it = 0
    for it in range(1, opts.max_iters + 1):
        f1 = A @ x - rhs * tau
        f2 = -(At @ y) + c * tau - z
        f3 = float(rhs @ y - c @ x - kappa)
        mu = (float(x @ z) + tau * kappa) / nu

        # per-row scaled residuals (rows carry unit norm after preprocessing),
        # targeted at half tolerance so the lifted solution verifies cleanly
        pres = float((np.abs(A @ (x / tau) - rhs) / bscale).max()) if m else 0.0
        dres = float(np.abs(At @ (y / tau) + z / tau - c).max())
        cx = float(c @ x) / tau
        by = float(rhs @ y) / tau
        relgap = (float(x @ z) / tau ** 2) / (1.0 + abs(cx) + abs(by))
        if pres <= 0.5 * opts.feas_tol and dres <= 0.5 * opts.feas_tol \
                and relgap <= opts.gap_tol:
            return _IpmResult("optimal", x=x, y=y, z=z, tau=tau, iterations=it)

        bty = float(rhs @ y)
        if bty > 1e-300:
            infres = float(np.abs(At @ (y / bty) + z / bty).max())
            if infres <= 0.25 * opts.feas_tol:
                return _IpmResult("infeasible", x=x, y=y / bty, z=z / bty,
                                  tau=tau, iterations=it,
                                  message="dual improving ray found")

        # NT scalings
        scal = []
        ok = True
        for k in range(nb):
            X = unsvec_block(x, k)
            Z = unsvec_block(z, k)
            try:
                scal.append(_nt_scaling(X, Z))
            except np.linalg.LinAlgError:
                ok = False
                break
        if not ok:
            return _IpmResult("failure", iterations=it,
                              message="NT scaling breakdown (iterate left the cone)")

        # Schur complement
        M = np.zeros((m, m))
        for k, blk in enumerate(blocks):
            blk.schur_accumulate(M, scal[k][2])

        diag_mean = float(np.trace(M)) / max(m, 1)
        ridge = 0.0
        chol = None
        for attempt in range(6):
            try:
                chol = scipy.linalg.cho_factor(
                    M + (ridge * np.eye(m) if ridge else 0.0), lower=True)
                break
            except scipy.linalg.LinAlgError:
                ridge = max(diag_mean, 1.0) * (1e-13 * 10 ** (2 * attempt))
        if chol is None:
            return _IpmResult("failure", iterations=it,
                              message="Schur complement not factorizable")

        def msolve(v):
            return scipy.linalg.cho_solve(chol, v)

        def wop(v):
            out = np.empty_like(v)
            for k in range(nb):
                W = scal[k][2]
                ii, jj, scale = idx_cache[k]
                V = W @ unsvec_block(v, k) @ W
                out[blk_slice(k)] = V[ii, jj] * scale
            return out

        wc = wop(c)
        q = A @ wc + rhs
        mq = msolve(q)
        cwc = float(c @ wc)
        two_b_minus_q = 2.0 * rhs - q

        def direction(eta, dmats, dtk):
            zh = np.empty(ns)
            for k in range(nb):
                R, Rinv, _, _ = scal[k]
                ii, jj, scale = idx_cache[k]
                V = Rinv.T @ dmats[k] @ Rinv
                V = (V + V.T) / 2.0
                zh[blk_slice(k)] = V[ii, jj] * scale
            rhat = zh - eta * f2
            wr = wop(rhat)
            u = -(A @ wr) - eta * f1
            mu_vec = msolve(u)
            denom = float(two_b_minus_q @ mq) + cwc + kappa / tau
            numer = (-eta * f3 + float(c @ wr) + dtk / tau
                     - float(two_b_minus_q @ mu_vec))
            if abs(denom) < 1e-300:
                raise FloatingPointError("singular dtau equation")
            dtau = numer / denom
            dy = dtau * mq + mu_vec
            dx = wop(At @ dy - c * dtau + rhat)
            dz = -(At @ dy) + c * dtau + eta * f2
            dkappa = (dtk - kappa * dtau) / tau
            return dx, dy, dz, dtau, dkappa

        def boundary(dx, dz, dtau, dkappa):
            alpha = math.inf
            scaled = []
            for k in range(nb):
                R, Rinv, _, lam = scal[k]
                dXs = Rinv @ unsvec_block(dx, k) @ Rinv.T
                dZs = R.T @ unsvec_block(dz, k) @ R
                scaled.append((dXs, dZs))
                alpha = min(alpha, _max_step(lam, dXs), _max_step(lam, dZs))
            if dtau < 0:
                alpha = min(alpha, -tau / dtau)
            if dkappa < 0:
                alpha = min(alpha, -kappa / dkappa)
            return alpha, scaled

        try:
            aff = direction(1.0, [np.diag(-lam) for (_, _, _, lam) in scal], -tau * kappa)
        except FloatingPointError as exc:
            return _IpmResult("failure", iterations=it, message=str(exc))
        alpha_aff, scaled_aff = boundary(*_dirs_for_boundary(aff))
        alpha_aff = min(1.0, alpha_aff)
        dxa, dya, dza, dta, dka = aff
        mu_aff = (float((x + alpha_aff * dxa) @ (z + alpha_aff * dza))
                  + (tau + alpha_aff * dta) * (kappa + alpha_aff * dka)) / nu
        sigma = min(1.0, max(0.0, (max(mu_aff, 0.0) / mu) ** 3))

        dmats = []
        for k in range(nb):
            lam = scal[k][3]
            dXs, dZs = scaled_aff[k]
            corr = (dXs @ dZs + dZs @ dXs) / 2.0
            omega = sigma * mu * np.eye(psd_sizes[k]) - np.diag(lam ** 2) - corr
            dmats.append(2.0 * omega / (lam[:, None] + lam[None, :]))
        dtk = sigma * mu - tau * kappa - dta * dka
        try:
            comb = direction(1.0 - sigma, dmats, dtk)
        except FloatingPointError as exc:
            return _IpmResult("failure", iterations=it, message=str(exc))
        alpha_max, _ = boundary(*_dirs_for_boundary(comb))
        alpha = min(1.0, opts.step_fraction * alpha_max)
        if not math.isfinite(alpha) or alpha <= 1e-10:
            return _IpmResult("failure", iterations=it,
                              message=f"step length collapsed (alpha={alpha:.2e})")
        dx, dy, dz, dtau, dkappa = comb
        x = x + alpha * dx
        y = y + alpha * dy
        z = z + alpha * dz
        tau += alpha * dtau
        kappa += alpha * dkappa
        if not (math.isfinite(tau) and math.isfinite(kappa)) or tau <= 0 or kappa <= 0:
            return _IpmResult("failure", iterations=it, message="embedding variables left the cone")
        if not np.all(np.isfinite(x)) or not np.all(np.isfinite(z)):
            return _IpmResult("failure", iterations=it, message="non-finite iterate")

    return _IpmResult("failure", iterations=it,
                      message=f"no decision within {opts.max_iters} iterations")


def _dirs_for_boundary(dirs):
    dx, dy, dz, dtau, dkappa = dirs
    return dx, dz, dtau, dkappa


# ---------------------------------------------------------------------------
# solution lifting and verification
# ---------------------------------------------------------------------------

def _recover_blocks(problem: SdpProblem, pre: _Preprocessed,
                    psd_values: list) -> list:
    """Assemble full block values: psd blocks from the solver, free blocks
    by back-substitution through the recorded elimination pivots."""
    values: list[np.ndarray | None] = [None] * len(problem.blocks)
    for k, bk in enumerate(pre.psd_block_of):
        values[bk] = psd_values[k]
    for bk, b in enumerate(problem.blocks):
        if values[bk] is None:
            values[bk] = np.zeros((b.size, b.size))

    def entry_value(g: int) -> float:
        bk = int(pre.gid_block[g])
        return float(values[bk][int(pre.gid_i[g]), int(pre.gid_j[g])])

    for (col, row, rv) in reversed(pre.pivots):
        acc = rv
        for g, cval in row.items():
            if g != col:
                acc -= cval * entry_value(g)
        val = acc / row[col]
        bk = int(pre.gid_block[col])
        i, j = int(pre.gid_i[col]), int(pre.gid_j[col])
        values[bk][i, j] = val
        values[bk][j, i] = val
    return values


def _constraint_residuals(problem: SdpProblem, values: list) -> np.ndarray:
    out = np.zeros(len(problem.constraints))
    for ci, con in enumerate(problem.constraints):
        acc = -con.rhs
        norm2 = 0.0
        for (bk, i, j, cval) in con.entries:
            acc += cval * float(values[bk][i, j])
            norm2 += cval * cval
        out[ci] = acc / max(1.0, math.sqrt(norm2))
    return out


def verify_solution(problem: SdpProblem, values: list) -> tuple[float, float]:
    """Independent re-check: (max scaled equality violation, min psd eig)."""
    resid = _constraint_residuals(problem, values)
    max_viol = float(np.abs(resid).max()) if resid.size else 0.0
    min_eig = math.inf
    for bk, b in enumerate(problem.blocks):
        if b.kind == "psd":
            ev = float(np.linalg.eigvalsh(values[bk])[0]) if b.size else 0.0
            min_eig = min(min_eig, ev)
    if min_eig is math.inf:
        min_eig = 0.0
    return max_viol, min_eig


def _ray_quality(problem: SdpProblem, ray: np.ndarray) -> tuple[float, float, float]:
    """(ray.b, min eig of aggregate slack, max |free-block aggregate|)."""
    agg = [np.zeros((b.size, b.size)) for b in problem.blocks]
    for ci, con in enumerate(problem.constraints):
        w = ray[ci]
        if w == 0.0:
            continue
        for (bk, i, j, cval) in con.entries:
            agg[bk][i, j] += w * cval
    rayb = float(sum(ray[ci] * con.rhs for ci, con in enumerate(problem.constraints)))
    min_eig = math.inf
    free_max = 0.0
    for bk, b in enumerate(problem.blocks):
        mat = agg[bk]
        # entry coefficients live on the upper triangle; the matching
        # symmetric matrix splits each off-diagonal coefficient in half
        full = np.triu(mat, 1) / 2.0
        full = full + full.T + np.diag(np.diag(mat))
        if b.kind == "psd":
            min_eig = min(min_eig, float(np.linalg.eigvalsh(full)[0]))
        else:
            free_max = max(free_max, float(np.abs(full).max()))
    if min_eig is math.inf:
        min_eig = 0.0
    return rayb, min_eig, free_max


def solve(problem: SdpProblem, options: SolveOptions | None = None) -> SdpSolution:
    """Solve a semidefinite feasibility problem.

    Returns status "feasible" with verified block values, "infeasible"
    with a dual improving ray, or "numerical-failure" with a reason.
    The run is deterministic: identical problems and options give
    identical iteration counts and solutions.
    """
    opts = options or SolveOptions()
    pre = _preprocess(problem, opts)

    if pre.verdict == "infeasible":
        rayb, min_eig, _ = _ray_quality(problem, pre.verdict_ray)
        return SdpSolution(status="infeasible", ray=pre.verdict_ray,
                           ray_objective=rayb, ray_slack_min_eigenvalue=min_eig,
                           iterations=0, message=pre.verdict_message)

    if not pre.rows:
        psd_values = [np.zeros((n, n)) for n in pre.psd_sizes]
        values = _recover_blocks(problem, pre, psd_values)
        max_viol, min_eig = verify_solution(problem, values)
        if max_viol <= opts.feas_tol and min_eig >= -opts.feas_tol:
            return SdpSolution(status="feasible", block_values=values,
                               max_equality_violation=max_viol,
                               min_psd_eigenvalue=min_eig, iterations=0)
        return SdpSolution(status="numerical-failure",
                           max_equality_violation=max_viol,
                           min_psd_eigenvalue=min_eig, iterations=0,
                           message="trivial reduction failed verification")

    res = _ipm_solve(pre.rows, pre.rhs, pre.psd_sizes, pre.gid_block,
                     pre.gid_i, pre.gid_j, pre.psd_block_of, opts)

    if res.status == "optimal":
        col_offset = np.concatenate(
            [[0], np.cumsum([n * (n + 1) // 2 for n in pre.psd_sizes])])
        psd_values = []
        for k, n in enumerate(pre.psd_sizes):
            v = res.x[int(col_offset[k]):int(col_offset[k + 1])] / res.tau
            psd_values.append(unsvec(v, n))
        values = _recover_blocks(problem, pre, psd_values)
        max_viol, min_eig = verify_solution(problem, values)
        if max_viol <= opts.feas_tol and min_eig >= -opts.feas_tol:
            return SdpSolution(status="feasible", block_values=values,
                               max_equality_violation=max_viol,
                               min_psd_eigenvalue=min_eig,
                               iterations=res.iterations)
        return SdpSolution(status="numerical-failure", block_values=values,
                           max_equality_violation=max_viol,
                           min_psd_eigenvalue=min_eig, iterations=res.iterations,
                           message="solver claimed feasibility but verification failed")

    if res.status == "infeasible":
        # reduced-space ray -> original constraints (pivot rows carry zero)
        y_orig = np.zeros(len(problem.constraints))
        for w, combo in zip(res.y, pre.combos):
            if w == 0.0:
                continue
            for o, ww in combo.items():
                y_orig[o] += w * ww
        y_orig = -y_orig  # flip so ray.b < 0 with psd aggregate slack
        rayb, min_eig, free_max = _ray_quality(problem, y_orig)
        scale = max(-rayb, 1e-300)
        y_orig = y_orig / scale
        rayb, min_eig, free_max = _ray_quality(problem, y_orig)
        if rayb < 0 and min_eig >= -opts.feas_tol and free_max <= 1e-6:
            return SdpSolution(status="infeasible", ray=y_orig,
                               ray_objective=rayb,
                               ray_slack_min_eigenvalue=min_eig,
                               iterations=res.iterations, message=res.message)
        return SdpSolution(status="numerical-failure", iterations=res.iterations,
                           message="infeasibility ray failed verification")

    return SdpSolution(status="numerical-failure", iterations=res.iterations,
                       message=res.message)
