"""Loop-heavy numeric kernels used by inference and evaluation.

Every kernel has two implementations with identical results:

* a numba ``@njit`` version (scalar loops, compiled on first call and cached
  on disk), and
* a pure numpy / Python fallback.

The numba path is used when numba imports cleanly and the environment
variable ``ONFATTN_DISABLE_NUMBA`` is unset (or ``0``/``false``). Both paths
stay importable so tests and ``benchmarks/bench_kernels.py`` can compare
them directly through :data:`NUMBA_KERNELS` and :data:`NUMPY_KERNELS`.
"""

from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np

try:
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    _HAVE_NUMBA = False


def _flag_disabled() -> bool:
    return os.environ.get("ONFATTN_DISABLE_NUMBA", "").strip().lower() not in ("", "0", "false", "no")


USE_NUMBA = _HAVE_NUMBA and not _flag_disabled()


# ---------------------------------------------------------------------------
# note decoding (rule-based inference)
# ---------------------------------------------------------------------------


def _decode_notes_numpy(onsets, frames, min_frames, emit_orphans):
    T, P = frames.shape
    if T == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, empty
    on = onsets.astype(bool)
    fr = frames.astype(bool)
    prev = np.zeros((1, P), dtype=bool)
    edges = on & ~np.vstack([prev, on[:-1]])

    t_idx = np.arange(T, dtype=np.int64)[:, None]
    # first inactive frame at or after t
    zero_at = np.where(~fr, t_idx, T)
    next_zero = np.minimum.accumulate(zero_at[::-1], axis=0)[::-1]
    # first onset edge strictly after t
    edge_at = np.where(edges, t_idx, T)
    next_edge = np.minimum.accumulate(edge_at[::-1], axis=0)[::-1]
    next_edge_after = np.vstack([next_edge[1:], np.full((1, P), T, dtype=np.int64)])

    # column-major scan order: pitch, then time
    p, t = np.nonzero(edges.T)
    t = t.astype(np.int64)
    p = p.astype(np.int64)
    end = np.minimum(next_zero[t, p], next_edge_after[t, p])
    # an onset on an inactive frame has end == t
    short = (end - t) < min_frames
    if emit_orphans:
        end = np.where(short, np.minimum(t + min_frames, T), end)
        keep = np.ones_like(short)
    else:
        keep = ~short
    return p[keep], t[keep], end[keep]


def _decode_notes_loop(onsets, frames, min_frames, emit_orphans):
    T, P = frames.shape
    cap = (T + 1) // 2 * P + 1
    out_p = np.empty(cap, dtype=np.int64)
    out_s = np.empty(cap, dtype=np.int64)
    out_e = np.empty(cap, dtype=np.int64)
    n = 0
    for p in range(P):
        t = 0
        while t < T:
            is_edge = onsets[t, p] != 0 and (t == 0 or onsets[t - 1, p] == 0)
            if not is_edge:
                t += 1
                continue
            start = t
            end = start
            while end < T and frames[end, p] != 0:
                if end > start and onsets[end, p] != 0 and onsets[end - 1, p] == 0:
                    break
                end += 1
            t = end if end > start else start + 1
            if end - start < min_frames:
                if not emit_orphans:
                    continue
                end = start + min_frames
                if end > T:
                    end = T
            out_p[n] = p
            out_s[n] = start
            out_e[n] = end
            n += 1
    return out_p[:n], out_s[:n], out_e[:n]


# ---------------------------------------------------------------------------
# run extraction (frame roll -> notes without onsets)
# ---------------------------------------------------------------------------


def _roll_runs_numpy(roll):
    T, P = roll.shape
    r = roll.astype(np.int8)
    padded = np.zeros((T + 2, P), dtype=np.int8)
    padded[1:-1] = r
    d = np.diff(padded, axis=0)
    ps, starts = np.nonzero(d.T == 1)
    _, ends = np.nonzero(d.T == -1)
    return ps.astype(np.int64), starts.astype(np.int64), ends.astype(np.int64)


def _roll_runs_loop(roll):
    T, P = roll.shape
    cap = (T + 1) // 2 * P + 1
    out_p = np.empty(cap, dtype=np.int64)
    out_s = np.empty(cap, dtype=np.int64)
    out_e = np.empty(cap, dtype=np.int64)
    n = 0
    for p in range(P):
        t = 0
        while t < T:
            if roll[t, p] == 0:
                t += 1
                continue
            s = t
            while t < T and roll[t, p] != 0:
                t += 1
            out_p[n] = p
            out_s[n] = s
            out_e[n] = t
            n += 1
    return out_p[:n], out_s[:n], out_e[:n]


# ---------------------------------------------------------------------------
# maximum bipartite matching (Kuhn augmenting paths on a CSR graph)
# ---------------------------------------------------------------------------


def _bipartite_match_loop(indptr, indices, n_right):
    n_left = indptr.shape[0] - 1
    match_left = np.full(n_left, -1, dtype=np.int64)
    match_right = np.full(n_right, -1, dtype=np.int64)
    stack_node = np.empty(n_left + 1, dtype=np.int64)
    stack_ptr = np.empty(n_left + 1, dtype=np.int64)
    via = np.empty(n_left + 1, dtype=np.int64)
    visited = np.zeros(n_right, dtype=np.bool_)
    for root in range(n_left):
        if indptr[root] == indptr[root + 1]:
            continue
        visited[:] = False
        stack_node[0] = root
        stack_ptr[0] = indptr[root]
        depth = 1
        while depth > 0:
            u = stack_node[depth - 1]
            ptr = stack_ptr[depth - 1]
            if ptr == indptr[u + 1]:
                depth -= 1
                continue
            stack_ptr[depth - 1] = ptr + 1
            v = indices[ptr]
            if visited[v]:
                continue
            visited[v] = True
            via[depth - 1] = v
            w = match_right[v]
            if w == -1:
                for k in range(depth):
                    match_left[stack_node[k]] = via[k]
                    match_right[via[k]] = stack_node[k]
                break
            stack_node[depth] = w
            stack_ptr[depth] = indptr[w]
            depth += 1
    return match_left


# ---------------------------------------------------------------------------
# exact null distribution of the signed-rank statistic
# ---------------------------------------------------------------------------


def _signed_rank_counts_numpy(doubled_ranks):
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    reach = 0
    for r in doubled_ranks:
        r = int(r)
        # every subset either includes this rank (shift by r) or not
        counts[r : reach + r + 1] += counts[: reach + 1].copy()
        reach += r
    return counts


def _signed_rank_counts_loop(doubled_ranks):
    total = 0
    for r in doubled_ranks:
        total += r
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    reach = 0
    for r in doubled_ranks:
        for s in range(reach, -1, -1):
            counts[s + r] += counts[s]
        reach += r
    return counts


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

NUMPY_KERNELS = SimpleNamespace(
    decode_notes=_decode_notes_numpy,
    roll_runs=_roll_runs_numpy,
    bipartite_match=_bipartite_match_loop,
    signed_rank_counts=_signed_rank_counts_numpy,
)

if _HAVE_NUMBA:
    _njit = numba.njit(cache=True, nogil=True)
    NUMBA_KERNELS = SimpleNamespace(
        decode_notes=_njit(_decode_notes_loop),
        roll_runs=_njit(_roll_runs_loop),
        bipartite_match=_njit(_bipartite_match_loop),
        signed_rank_counts=_njit(_signed_rank_counts_loop),
    )
else:  # pragma: no cover
    NUMBA_KERNELS = NUMPY_KERNELS


def active() -> SimpleNamespace:
    """Return the kernel namespace selected by the environment flag."""
    return NUMBA_KERNELS if USE_NUMBA else NUMPY_KERNELS


def decode_notes(onsets: np.ndarray, frames: np.ndarray, min_frames: int = 1, emit_orphans: bool = True):
    """Rule-based note decoding on binary rolls.

    Returns ``(pitch_index, start_frame, end_frame)`` arrays sorted by pitch
    then start; ``end_frame`` is exclusive.
    """
    on = np.ascontiguousarray(onsets, dtype=np.uint8)
    fr = np.ascontiguousarray(frames, dtype=np.uint8)
    return active().decode_notes(on, fr, int(min_frames), bool(emit_orphans))


def roll_runs(roll: np.ndarray):
    """Maximal runs of ones per pitch as ``(pitch_index, start, end)``."""
    return active().roll_runs(np.ascontiguousarray(roll, dtype=np.uint8))


def bipartite_match(indptr: np.ndarray, indices: np.ndarray, n_right: int) -> np.ndarray:
    """Maximum-cardinality matching. ``match[i]`` is the right node of left node ``i`` or -1."""
    return active().bipartite_match(
        np.ascontiguousarray(indptr, dtype=np.int64),
        np.ascontiguousarray(indices, dtype=np.int64),
        int(n_right),
    )


def signed_rank_counts(doubled_ranks: np.ndarray) -> np.ndarray:
    """Number of sign assignments giving each value of twice the positive rank sum."""
    return active().signed_rank_counts(np.ascontiguousarray(doubled_ranks, dtype=np.int64))
