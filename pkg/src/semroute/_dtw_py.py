"""Pure-Python AR-DTW kernels; same contract as the compiled ``_dtw`` module."""
from math import dist, inf


def _elem(E, ai, a0, a1, bi, b0, b1):
    if ai[a0:a1] == bi[b0:b1]:
        return 0.0
    best = 0.0
    for ra in ai[a0:a1]:
        for rb in bi[b0:b1]:
            if ra != rb:
                d = dist(E[ra], E[rb])
                if d > best:
                    best = d
    return best


def _as_lists(E, *arrs):
    rows = E.tolist() if hasattr(E, "tolist") else E
    return (rows,) + tuple(a.tolist() if hasattr(a, "tolist") else list(a) for a in arrs)


def element_distance(E, a_idx, b_idx):
    E, a_idx, b_idx = _as_lists(E, a_idx, b_idx)
    return _elem(E, a_idx, 0, len(a_idx), b_idx, 0, len(b_idx))


def ar_dtw_csr(E, s_idx, s_off, t_idx, t_off):
    E, s_idx, s_off, t_idx, t_off = _as_lists(E, s_idx, s_off, t_idx, t_off)
    n, m = len(s_off) - 1, len(t_off) - 1
    if n < 1 or m < 1:
        raise ValueError("empty path")
    prev = [inf] * m
    for i in range(n):
        cur = [0.0] * m
        for j in range(m):
            c = _elem(E, s_idx, s_off[i], s_off[i + 1], t_idx, t_off[j], t_off[j + 1])
            if i == 0 and j == 0:
                best = 0.0
            elif i == 0:
                best = cur[j - 1]
            elif j == 0:
                best = prev[0]
            else:
                best = min(prev[j], cur[j - 1], prev[j - 1])
            cur[j] = c + best
        prev = cur
    return prev[m - 1]


def path_span_csr(E, idx, off):
    E, idx, off = _as_lists(E, idx, off)
    return sum(
        _elem(E, idx, off[i], off[i + 1], idx, off[i + 1], off[i + 2])
        for i in range(len(off) - 2)
    )
