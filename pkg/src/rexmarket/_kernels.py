"""Inner loops shared by the matchers and the evaluation code.

Every function here takes and returns plain numpy arrays / scalars so it can be
compiled by numba. With numba disabled they run as ordinary Python.
"""
import math

import numpy as np

from ._accel import njit

# select modes understood by ``assign_round``
NO_FILTER = 0
ON_TIME = 1


@njit
def assign_round(order, tokens, deadline, need, bound, bound_credit, skip,
                 s_id, s_perf, s_credit, primary, fallback, filter_mode,
                 partial, credit_floor, max_perf, now):
    """Greedy per-query seller assignment for one matching round.

    ``order`` is the query processing order; ``primary`` / ``fallback`` are
    candidate orders over the idle-seller arrays. Returns an ``(n, 2)`` array of
    indices into the seller arrays, -1 for an empty slot.
    """
    n = order.shape[0]
    m = s_id.shape[0]
    used = np.zeros(m, dtype=np.bool_)
    picks = np.full((n, 2), -1, dtype=np.int64)
    free = m
    for oi in range(n):
        if free == 0:
            break
        i = order[oi]
        if skip[i]:
            continue
        k = need[i]
        cand = primary
        check = filter_mode == ON_TIME
        if check and now + math.ceil(tokens[i] / max_perf) > deadline[i]:
            # nobody in the market can make the deadline any more
            cand = fallback
            check = False
        got = 0
        first = -1
        second = -1
        for jj in range(m):
            j = cand[jj]
            if used[j] or s_id[j] == bound[i]:
                continue
            if check and now + math.ceil(tokens[i] / s_perf[j]) > deadline[i]:
                continue
            if k == 1:
                if bound_credit[i] + s_credit[j] < credit_floor:
                    continue
            elif got == 1:
                if s_credit[first] + s_credit[j] < credit_floor:
                    continue
            if got == 0:
                first = j
            else:
                second = j
            got += 1
            if got == k:
                break
        if got == k or (partial and got >= 1):
            picks[i, 0] = first
            used[first] = True
            free -= 1
            if got == 2:
                picks[i, 1] = second
                used[second] = True
                free -= 1
    return picks


@njit
def emax(c1, stoch1, c2, stoch2, alpha):
    """E[max(c1 + X1, c2 + X2)] with X_i ~ Exp(alpha) when stoch_i, else 0."""
    if not stoch1 and not stoch2:
        return max(c1, c2)
    if stoch1 and stoch2:
        hi = max(c1, c2)
        lo = min(c1, c2)
        return hi + 1.0 / alpha + math.exp(-alpha * (hi - lo)) / (2.0 * alpha)
    if stoch1:
        det = c2
        sto = c1
    else:
        det = c1
        sto = c2
    d = det - sto
    if d >= 0.0:
        return det + math.exp(-alpha * d) / alpha
    return sto + 1.0 / alpha


@njit
def best_pair(cost, stoch, bound, order, alpha, limit):
    """Exact minimum of ``emax`` over unordered pairs drawn from ``order[:limit]``.

    ``order`` must sort candidates by ascending ``bound`` (a lower bound on any
    pair containing that candidate). Pairs are scanned as (j, i<j) and only a
    strict improvement replaces the incumbent, so ties go to the earliest pair.
    Returns (i, j, value); i = j = -1 when fewer than two candidates exist.
    """
    k = min(limit, order.shape[0])
    best = np.inf
    bi = -1
    bj = -1
    for jj in range(1, k):
        j = order[jj]
        if bound[j] >= best:
            break
        for ii in range(jj):
            i = order[ii]
            v = emax(cost[i], stoch[i], cost[j], stoch[j], alpha)
            if v < best:
                best = v
                bi = i
                bj = j
    return bi, bj, best


@njit
def corpus_loglik(flat_tokens, doc_ptr, theta, phi):
    """Sum over documents of log p(doc | theta, phi); -inf if any token has zero mass."""
    total = 0.0
    n_docs = doc_ptr.shape[0] - 1
    n_topics = phi.shape[0]
    for d in range(n_docs):
        for t in range(doc_ptr[d], doc_ptr[d + 1]):
            w = flat_tokens[t]
            p = 0.0
            for k in range(n_topics):
                p += phi[k, w] * theta[d, k]
            if p <= 0.0:
                return -np.inf
            total += math.log(p)
    return total


@njit
def _before(b1, id1, b2, id2):
    return b1 < b2 or (b1 == b2 and id1 < id2)


@njit
def plan_distributional(tokens, qorder, dev_id, perf, base0, stoch, alpha, limit):
    """Starts for one instant as rows (query index, seller index, seller index).

    Queries are visited in ``qorder``. Each claims the best pair among the
    ``limit`` unclaimed sellers with the smallest lower bound (ties by device
    id). Pairs whose sellers are both idle now start; the loop repeats on the
    rest with the started sellers' new busy times until nothing starts.
    """
    n = perf.shape[0]
    nq = qorder.shape[0]
    base = base0.astype(np.float64)
    inv_alpha = 1.0 / alpha
    remaining = qorder.copy()
    n_rem = nq
    out = np.empty((nq, 3), dtype=np.int64)
    n_out = 0
    cost = np.empty(n)
    bound = np.empty(n)
    claimed = np.zeros(n, dtype=np.bool_)
    cand = np.empty(max(limit, 1), dtype=np.int64)
    while n_rem > 0:
        claimed[:] = False
        n_started = 0
        for r in range(n_rem):
            qi = remaining[r]
            tok = tokens[qi]
            m = 0
            for d in range(n):
                if claimed[d]:
                    continue
                c = base[d] + math.ceil(tok / perf[d])
                b = c + inv_alpha if stoch[d] else c
                cost[d] = c
                bound[d] = b
                if m < limit:
                    pos = m
                    m += 1
                elif _before(b, dev_id[d], bound[cand[m - 1]], dev_id[cand[m - 1]]):
                    pos = m - 1
                else:
                    continue
                while pos > 0 and _before(b, dev_id[d], bound[cand[pos - 1]], dev_id[cand[pos - 1]]):
                    cand[pos] = cand[pos - 1]
                    pos -= 1
                cand[pos] = d
            i, j, v = best_pair(cost, stoch, bound, cand[:m], alpha, m)
            if i < 0:
                continue
            claimed[i] = True
            claimed[j] = True
            if base[i] == 0 and base[j] == 0 and not stoch[i] and not stoch[j]:
                out[n_out, 0] = qi
                out[n_out, 1] = i
                out[n_out, 2] = j
                n_out += 1
                n_started += 1
        if n_started == 0:
            break
        for k in range(n_out - n_started, n_out):
            qi = out[k, 0]
            for s in (out[k, 1], out[k, 2]):
                base[s] = math.ceil(tokens[qi] / perf[s])
        w = 0
        for r in range(n_rem):
            qi = remaining[r]
            hit = False
            for k in range(n_out - n_started, n_out):
                if out[k, 0] == qi:
                    hit = True
                    break
            if not hit:
                remaining[w] = qi
                w += 1
        n_rem = w
    return out[:n_out]
