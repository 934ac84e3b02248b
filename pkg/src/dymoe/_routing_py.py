"""Numpy implementation of the per-token routing kernel.

Mirrors ``_routing.pyx`` exactly; used when the compiled extension is absent
or ``DYMOE_PURE_PYTHON=1``.
"""

import numpy as np

FIRST_TASK, NEW, OLD, AMBIGUOUS = 0, 1, 2, 3
BOTH, OLD_ONLY, NEW_ONLY = 0, 1, 2


def topk_mask(scores, allowed, k):
    """Boolean mask of the top-``k`` allowed entries per row, ties to lowest index."""
    n, e = scores.shape
    masked = np.where(allowed, scores, -np.inf)
    # stable sort on the negation keeps equal values in index order
    order = np.argsort(-masked, axis=1, kind="stable")[:, :k]
    sel = np.zeros((n, e), dtype=bool)
    rows = np.arange(n)[:, None]
    sel[rows, order] = True
    return sel & allowed


def route_kernel(logits, n_old, k, tau, eps, policy):
    """Group confidences, token types, and top-K selections for a batch of tokens.

    Args:
        logits: (N, E) router logits; columns ``[0, n_old)`` form the old group.
        n_old: size of the old group (0 on the first task).
        k: top-K budget, clipped per row to the number of allowed experts.
        tau: ambiguity threshold on the relative confidence gap.
        eps: denominator stabilizer for the relative gap.
        policy: length-4 int array mapping token type to BOTH / OLD_ONLY / NEW_ONLY.

    Returns:
        (c_old, c_new, d_rel, types, sel, sel_raw); ``sel`` honours the policy,
        ``sel_raw`` is the plain top-K over all experts.
    """
    logits = np.ascontiguousarray(logits, dtype=np.float64)
    n, e = logits.shape
    if not np.isfinite(logits).all():
        raise FloatingPointError("non-finite router logits")
    everything = np.ones((n, e), dtype=bool)
    sel_raw = topk_mask(logits, everything, k)
    if n_old == 0 or n_old == e:
        zeros = np.zeros(n)
        types = np.zeros(n, dtype=np.int8)
        return zeros, zeros.copy(), zeros.copy(), types, sel_raw.copy(), sel_raw
    c_old = logits[:, :n_old].max(axis=1)
    c_new = logits[:, n_old:].max(axis=1)
    d_rel = np.abs(c_new - c_old) / (np.maximum(np.abs(c_new), np.abs(c_old)) + eps)
    types = np.where(d_rel <= tau, AMBIGUOUS, np.where(c_new > c_old, NEW, OLD)).astype(np.int8)
    pol = np.asarray(policy, dtype=np.int8)[types]
    is_old_col = np.arange(e) < n_old
    allowed = np.where(
        (pol == BOTH)[:, None],
        True,
        np.where((pol == OLD_ONLY)[:, None], is_old_col[None, :], ~is_old_col[None, :]),
    )
    sel = topk_mask(logits, allowed, k)
    return c_old, c_new, d_rel, types, sel, sel_raw
