"""Numba kernels for soft/hard sum-of-trees backfitting.

Trees live in a fixed-capacity node pool per tree.  Node 0 is the root,
nodes ``0 .. nnodes[t] - 1`` are live, ``var == -1`` marks a leaf.  A right
child receives the gate ``psi((x - c) / b)``, a left child ``1 - psi``.
"""

import math

import numpy as np
from numba import njit

GROW = 0
PRUNE = 1
CHANGE = 2


@njit(cache=True)
def seed_numba(seed):
    np.random.seed(seed)


@njit(cache=True, fastmath=True, inline="always")
def expit(u):
    """Logistic function, branch-free so gate loops vectorize.

    exp(-|u|) is evaluated as a degree-8 Taylor polynomial at |u| / 1024
    raised to the 1024th power by repeated squaring; absolute error is
    below 1e-13 over the whole line.
    """
    a = min(abs(u), 40.0)
    y = -a * (1.0 / 1024.0)
    p = 1.0 + y * (1.0 + y * (0.5 + y * (1.0 / 6.0 + y * (1.0 / 24.0 + y * (
        1.0 / 120.0 + y * (1.0 / 720.0 + y * (1.0 / 5040.0 + y * (1.0 / 40320.0))))))))
    p = p * p
    p = p * p
    p = p * p
    p = p * p
    p = p * p
    p = p * p
    p = p * p
    p = p * p
    p = p * p
    p = p * p
    h = 1.0 / (1.0 + p)
    return h if u >= 0.0 else 1.0 - h


@njit(cache=True)
def split_prob(depth, eta, beta):
    return eta * (1.0 + depth) ** (-beta)


@njit(cache=True, fastmath=True)
def gate_vector(x, c, b, soft, out):
    n = x.shape[0]
    if soft:
        inv = 1.0 / b
        for i in range(n):
            out[i] = expit((x[i] - c) * inv)
    else:
        for i in range(n):
            out[i] = 1.0 if x[i] > c else 0.0


@njit(cache=True)
def leaves_of(var, left, right):
    """Leaf node ids in depth-first (left before right) order."""
    C = var.shape[0]
    stack = np.empty(C, np.int64)
    out = np.empty(C, np.int64)
    top = 0
    stack[0] = 0
    top = 1
    nl = 0
    while top > 0:
        top -= 1
        node = stack[top]
        if var[node] < 0:
            out[nl] = node
            nl += 1
        else:
            stack[top] = right[node]
            stack[top + 1] = left[node]
            top += 2
    return out[:nl]


@njit(cache=True)
def count_nog(var, left, right, nn):
    k = 0
    for j in range(nn):
        if var[j] >= 0 and var[left[j]] < 0 and var[right[j]] < 0:
            k += 1
    return k


@njit(cache=True)
def nth_nog(var, left, right, nn, which):
    k = 0
    for j in range(nn):
        if var[j] >= 0 and var[left[j]] < 0 and var[right[j]] < 0:
            if k == which:
                return j
            k += 1
    return -1


@njit(cache=True)
def nth_internal(var, nn, which):
    k = 0
    for j in range(nn):
        if var[j] >= 0:
            if k == which:
                return j
            k += 1
    return -1


@njit(cache=True)
def is_nog(var, left, right, node):
    return var[node] >= 0 and var[left[node]] < 0 and var[right[node]] < 0


@njit(cache=True, fastmath=True)
def leaf_weights(leaves, left, parent, gates, override_node, override_gate, out):
    """Fill ``out[l, :]`` with the path product of gates for each leaf."""
    n = out.shape[1]
    for li in range(leaves.shape[0]):
        row = out[li]
        for i in range(n):
            row[i] = 1.0
        node = leaves[li]
        while node != 0:
            p = parent[node]
            if p == override_node:
                g = override_gate
            else:
                g = gates[p]
            if node == left[p]:
                for i in range(n):
                    row[i] *= 1.0 - g[i]
            else:
                for i in range(n):
                    row[i] *= g[i]
            node = p


@njit(cache=True)
def _chol(A, L):
    """In-place lower Cholesky of the leading ``L x L`` block of A."""
    for j in range(L):
        s = A[j, j]
        for k in range(j):
            s -= A[j, k] * A[j, k]
        if s <= 0.0:
            s = 1e-300
        d = math.sqrt(s)
        A[j, j] = d
        for i in range(j + 1, L):
            s = A[i, j]
            for k in range(j):
                s -= A[i, k] * A[j, k]
            A[i, j] = s / d
        for i in range(j):
            A[i, j] = 0.0


@njit(cache=True, fastmath=True)
def _normal_eqs(phi, L, res, w, A, bvec):
    n = phi.shape[1]
    for a in range(L):
        pa = phi[a]
        s = 0.0
        for i in range(n):
            s += w[i] * pa[i] * res[i]
        bvec[a] = s
        for c in range(a + 1):
            pc = phi[c]
            s = 0.0
            for i in range(n):
                s += w[i] * pa[i] * pc[i]
            A[a, c] = s
            A[c, a] = s


@njit(cache=True)
def _posterior_factor(phi, L, res, w, sigma2, sigma_mu2, A, bvec, mean):
    """Factor the leaf posterior precision; returns log marginal likelihood.

    ``A`` holds the Cholesky factor of the precision and ``mean`` the
    posterior mean on exit.  Terms that do not depend on the tree are
    dropped.
    """
    _normal_eqs(phi, L, res, w, A, bvec)
    for a in range(L):
        for c in range(L):
            A[a, c] /= sigma2
        A[a, a] += 1.0 / sigma_mu2
        bvec[a] /= sigma2
    _chol(A, L)
    logdet = 0.0
    for a in range(L):
        logdet += 2.0 * math.log(A[a, a])
    # forward solve L y = b
    y = np.empty(L)
    for a in range(L):
        s = bvec[a]
        for k in range(a):
            s -= A[a, k] * y[k]
        y[a] = s / A[a, a]
    quad = 0.0
    for a in range(L):
        quad += y[a] * y[a]
    # back solve L^T mean = y
    for a in range(L - 1, -1, -1):
        s = y[a]
        for k in range(a + 1, L):
            s -= A[k, a] * mean[k]
        mean[a] = s / A[a, a]
    return -0.5 * (logdet + L * math.log(sigma_mu2)) + 0.5 * quad


@njit(cache=True)
def log_marginal(phi, L, res, w, sigma2, sigma_mu2, A, bvec, mean, prior_only):
    if prior_only:
        return 0.0
    return _posterior_factor(phi, L, res, w, sigma2, sigma_mu2, A, bvec, mean)


@njit(cache=True)
def choose_var(cum_w):
    u = np.random.random() * cum_w[cum_w.shape[0] - 1]
    for j in range(cum_w.shape[0]):
        if u < cum_w[j]:
            return j
    return cum_w.shape[0] - 1


@njit(cache=True)
def remove_node(var, cut, left, right, parent, depth, value, gates, nn, idx):
    """Delete node ``idx`` by moving the last live node into its slot."""
    last = nn - 1
    if idx != last:
        var[idx] = var[last]
        cut[idx] = cut[last]
        left[idx] = left[last]
        right[idx] = right[last]
        parent[idx] = parent[last]
        depth[idx] = depth[last]
        value[idx] = value[last]
        p = parent[last]
        if p >= 0:
            if left[p] == last:
                left[p] = idx
            else:
                right[p] = idx
        if var[last] >= 0:
            parent[left[last]] = idx
            parent[right[last]] = idx
            gates[idx, :] = gates[last, :]
    var[last] = -1
    left[last] = -1
    right[last] = -1
    parent[last] = -1
    return nn - 1


@njit(cache=True)
def sweep(
    X, grid, ngrid, cum_w, r, w, sigma2, sigma_mu2, eta, beta, p_grow, p_prune,
    soft, bw_mean, bw_step, prior_only,
    var, cut, left, right, parent, depth, value, nnodes, bw, gates, fits,
    accept_counts,
):
    """One backfitting pass over every tree; mutates state and ``r`` in place.

    ``r`` enters as the residual against the full ensemble fit and leaves
    the same way.  ``accept_counts`` accumulates [proposed, accepted] per
    move type in rows 0..2 and for the bandwidth in row 3.
    """
    m, C = var.shape
    n = X.shape[0]
    Lmax = (C + 1) // 2 + 1
    phi = np.empty((Lmax, n))
    phi2 = np.empty((Lmax, n))
    partial = np.empty(n)
    gnew = np.empty(n)
    gtmp = np.empty((C, n))
    A = np.empty((Lmax, Lmax))
    A2 = np.empty((Lmax, Lmax))
    bvec = np.empty(Lmax)
    mean = np.empty(Lmax)
    mean2 = np.empty(Lmax)
    mu = np.empty(Lmax)
    dummy = np.empty(1)

    for t in range(m):
        vt = var[t]
        lt = left[t]
        rt = right[t]
        pt = parent[t]
        dt = depth[t]
        gt = gates[t]
        ft = fits[t]
        add_into(r, ft, partial)

        leaves = leaves_of(vt, lt, rt)
        L = leaves.shape[0]
        leaf_weights(leaves, lt, pt, gt, -1, dummy, phi)
        cur = log_marginal(phi, L, partial, w, sigma2, sigma_mu2, A, bvec, mean, prior_only)
        nn = nnodes[t]
        n_int = nn - L

        if n_int == 0:
            move = GROW
            pg_cur = 1.0
        else:
            u = np.random.random()
            if u < p_grow:
                move = GROW
            elif u < p_grow + p_prune:
                move = PRUNE
            else:
                move = CHANGE
            pg_cur = p_grow

        if move == GROW:
            if nn + 2 <= C:
                accept_counts[0, 0] += 1
                li = np.random.randint(L)
                k = leaves[li]
                v = choose_var(cum_w)
                c = grid[v, np.random.randint(ngrid[v])]
                gate_vector(X[:, v], c, bw[t], soft, gnew)
                split_column(phi, L, li, gnew, phi2)
                new = log_marginal(phi2, L + 1, partial, w, sigma2, sigma_mu2, A2, bvec, mean2, prior_only)
                d = dt[k]
                ps = split_prob(d, eta, beta)
                ps1 = split_prob(d + 1, eta, beta)
                log_prior = math.log(ps) + 2.0 * math.log(1.0 - ps1) - math.log(1.0 - ps)
                nog_new = count_nog(vt, lt, rt, nn) + 1
                if k != 0 and is_nog(vt, lt, rt, pt[k]):
                    nog_new -= 1
                log_prop = math.log(p_prune / nog_new) - math.log(pg_cur / L)
                if math.log(np.random.random()) < new - cur + log_prior + log_prop:
                    accept_counts[0, 1] += 1
                    a_id = nn
                    b_id = nn + 1
                    vt[k] = v
                    cut[t, k] = c
                    lt[k] = a_id
                    rt[k] = b_id
                    for nid in (a_id, b_id):
                        vt[nid] = -1
                        lt[nid] = -1
                        rt[nid] = -1
                        pt[nid] = k
                        dt[nid] = d + 1
                        value[t, nid] = 0.0
                    gt[k, :] = gnew
                    nnodes[t] = nn + 2
                    nn += 2
                    n_int += 1
                    leaves2 = np.empty(L + 1, np.int64)
                    leaves2[:L] = leaves
                    leaves2[li] = a_id
                    leaves2[L] = b_id
                    leaves = leaves2
                    L += 1
                    phi, phi2 = phi2, phi
                    A, A2 = A2, A
                    mean, mean2 = mean2, mean
                    cur = new
        elif move == PRUNE:
            accept_counts[1, 0] += 1
            nog = count_nog(vt, lt, rt, nn)
            k = nth_nog(vt, lt, rt, nn, np.random.randint(nog))
            a_id = lt[k]
            b_id = rt[k]
            col = 0
            for li in range(L):
                node = leaves[li]
                if node == b_id:
                    continue
                if node == a_id:
                    for li2 in range(L):
                        if leaves[li2] == b_id:
                            add_into(phi[li], phi[li2], phi2[col])
                else:
                    phi2[col, :] = phi[li, :]
                col += 1
            new = log_marginal(phi2, L - 1, partial, w, sigma2, sigma_mu2, A2, bvec, mean2, prior_only)
            d = dt[k]
            ps = split_prob(d, eta, beta)
            ps1 = split_prob(d + 1, eta, beta)
            log_prior = -(math.log(ps) + 2.0 * math.log(1.0 - ps1) - math.log(1.0 - ps))
            pg_new = 1.0 if n_int == 1 else p_grow
            log_prop = math.log(pg_new / (L - 1)) - math.log(p_prune / nog)
            if math.log(np.random.random()) < new - cur + log_prior + log_prop:
                accept_counts[1, 1] += 1
                vt[k] = -1
                lt[k] = -1
                rt[k] = -1
                hi = max(a_id, b_id)
                lo = min(a_id, b_id)
                nn = remove_node(vt, cut[t], lt, rt, pt, dt, value[t], gt, nn, hi)
                nn = remove_node(vt, cut[t], lt, rt, pt, dt, value[t], gt, nn, lo)
                nnodes[t] = nn
                # node ids moved; rebuild leaf order and factor from scratch
                leaves = leaves_of(vt, lt, rt)
                L = leaves.shape[0]
                n_int = nn - L
                leaf_weights(leaves, lt, pt, gt, -1, dummy, phi)
                cur = log_marginal(phi, L, partial, w, sigma2, sigma_mu2, A, bvec, mean, prior_only)
        else:
            accept_counts[2, 0] += 1
            k = nth_internal(vt, nn, np.random.randint(n_int))
            v = choose_var(cum_w)
            c = grid[v, np.random.randint(ngrid[v])]
            gate_vector(X[:, v], c, bw[t], soft, gnew)
            leaf_weights(leaves, lt, pt, gt, k, gnew, phi2)
            new = log_marginal(phi2, L, partial, w, sigma2, sigma_mu2, A2, bvec, mean2, prior_only)
            if math.log(np.random.random()) < new - cur:
                accept_counts[2, 1] += 1
                vt[k] = v
                cut[t, k] = c
                gt[k, :] = gnew
                phi, phi2 = phi2, phi
                A, A2 = A2, A
                mean, mean2 = mean2, mean
                cur = new

        if soft and n_int > 0 and not prior_only:
            accept_counts[3, 0] += 1
            b_old = bw[t]
            b_new = b_old * math.exp(bw_step * np.random.standard_normal())
            for j in range(nn):
                if vt[j] >= 0:
                    gate_vector(X[:, vt[j]], cut[t, j], b_new, soft, gtmp[j])
            leaf_weights(leaves, lt, pt, gtmp, -1, dummy, phi2)
            new = log_marginal(phi2, L, partial, w, sigma2, sigma_mu2, A2, bvec, mean2, prior_only)
            log_ratio = new - cur - (b_new - b_old) / bw_mean + math.log(b_new / b_old)
            if math.log(np.random.random()) < log_ratio:
                accept_counts[3, 1] += 1
                bw[t] = b_new
                for j in range(nn):
                    if vt[j] >= 0:
                        gt[j, :] = gtmp[j, :]
                phi, phi2 = phi2, phi
                A, A2 = A2, A
                mean, mean2 = mean2, mean
                cur = new

        draw_from_factor(A, mean, L, sigma_mu2, prior_only, mu)
        for a in range(L):
            value[t, leaves[a]] = mu[a]
        combine(phi, mu, L, partial, ft, r)


@njit(cache=True, fastmath=True)
def add_into(a, b, out):
    for i in range(out.shape[0]):
        out[i] = a[i] + b[i]


@njit(cache=True, fastmath=True)
def split_column(phi, L, li, g, out):
    n = phi.shape[1]
    for a in range(L):
        if a == li:
            pa = phi[a]
            oa = out[a]
            oL = out[L]
            for i in range(n):
                oa[i] = pa[i] * (1.0 - g[i])
                oL[i] = pa[i] * g[i]
        else:
            out[a, :] = phi[a, :]


@njit(cache=True, fastmath=True)
def combine(phi, mu, L, partial, fit, r):
    n = phi.shape[1]
    for i in range(n):
        fit[i] = 0.0
    for a in range(L):
        pa = phi[a]
        ma = mu[a]
        for i in range(n):
            fit[i] += ma * pa[i]
    for i in range(n):
        r[i] = partial[i] - fit[i]


@njit(cache=True)
def draw_from_factor(A, mean, L, sigma_mu2, prior_only, out):
    """Leaf draw given the Cholesky factor of the posterior precision."""
    if prior_only:
        sd = math.sqrt(sigma_mu2)
        for a in range(L):
            out[a] = sd * np.random.standard_normal()
        return
    z = np.empty(L)
    for a in range(L):
        z[a] = np.random.standard_normal()
    for a in range(L - 1, -1, -1):
        s = z[a]
        for k in range(a + 1, L):
            s -= A[k, a] * out[k]
        out[a] = s / A[a, a]
    for a in range(L):
        out[a] += mean[a]


@njit(cache=True)
def predict_tree(X, var, cut, left, right, value, b, soft, out):
    """Add one tree's prediction at rows of X into ``out``."""
    n = X.shape[0]
    C = var.shape[0]
    stack_n = np.empty(C, np.int64)
    stack_w = np.empty(C)
    for i in range(n):
        top = 1
        stack_n[0] = 0
        stack_w[0] = 1.0
        s = 0.0
        while top > 0:
            top -= 1
            node = stack_n[top]
            wgt = stack_w[top]
            if var[node] < 0:
                s += wgt * value[node]
                continue
            x = X[i, var[node]]
            if soft:
                g = expit((x - cut[node]) / b)
            else:
                g = 1.0 if x > cut[node] else 0.0
            if g > 0.0:
                stack_n[top] = right[node]
                stack_w[top] = wgt * g
                top += 1
            if g < 1.0:
                stack_n[top] = left[node]
                stack_w[top] = wgt * (1.0 - g)
                top += 1
        out[i] += s


@njit(cache=True)
def predict_forest(X, var, cut, left, right, value, bw, soft, out):
    for t in range(var.shape[0]):
        predict_tree(X, var[t], cut[t], left[t], right[t], value[t], bw[t], soft, out)


@njit(cache=True)
def predict_packed(X, offsets, tree_ptr, var, cut, left, right, value, bw, soft, out):
    """Evaluate a stack of retained ensembles.

    ``offsets[d] .. offsets[d + 1]`` index the trees of draw ``d`` and
    ``tree_ptr[t] .. tree_ptr[t + 1]`` the nodes of tree ``t``.  Child
    pointers are local to their tree.  ``out`` has shape (draws, rows).
    """
    D = offsets.shape[0] - 1
    for d in range(D):
        for t in range(offsets[d], offsets[d + 1]):
            s0 = tree_ptr[t]
            s1 = tree_ptr[t + 1]
            predict_tree(X, var[s0:s1], cut[s0:s1], left[s0:s1], right[s0:s1],
                         value[s0:s1], bw[t], soft, out[d])
