"""Independent reference computations used only by the tests.

Everything here works with explicit n x n matrices, plain loops or
brute-force enumeration, and shares no code path with the package
beyond the null fit it is handed.
"""

from itertools import combinations

import numpy as np


def newton_glm(y, X, offset=None, family="binomial", iters=200):
    """Plain Newton-Raphson MLE for canonical-link binomial/poisson models."""
    n, p = X.shape
    offset = np.zeros(n) if offset is None else offset
    beta = np.zeros(p)
    for _ in range(iters):
        eta = offset + X @ beta
        if family == "binomial":
            mu = 1.0 / (1.0 + np.exp(-eta))
            v = mu * (1 - mu)
        else:
            mu = np.exp(eta)
            v = mu
        grad = X.T @ (y - mu)
        H = X.T @ (X * v[:, None])
        step = np.linalg.solve(H, grad)
        beta = beta + step
        if np.max(np.abs(step)) < 1e-14:
            break
    eta = offset + X @ beta
    mu = 1.0 / (1.0 + np.exp(-eta)) if family == "binomial" else np.exp(eta)
    v = mu * (1 - mu) if family == "binomial" else mu
    cov = np.linalg.inv(X.T @ (X * v[:, None]))
    if family == "binomial":
        ll = np.sum(y * np.log(mu) + (1 - y) * np.log(1 - mu))
    else:
        from scipy.special import gammaln
        ll = np.sum(y * np.log(mu) - mu - gammaln(y + 1))
    return beta, np.sqrt(np.diag(cov)), ll


def dense_parts(fit, x, z):
    """Explicit W^1/2, V^-1/2, I - P and the score row vector."""
    n = x.shape[0]
    Wh = np.diag(np.sqrt(fit.w_diag))
    Vmh = np.diag(1.0 / np.sqrt(fit.v_diag))
    Z = np.asarray(z, dtype=float).reshape(n, -1)
    W = np.diag(fit.w_diag)
    if Z.shape[1]:
        P = Wh @ Z @ np.linalg.inv(Z.T @ W @ Z) @ Z.T @ Wh
    else:
        P = np.zeros((n, n))
    IP = np.eye(n) - P
    row = x @ Wh @ IP @ Vmh
    return Wh, IP, row


def dense_nu(fit, x, z):
    _, _, row = dense_parts(fit, x, z)
    return row * (fit.y - fit.mu_hat)


def dense_flip_variance(fit, x, z, g):
    """n^-1 X'W^1/2 (I-P) G (I-P) G (I-P) W^1/2 X, literally."""
    Wh, IP, _ = dense_parts(fit, x, z)
    G = np.diag(np.asarray(g, dtype=float))
    n = x.shape[0]
    return float(x @ Wh @ IP @ G @ IP @ G @ IP @ Wh @ x) / n


def dense_identity_variance(fit, x, z):
    """n^-1 X'W^1/2 (I-P) W^1/2 X."""
    Wh, IP, _ = dense_parts(fit, x, z)
    return float(x @ Wh @ IP @ Wh @ x) / x.shape[0]


def dense_flipped_stat(fit, x, z, g, standardized=True):
    Wh, IP, row = dense_parts(fit, x, z)
    n = x.shape[0]
    G = np.diag(np.asarray(g, dtype=float))
    s = float(row @ G @ (fit.y - fit.mu_hat)) / np.sqrt(n)
    if standardized:
        s /= np.sqrt(dense_flip_variance(fit, x, z, g))
    return s


def all_signs(n):
    """Every +/-1 vector of length n, by recursion (order irrelevant)."""
    if n == 0:
        return [[]]
    return [[s] + rest for s in (1, -1) for rest in all_signs(n - 1)]


def count_pvalue(values, observed):
    return sum(1 for v in values if v >= observed) / len(values)


def closed_testing_loop(M, psi):
    """Adjusted p-values by explicit loops over every subset."""
    w, m = M.shape
    adj = [0.0] * m
    for size in range(1, m + 1):
        for L in combinations(range(m), size):
            T = [psi([M[j, l] for l in L]) for j in range(w)]
            p = count_pvalue(T, T[0])
            for l in L:
                adj[l] = max(adj[l], p)
    return np.array(adj)


def stepdown_iterative(M, alpha):
    """Reject-remove-repeat max-T: the literal sequential procedure."""
    w, m = M.shape
    remaining = list(range(m))
    rejected = set()
    k = int(np.floor(alpha * w + 1e-9))
    while remaining:
        maxima = sorted(max(M[j, l] for l in remaining) for j in range(w))
        # threshold m_(ceil((1 - alpha) w)), 1-based order statistic
        thr = maxima[int(np.ceil((1 - alpha) * w - 1e-9)) - 1] if k else np.inf
        new = [l for l in remaining if M[0, l] > thr]
        if not new:
            break
        rejected.update(new)
        remaining = [l for l in remaining if l not in new]
    return rejected


def stepdown_recursive(M):
    """Westfall-Young free step-down adjusted p-values by direct subset recursion."""
    w, m = M.shape
    order = sorted(range(m), key=lambda l: -M[0, l])
    adj = np.zeros(m)
    running = 0.0
    for r, l in enumerate(order):
        rest = order[r:]
        T = [max(M[j, s] for s in rest) for j in range(w)]
        running = max(running, count_pvalue(T, M[0, l]))
        adj[l] = running
    return adj


def holm_definition(p):
    """Holm adjusted p-values straight from the definition."""
    m = len(p)
    order = sorted(range(m), key=lambda i: p[i])
    adj = [0.0] * m
    for rank, i in enumerate(order):
        adj[i] = min(1.0, max((m - r) * p[order[r]] for r in range(rank + 1)))
    return np.array(adj)


def dense_flip_table(fit, x, z, signs):
    """Flipped variances and standardized statistics for many flips, densely.

    The sandwich X'W^1/2 (I-P) G (I-P) G (I-P) W^1/2 X is evaluated as
    (left * g) (I-P) (g * right) with explicit n x n matrices; only the
    grouping of the products differs from the scalar version.
    """
    Wh, IP, row = dense_parts(fit, x, z)
    n = x.shape[0]
    G = np.asarray(signs, dtype=float)
    left = x @ Wh @ IP
    right = IP @ Wh @ x
    var = np.sum(((G * left) @ IP) * (G * right), axis=1) / n
    raw = G @ (row * (fit.y - fit.mu_hat)) / np.sqrt(n)
    # magnitude of the summands, for a cancellation-aware relative error
    scale = np.sum(np.abs(row * (fit.y - fit.mu_hat))) / np.sqrt(n)
    return var, raw / np.sqrt(var), scale / np.sqrt(var)


def mp_identity_variance(fit, x, z, dps=50):
    """n^-1 X'W^1/2 (I-P) W^1/2 X with an explicit P, in 50-digit arithmetic.

    Float64 dense evaluation loses about eps * |W^1/2 X|^2 to rounding,
    which swamps the result when X is nearly in the weighted span of Z.
    """
    import mpmath

    with mpmath.workdps(dps):
        n = x.shape[0]
        Z = np.asarray(z, dtype=float).reshape(n, -1)
        sw = [mpmath.sqrt(mpmath.mpf(float(v))) for v in fit.w_diag]
        v = mpmath.matrix([sw[i] * mpmath.mpf(float(x[i])) for i in range(n)])
        if Z.shape[1]:
            A = mpmath.matrix(n, Z.shape[1])
            for i in range(n):
                for j in range(Z.shape[1]):
                    A[i, j] = sw[i] * mpmath.mpf(float(Z[i, j]))
            P = A * mpmath.inverse(A.T * A) * A.T
        else:
            P = mpmath.zeros(n, n)
        IP = mpmath.eye(n) - P
        return float((v.T * IP * v)[0, 0] / n)
