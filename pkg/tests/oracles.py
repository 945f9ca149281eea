"""Scalar-loop reference implementations used as independent test oracles.

Nothing here imports from the package under test except plain data types.
"""

import math


def cosine(u, v):
    nu = math.sqrt(sum(a * a for a in u))
    nv = math.sqrt(sum(b * b for b in v))
    if nu == 0 or nv == 0:
        return 0.0
    return sum(a * b for a, b in zip(u, v)) / (nu * nv)


def counts_loop(trips, n):
    s = [[0] * n for _ in range(n)]
    for o, d, c in trips:
        s[o][d] += c
    return s


def ac_loop(trips, n, alpha=0.5):
    s = counts_loop(trips, n)
    # origin distribution of region i: trips (r -> i) over r
    p_o = []
    p_d = []
    for i in range(n):
        inc = [s[r][i] for r in range(n)]
        out = [s[i][r] for r in range(n)]
        ti, to = sum(inc), sum(out)
        p_o.append([x / ti for x in inc] if ti else [0.0] * n)
        p_d.append([x / to for x in out] if to else [0.0] * n)
    ac = [[0.0] * n for _ in range(n)]
    for i in range(n):
        for j in range(n):
            if i == j:
                live = any(p_o[i]) or any(p_d[i])
                ac[i][j] = 1.0 if live else 0.0
            else:
                ac[i][j] = alpha * cosine(p_o[i], p_o[j]) + (1 - alpha) * cosine(p_d[i], p_d[j])
    return ac


def vc_loop(neighbor_lists, n):
    vecs = []
    for i in range(n):
        v = [0.0] * n
        v[i] = 1.0
        for j in neighbor_lists[i]:
            v[j] = 1.0
        vecs.append(v)
    return [[cosine(vecs[i], vecs[j]) if i != j else 1.0 for j in range(n)] for i in range(n)]


def fc_loop(vectors):
    n = len(vectors)
    out = [[0.0] * n for _ in range(n)]
    for i in range(n):
        for j in range(n):
            if i == j:
                out[i][j] = 1.0 if any(vectors[i]) else 0.0
            else:
                out[i][j] = cosine(vectors[i], vectors[j])
    return out


def knn_sort(values, k):
    n = len(values)
    result = []
    for i in range(n):
        peers = sorted((j for j in range(n) if j != i and values[i][j] > 0), key=lambda j: (-values[i][j], j))
        result.append(peers[:k])
    return result


def log_softmax_row(row):
    m = max(row)
    lse = m + math.log(sum(math.exp(x - m) for x in row))
    return [x - lse for x in row]


def ac_loss_loop(e_o, e_d, pairs):
    """Printed form: p_o(j|i) over E_o^i . E_d^j', p_d(j|i) over E_d^i . E_o^j'."""
    n = len(e_o)
    dot = lambda u, v: sum(a * b for a, b in zip(u, v))
    total = 0.0
    for (i, j), c in pairs.items():
        lo = log_softmax_row([dot(e_o[i], e_d[jj]) for jj in range(n)])
        ld = log_softmax_row([dot(e_d[i], e_o[jj]) for jj in range(n)])
        total += c * (-lo[j] - ld[j])
    return total


def gram_loss_loop(e, target):
    n = len(e)
    total = 0.0
    for i in range(n):
        for j in range(n):
            g = sum(a * b for a, b in zip(e[i], e[j]))
            total += (target[i][j] - g) ** 2
    return total / (n * n)


def transd_score_matrix(h, t, r, hp, tp, rp):
    """Build M_rh = r_p h_p^T + I explicitly and score ||M_rh h + r - M_rt t||^2."""
    d = len(h)
    m_h = [[rp[a] * hp[b] + (1.0 if a == b else 0.0) for b in range(d)] for a in range(d)]
    m_t = [[rp[a] * tp[b] + (1.0 if a == b else 0.0) for b in range(d)] for a in range(d)]
    h_perp = [sum(m_h[a][b] * h[b] for b in range(d)) for a in range(d)]
    t_perp = [sum(m_t[a][b] * t[b] for b in range(d)) for a in range(d)]
    return sum((h_perp[a] + r[a] - t_perp[a]) ** 2 for a in range(d))


def pair_counting_ari(a, b):
    n = len(a)
    same_a = same_b = both = 0
    pairs = n * (n - 1) // 2
    for i in range(n):
        for j in range(i + 1, n):
            sa, sb = a[i] == a[j], b[i] == b[j]
            same_a += sa
            same_b += sb
            both += sa and sb
    expected = same_a * same_b / pairs
    max_index = (same_a + same_b) / 2
    if max_index == expected:
        return 1.0
    return (both - expected) / (max_index - expected)


def gat_loop(x, weight, att, neighbor_lists, slope=0.2):
    """Single-head GAT by explicit loops: returns (outputs, attention dict)."""
    n, d_in = len(x), len(x[0])
    dh = len(weight[0])
    wx = [[sum(x[i][k] * weight[k][c] for k in range(d_in)) for c in range(dh)] for i in range(n)]
    out, attention = [], {}
    for i in range(n):
        hood = sorted(set(neighbor_lists[i]) | {i})
        logits = []
        for j in hood:
            z = sum(att[c] * wx[i][c] for c in range(dh)) + sum(att[dh + c] * wx[j][c] for c in range(dh))
            logits.append(z if z > 0 else slope * z)
        m = max(logits)
        ex = [math.exp(z - m) for z in logits]
        total = sum(ex)
        alphas = [e / total for e in ex]
        row = [0.0] * dh
        for a, j in zip(alphas, hood):
            attention[(i, j)] = a
            for c in range(dh):
                row[c] += a * wx[j][c]
        out.append([v if v > 0 else math.expm1(v) for v in row])
    return out, attention
