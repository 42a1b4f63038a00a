"""Straight-line scalar references. Pure Python loops over nested lists, no numpy math."""
import math


def sigmoid(z):
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def softplus(z):
    return max(z, 0.0) + math.log1p(math.exp(-abs(z)))


def conv_same(x, w, b=None):
    """x[L][Cin], w[k][Cin][Cout] -> [L][Cout], zero padded."""
    L, k = len(x), len(w)
    cin, cout = len(w[0]), len(w[0][0])
    pad = (k - 1) // 2
    out = []
    for p in range(L):
        row = []
        for co in range(cout):
            acc = 0.0 if b is None else b[co]
            for dk in range(k):
                src = p + dk - pad
                if 0 <= src < L:
                    for ci in range(cin):
                        acc += x[src][ci] * w[dk][ci][co]
            row.append(acc)
        out.append(row)
    return out


def cell_step(x, H, C, p, prefix="enc."):
    """One ConvLSTM step with peepholes, written out gate by gate."""
    g = {}
    for gate in "ifco":
        zx = conv_same(x, p[f"{prefix}W_x{gate}"])
        zh = conv_same(H, p[f"{prefix}W_h{gate}"])
        b = p[f"{prefix}b_{gate}"]
        g[gate] = [[zx[l][c] + zh[l][c] + b[c] for c in range(len(b))] for l in range(len(x))]
    L, hc = len(C), len(C[0])
    I = [[sigmoid(g["i"][l][c] + p[f"{prefix}W_ci"][l][c] * C[l][c]) for c in range(hc)] for l in range(L)]
    F = [[sigmoid(g["f"][l][c] + p[f"{prefix}W_cf"][l][c] * C[l][c]) for c in range(hc)] for l in range(L)]
    Cn = [[F[l][c] * C[l][c] + I[l][c] * math.tanh(g["c"][l][c]) for c in range(hc)] for l in range(L)]
    O = [[sigmoid(g["o"][l][c] + p[f"{prefix}W_co"][l][c] * Cn[l][c]) for c in range(hc)] for l in range(L)]
    Hn = [[O[l][c] * math.tanh(Cn[l][c]) for c in range(hc)] for l in range(L)]
    return Hn, Cn


def mean_vector(rows):
    n, d = len(rows), len(rows[0])
    return [sum(r[j] for r in rows) / n for j in range(d)]


def sq_dist(a, b):
    return sum((x - y) ** 2 for x, y in zip(a, b))


def posterior(q, ct, cn):
    """(p_target, p_null) from a two-way softmax over negative squared distances."""
    dt, dn = sq_dist(q, ct), sq_dist(q, cn)
    p_t = sigmoid(dn - dt)
    p_n = sigmoid(dt - dn)
    return p_t, p_n


def proto_loss(queries, ct, cn, labels):
    """Mean NLL; label 0 = target, 1 = null."""
    total = 0.0
    for q, y in zip(queries, labels):
        dt, dn = sq_dist(q, ct), sq_dist(q, cn)
        total += softplus(dt - dn) if y == 0 else softplus(dn - dt)
    return total / len(queries)
