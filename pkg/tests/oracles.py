"""Slow, loop-based reference implementations used to derive expected values.

Nothing here imports the package; every function is written directly from the
scalar definitions so that it can serve as an independent oracle.
"""

import math


def conv1d(x, w, b, stride=2):
    """x: list of rows (L x Cin); w: [tap][cin][cout]; 'same' centred 3-tap."""
    L = len(x)
    cin = len(x[0])
    cout = len(b)
    lout = -(-L // stride)
    y = []
    for t in range(lout):
        row = []
        for o in range(cout):
            acc = b[o]
            for k in (-1, 0, 1):
                pos = stride * t + k
                if 0 <= pos < L:
                    for c in range(cin):
                        acc += x[pos][c] * w[k + 1][c][o]
            row.append(acc)
        y.append(row)
    return y


def pool_time_avg(x, factor):
    out = []
    for start in range(0, len(x), factor):
        chunk = x[start : start + factor]
        out.append([sum(r[c] for r in chunk) / len(chunk) for c in range(len(x[0]))])
    return out


def pool_channels_max(row):
    return [max(row[2 * j], row[2 * j + 1]) for j in range(len(row) // 2)]


def encoder_input_channels(layer, D, S, base):
    c = [D + S] + [base * 2 ** j for j in range(4)]
    return c[layer - 1] + sum(c[k] // 2 for k in range(layer - 1))


def huber(d, xi=1.0):
    return 0.5 * d * d if abs(d) <= xi else xi * abs(d) - 0.5 * xi * xi


def _matmul(a, b):
    return [[sum(a[i][k] * b[k][j] for k in range(len(b))) for j in range(len(b[0]))] for i in range(len(a))]


def _centering(m):
    return [[(1.0 if i == j else 0.0) - 1.0 / m for j in range(m)] for i in range(m)]


def linear_gram(s):
    return [[sum(a * b for a, b in zip(si, sj)) for sj in s] for si in s]


def median(values):
    v = sorted(values)
    n = len(v)
    return v[n // 2] if n % 2 else 0.5 * (v[n // 2 - 1] + v[n // 2])


def rbf_gram(s, sigma=None):
    m = len(s)
    dist = [[math.sqrt(sum((a - b) ** 2 for a, b in zip(s[i], s[j]))) for j in range(m)] for i in range(m)]
    if sigma is None:
        sigma = median([dist[i][j] for i in range(m) for j in range(i + 1, m)])
        if sigma == 0:
            sigma = 1.0
    return [[math.exp(-dist[i][j] ** 2 / (2 * sigma * sigma)) for j in range(m)] for i in range(m)]


def hsic(k1, k2):
    m = len(k1)
    h = _centering(m)
    prod = _matmul(_matmul(_matmul(k1, h), k2), h)
    return sum(prod[i][i] for i in range(m)) / (m - 1) ** 2


def adam_first_step(theta, g, lr=1e-4, b1=0.9, b2=0.999, eps=1e-8):
    m = (1 - b1) * g
    v = (1 - b2) * g * g
    mhat = m / (1 - b1)
    vhat = v / (1 - b2)
    return theta - lr * mhat / (math.sqrt(vhat) + eps)


def held_out(n):
    # 12 subjects -> 2 held out per part; proportional elsewhere, at least one
    return max(1, int(math.floor(n / 6 + 0.5)))


def principal_direction(points, iters=500):
    """Power iteration for the top eigenvector of sum p p^T (2-vertex case)."""
    dim = len(points[0])
    v = [1.0 / math.sqrt(dim)] * dim
    for _ in range(iters):
        w = [0.0] * dim
        for p in points:
            dot = sum(a * b for a, b in zip(p, v))
            for i in range(dim):
                w[i] += dot * p[i]
        n = math.sqrt(sum(a * a for a in w))
        v = [a / n for a in w]
    return v
