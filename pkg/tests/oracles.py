"""Independent reference implementations used as test oracles.

Deliberately naive: scalar loops, no masking tricks, no log-sum-exp.
They share nothing with the package code paths they check.
"""

import math

import numpy as np


def cosine(a, b):
    dot = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(y * y for y in b))
    return dot / (na * nb)


def cosine_table(A, B):
    return [[cosine(a, b) for b in B] for a in A]


def hinge(x):
    return x if x > 0 else 0.0


def _hardest(values, exclude):
    best, best_k = -math.inf, None
    for k, v in enumerate(values):
        if k != exclude and v > best:
            best, best_k = v, k
    return best_k


def naive_loss(z_img, z_txt, kind, alpha=0.2, tau=0.1):
    """Mean per-pair loss computed one triplet at a time."""
    Zi = [list(map(float, r)) for r in z_img]
    Zc = [list(map(float, r)) for r in z_txt]
    n = len(Zi)
    S = cosine_table(Zi, Zc)
    total = 0.0
    for i in range(n):
        pos = S[i][i]
        if kind == "SH":
            for k in range(n):
                if k != i:
                    total += hinge(alpha + S[i][k] - pos)
                    total += hinge(alpha + S[k][i] - pos)
        elif kind in ("MH", "CMN", "CMN_TILDE"):
            c_star = _hardest([S[i][k] for k in range(n)], i)
            i_star = _hardest([S[k][i] for k in range(n)], i)
            if kind == "MH":
                total += hinge(alpha + S[i][c_star] - pos) + hinge(alpha + S[i_star][i] - pos)
            elif kind == "CMN":
                total += hinge(-math.log(math.exp(pos / tau) / math.exp((S[i][c_star] + alpha) / tau)))
                total += hinge(-math.log(math.exp(pos / tau) / math.exp((S[i_star][i] + alpha) / tau)))
            else:
                total += -math.log(math.exp(pos / tau) / math.exp(S[i][c_star] / tau))
                total += -math.log(math.exp(pos / tau) / math.exp(S[i_star][i] / tau))
        elif kind == "CSN":
            den_i = sum(math.exp(S[i][k] / tau) for k in range(n))
            den_c = sum(math.exp(S[k][i] / tau) for k in range(n))
            total += -math.log(math.exp(pos / tau) / den_i) - math.log(math.exp(pos / tau) / den_c)
        elif kind == "MVN":
            den_i = math.exp(pos / tau)
            den_c = math.exp(pos / tau)
            for k in range(n):
                if k != i:
                    den_i += math.exp(S[i][k] / tau) + math.exp(cosine(Zi[i], Zi[k]) / tau)
                    den_c += math.exp(S[k][i] / tau) + math.exp(cosine(Zc[i], Zc[k]) / tau)
            total += -math.log(math.exp(pos / tau) / den_i) - math.log(math.exp(pos / tau) / den_c)
        else:
            raise ValueError(kind)
    return total / n


def naive_recall_i2t(S, cap_to_img, k):
    """Sort each image's gallery (desc score, then index) and scan for a positive."""
    S = np.asarray(S)
    n_img, n_cap = S.shape
    hits = 0
    for i in range(n_img):
        order = sorted(range(n_cap), key=lambda j: (-S[i, j], j))
        if any(cap_to_img[j] == i for j in order[:k]):
            hits += 1
    return 100.0 * hits / n_img


def naive_recall_t2i(S, cap_to_img, k):
    S = np.asarray(S)
    n_img, n_cap = S.shape
    hits = 0
    for j in range(n_cap):
        order = sorted(range(n_img), key=lambda i: (-S[i, j], i))
        if cap_to_img[j] in order[:k]:
            hits += 1
    return 100.0 * hits / n_cap


def least_squares_similarity(ds, split="test"):
    """Fit caption -> image features by least squares on train, score ``split`` by cosine.

    The map has an intercept column. Returns (S, cap_to_img_rows) for the split.
    """
    train = ds.split_view("train")
    X = np.hstack([train.captions.feats, np.ones((len(train.captions), 1))])
    Y = train.images.feats[train.cap_img_rows]
    W, *_ = np.linalg.lstsq(X, Y, rcond=None)
    view = ds.split_view(split)
    pred = np.hstack([view.captions.feats, np.ones((len(view.captions), 1))]) @ W
    img = view.images.feats
    S = (img / np.linalg.norm(img, axis=1, keepdims=True)) @ (pred / np.linalg.norm(pred, axis=1, keepdims=True)).T
    return S, view.cap_img_rows
