"""Graph completion: masked cross-party products and link prediction.

One party holds the adjacency structure, the other the node features.
Node representations are the product of the two matrices; the product
is computed through a random invertible confusion matrix so neither
factor crosses in the clear.  Feature rows missing on either side are
completed with the trained dual generators before the product.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .dual import DualModelPair, dual_infer
from .nn import as_batch
from .transport import Hub, MessageKind, ProtocolError, pack_matrix, \
    unpack_matrix

CONDITION_LIMIT = 1e8


def node_representations(adj, feat) -> np.ndarray:
    """M_rep = adjacency @ features; unknown adjacency rows stay zero."""
    a = as_batch(adj)
    f = as_batch(feat)
    if a.shape[1] != f.shape[0]:
        raise ValueError("adjacency columns must match feature rows")
    return a @ f


@dataclass(frozen=True)
class ConfusionMatrix:
    """A well-conditioned random square mask and its cached inverse."""

    matrix: np.ndarray
    inverse: np.ndarray


def make_confusion(size: int, rng: np.random.Generator,
                   max_tries: int = 32) -> ConfusionMatrix:
    """Uniform [-1, 1] square matrix, re-drawn until well conditioned."""
    for _ in range(max_tries):
        m = rng.uniform(-1.0, 1.0, size=(size, size))
        if np.linalg.cond(m) < CONDITION_LIMIT:
            return ConfusionMatrix(m, np.linalg.inv(m))
    raise RuntimeError("could not draw a well-conditioned confusion matrix")


def confusion_protocol(m_a, m_b, rng: np.random.Generator,
                       hub: Hub | None = None) -> np.ndarray:
    """Compute M_A @ M_B without revealing either factor.

    Three messages: B sends M_B masked by the confusion matrix, A
    multiplies by its factor and returns the masked product, B strips
    the mask.  The shared inner dimension must exceed M_A's row count;
    otherwise the product has full rank relative to the unknowns and
    the counterpart could solve for the hidden factor, so the protocol
    aborts.
    """
    m_a = as_batch(m_a)
    m_b = as_batch(m_b)
    if m_a.shape[1] != m_b.shape[0]:
        raise ValueError(f"cannot chain {m_a.shape} with {m_b.shape}")
    if m_a.shape[1] <= m_a.shape[0]:
        raise ProtocolError("confusion protocol needs the inner dimension "
                            "to exceed the left factor's rows; the product "
                            "would pin down the hidden factor")
    own_hub = hub is None
    if own_hub:
        hub = Hub(actors=("A", "B"))
    try:
        conf = make_confusion(m_b.shape[1], rng)
        hub.send("B", "A", MessageKind.MatrixBlock,
                 pack_matrix(m_b @ conf.matrix))
        masked_b = unpack_matrix(hub.recv("A", "B",
                                          MessageKind.MatrixBlock).payload)
        hub.send("A", "B", MessageKind.MatrixBlock,
                 pack_matrix(m_a @ masked_b))
        masked_prod = unpack_matrix(hub.recv("B", "A",
                                             MessageKind.MatrixBlock).payload)
        return masked_prod @ conf.inverse
    finally:
        if own_hub:
            hub.close()


def complete_feature_matrix(pair: DualModelPair, feat_a, feat_b,
                            has_a, has_b) -> np.ndarray:
    """Fill missing per-node party features with the dual generators.

    ``has_a``/``has_b`` are boolean masks over the rows; a row missing
    on both sides cannot be completed.  Rows present on both sides are
    returned untouched.
    """
    fa = as_batch(feat_a)
    fb = as_batch(feat_b)
    has_a = np.asarray(has_a, dtype=bool)
    has_b = np.asarray(has_b, dtype=bool)
    if fa.shape[0] != fb.shape[0] or has_a.shape != (fa.shape[0],) or \
            has_b.shape != (fa.shape[0],):
        raise ValueError("feature blocks and masks must align by row")
    if not (has_a | has_b).all():
        raise ValueError("some rows are missing on both sides")
    fa = fa.copy()
    fb = fb.copy()
    need_b = has_a & ~has_b
    need_a = has_b & ~has_a
    if need_b.any():
        fb[need_b] = dual_infer(pair.a_to_b, fa[need_b])
    if need_a.any():
        fa[need_a] = dual_infer(pair.b_to_a, fb[need_a])
    return np.hstack([fa, fb])


def link_auc(scores, truth) -> float:
    """Probability a held-out edge outscores a non-edge, ties at half.

    Rank-based Mann-Whitney statistic; ties contribute exactly 1/2
    through average ranks, so the value matches pairwise counting
    bit for bit.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    t = np.asarray(truth).ravel()
    if s.shape != t.shape:
        raise ValueError("scores and truth must have equal length")
    if not np.isin(t, (0, 1)).all():
        raise ValueError("truth must be 0/1")
    pos = s[t == 1]
    neg = s[t == 0]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("need both classes in truth")
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[:pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def cosine_scores(reps: np.ndarray, edges) -> np.ndarray:
    """Cosine similarity of node representation pairs; zero rows score 0."""
    norms = np.linalg.norm(reps, axis=1)
    out = []
    for u, v in edges:
        d = norms[u] * norms[v]
        out.append(float(reps[u] @ reps[v] / d) if d > 0.0 else 0.0)
    return np.array(out)


def holdout_edges(adj, fraction: float, rng: np.random.Generator):
    """Remove a fraction of edges and pair them with sampled non-edges.

    Returns (training adjacency, positive pairs, negative pairs); the
    graph is treated as undirected and both triangle entries of a held
    out edge are cleared.
    """
    a = np.asarray(adj)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("adjacency must be square")
    n = a.shape[0]
    iu, ju = np.where(np.triu(a, 1) > 0)
    if iu.size == 0:
        raise ValueError("graph has no edges")
    n_hold = max(1, int(round(iu.size * fraction)))
    pick = rng.choice(iu.size, size=n_hold, replace=False)
    pos = [(int(iu[k]), int(ju[k])) for k in pick]
    train = a.astype(np.float64).copy()
    for u, v in pos:
        train[u, v] = train[v, u] = 0.0
    neg = []
    seen = set(pos)
    while len(neg) < n_hold:
        u = int(rng.integers(n))
        v = int(rng.integers(n))
        if u == v or a[u, v] or (u, v) in seen or (v, u) in seen:
            continue
        seen.add((u, v))
        neg.append((u, v))
    return train, pos, neg


def link_prediction_auc(pair: DualModelPair, adj, feat_a, feat_b, has_a,
                        has_b, holdout_fraction: float,
                        rng: np.random.Generator,
                        hub: Hub | None = None) -> float:
    """Score link prediction with dual-completed features.

    The adjacency holder contributes only the rows for its own nodes
    (``has_a``), keeping the masked product underdetermined, so edges
    are held out and scored within that node subset.  Scores are
    cosine similarities of the masked-product representations.
    """
    features = complete_feature_matrix(pair, feat_a, feat_b, has_a, has_b)
    a = np.asarray(adj)
    a_nodes = np.where(np.asarray(has_a, dtype=bool))[0]
    sub = a[np.ix_(a_nodes, a_nodes)]
    _, pos, neg = holdout_edges(sub, holdout_fraction, rng)
    train = a.astype(np.float64).copy()
    for u, v in pos:
        gu, gv = a_nodes[u], a_nodes[v]
        train[gu, gv] = train[gv, gu] = 0.0
    reps = confusion_protocol(train[a_nodes, :], features, rng, hub)
    pairs = pos + neg
    truth = np.array([1] * len(pos) + [0] * len(neg))
    return link_auc(cosine_scores(reps, pairs), truth)
