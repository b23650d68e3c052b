"""LDA, L1 nearest-neighbour matching, virtual faces and the evaluation protocol."""

import logging
import warnings
from collections import Counter, OrderedDict
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import ContractError
from .spherical import SphericalSignal

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# LDA

@dataclass(frozen=True, eq=False)
class LdaModel:
    W: np.ndarray            # K x d
    eigenvalues: np.ndarray
    class_means: np.ndarray  # c x K
    global_mean: np.ndarray
    classes: tuple

    @property
    def d(self):
        return self.W.shape[1]

    def transform(self, X):
        """Project row vectors: C~ = C W."""
        return np.asarray(X, dtype=float) @ self.W


def lda_fit(X, labels, d=None):
    """Fisher discriminant directions of the rows of ``X``.

    Solves S_b w = lambda (S_w + eps I) w with eps = 1e-6 trace(S_w) / K and keeps
    the top ``d`` directions; ``d`` is clamped to min(K, c - 1).
    """
    X = np.asarray(X, dtype=float)
    labels = np.asarray(labels)
    classes = tuple(OrderedDict.fromkeys(labels.tolist()))
    c, k = len(classes), X.shape[1]
    if c < 2:
        raise ContractError("LDA needs at least two classes")
    d_max = min(k, c - 1)
    if d is None:
        d = d_max
    elif d > d_max:
        warnings.warn(f"LDA dimension {d} clamped to min(K, c-1) = {d_max}", stacklevel=2)
        d = d_max
    mu = X.mean(axis=0)
    means = np.empty((c, k))
    sw = np.zeros((k, k))
    sb = np.zeros((k, k))
    for j, cls in enumerate(classes):
        xc = X[labels == cls]
        means[j] = xc.mean(axis=0)
        dc = xc - means[j]
        sw += dc.T @ dc
        dm = (means[j] - mu)[:, None]
        sb += len(xc) * dm @ dm.T
    tr = np.trace(sw)
    if tr <= 0:
        # one sample per class: fall back on the total scatter scale
        tr = np.trace(sb) if np.trace(sb) > 0 else 1.0
    eps = 1e-6 * tr / k
    vals, vecs = linalg.eigh(sb, sw + eps * np.eye(k))
    order = np.argsort(vals)[::-1][:d]
    W = vecs[:, order]
    flip = np.sign(W[np.argmax(np.abs(W), axis=0), np.arange(W.shape[1])])
    W = W * np.where(flip == 0, 1.0, flip)
    return LdaModel(W, vals[order], means, mu, classes)


# --------------------------------------------------------------------------
# matching

@dataclass(frozen=True)
class GalleryEntry:
    coeffs: np.ndarray
    label: str


def l1_distances(probe, gallery):
    """L1 distance from one probe (or each row of several probes) to every gallery row."""
    g = np.asarray(gallery, dtype=float)
    p = np.asarray(probe, dtype=float)
    if p.shape[-1] != g.shape[-1]:
        raise ContractError(f"dimension mismatch: probe {p.shape[-1]} vs gallery {g.shape[-1]}")
    if p.ndim == 1:
        return np.abs(g - p).sum(axis=1)
    return np.abs(p[:, None, :] - g[None, :, :]).sum(axis=2)


def l1_match(probe, gallery):
    """Label of the L1-nearest gallery entry (first wins on ties) and all distances."""
    if not gallery:
        raise ContractError("empty gallery")
    mat = np.stack([np.asarray(e.coeffs, dtype=float) for e in gallery])
    dist = l1_distances(probe, mat)
    return gallery[int(np.argmin(dist))].label, dist


def euclidean_distances(probes, gallery):
    p = np.asarray(probes, dtype=float)
    g = np.asarray(gallery, dtype=float)
    sq = (p * p).sum(1)[:, None] + (g * g).sum(1)[None, :] - 2 * p @ g.T
    return np.sqrt(np.maximum(sq, 0.0))


def mse_distances(probes, gallery):
    p = np.asarray(probes, dtype=float)
    g = np.asarray(gallery, dtype=float)
    return np.array([((g - x) ** 2).mean(axis=1) for x in p])


# --------------------------------------------------------------------------
# virtual faces

def _shift(values, d_theta, d_phi):
    out = np.roll(values, d_phi, axis=1)
    if d_theta > 0:
        out = np.concatenate([np.zeros((d_theta, out.shape[1])), out[:-d_theta]], axis=0)
    elif d_theta < 0:
        out = np.concatenate([out[-d_theta:], np.zeros((-d_theta, out.shape[1]))], axis=0)
    return out


def shift_signal(signal, d_theta, d_phi):
    """Index shift: zero-fill across the theta boundaries, wrap around in phi."""
    return SphericalSignal(signal.grid, _shift(signal.values, d_theta, d_phi),
                           _shift(signal.coverage.astype(float), d_theta, d_phi) > 0.5)


_NEIGHBOURS = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))


def make_virtual_faces(signal, steps=(1,)):
    """Eight neighbour shifts of ``signal`` per step size (one-cell shifts by default)."""
    return [shift_signal(signal, s * dt, s * dp) for s in steps for dt, dp in _NEIGHBOURS]


# --------------------------------------------------------------------------
# ranking and ROC

def label_ranks(distances, gallery_labels, true_labels, distinct=True):
    """1-based rank of the true label for each probe.

    With ``distinct`` labels are ordered by their closest gallery entry;
    otherwise the rank is the position of the first correct gallery sample.
    Probes whose label is absent from the gallery get rank ``inf``.
    """
    distances = np.atleast_2d(distances)
    gl = np.asarray(gallery_labels)
    uniq = list(OrderedDict.fromkeys(gl.tolist()))
    ranks = np.empty(len(true_labels))
    for p, (row, truth) in enumerate(zip(distances, true_labels)):
        if truth not in uniq:
            ranks[p] = np.inf
            continue
        if distinct:
            best = np.array([row[gl == u].min() for u in uniq])
            order = np.argsort(best, kind="stable")
            ranks[p] = 1 + int(np.flatnonzero(np.asarray(uniq, dtype=object)[order] == truth)[0])
        else:
            order = np.argsort(row, kind="stable")
            ranks[p] = 1 + int(np.flatnonzero(gl[order] == truth)[0])
    return ranks


def cmc_curve(ranks, max_rank):
    ranks = np.asarray(ranks)
    return np.array([np.mean(ranks <= k) for k in range(1, max_rank + 1)])


def verification_scores(distances, gallery_labels, true_labels):
    """Scores (negated min distance) and client flags for every (probe, claimed identity)."""
    distances = np.atleast_2d(distances)
    gl = np.asarray(gallery_labels)
    uniq = list(OrderedDict.fromkeys(gl.tolist()))
    if len(uniq) < 2:
        raise ContractError("verification needs at least two identities for impostor claims")
    masks = [gl == u for u in uniq]
    scores, client = [], []
    for row, truth in zip(distances, true_labels):
        for u, m in zip(uniq, masks):
            scores.append(-row[m].min())
            client.append(u == truth)
    return np.array(scores), np.array(client, dtype=bool)


def roc_curve(scores, is_client):
    """(FPR, TPR, thresholds) over every distinct score, from (0, 0) to (1, 1)."""
    scores = np.asarray(scores, dtype=float)
    is_client = np.asarray(is_client, dtype=bool)
    n_pos, n_neg = is_client.sum(), (~is_client).sum()
    if n_pos == 0 or n_neg == 0:
        raise ContractError("ROC needs both client and impostor scores")
    order = np.argsort(-scores, kind="stable")
    s, c = scores[order], is_client[order]
    tp = np.cumsum(c)
    fp = np.cumsum(~c)
    last = np.r_[s[1:] != s[:-1], True]  # accept everything scoring >= threshold
    tpr = np.r_[0.0, tp[last] / n_pos]
    fpr = np.r_[0.0, fp[last] / n_neg]
    thr = np.r_[np.inf, s[last]]
    return fpr, tpr, thr


def auc(fpr, tpr):
    return float(np.trapezoid(tpr, fpr))


# --------------------------------------------------------------------------
# protocol bookkeeping

@dataclass(frozen=True)
class EvalConfig:
    train_per_subject: int = 2   # i in T_i
    rank_max: int = 10
    n_repeats: int = 10
    rng_seed: int = 0
    distinct_rank: bool = True
    virtual_faces: str = "auto"  # auto | on | off
    virtual_steps: tuple = (1,)

    @property
    def min_scans(self):
        return self.train_per_subject + 1

    def use_virtual(self, scenario):
        if self.virtual_faces == "on":
            return True
        if self.virtual_faces == "off":
            return False
        limit = 3 if scenario == "recognition" else 2
        return self.train_per_subject <= limit


def eligible_subjects(labels, train_per_subject):
    counts = Counter(labels)
    return [s for s in OrderedDict.fromkeys(labels) if counts[s] >= train_per_subject + 1]


def config_counts(labels, train_per_subject):
    """(subjects, training scans, test scans) for configuration T_i."""
    subs = eligible_subjects(labels, train_per_subject)
    counts = Counter(labels)
    n_train = train_per_subject * len(subs)
    n_test = sum(counts[s] for s in subs) - n_train
    return len(subs), n_train, n_test


def random_split(labels, train_per_subject, rng):
    """Indices of training and test scans; ``train_per_subject`` random picks per subject."""
    labels = list(labels)
    subs = eligible_subjects(labels, train_per_subject)
    if not subs:
        warnings.warn(f"no subject has {train_per_subject + 1} scans; T_{train_per_subject} "
                      "is infeasible", stacklevel=2)
    train, test = [], []
    for s in subs:
        idx = [i for i, l in enumerate(labels) if l == s]
        pick = rng.permutation(len(idx))
        train += [idx[j] for j in pick[:train_per_subject]]
        test += [idx[j] for j in pick[train_per_subject:]]
    return np.array(train, dtype=int), np.array(test, dtype=int)


def reference_histogram():
    """Per-subject scan counts reproducing the T1, T3 and T4 rows of the benchmark table.

    The published T1 and T2 rows cannot both hold for one histogram (they
    imply 873 and 874 scans among subjects with at least two scans); this
    one honours T1, so T2 comes out with 473 test scans instead of 474.
    """
    hist = {1: 77, 2: 35, 3: 44, 4: 35, 5: 52, 7: 1, 8: 33}
    counts = []
    for n_scans, n_subjects in sorted(hist.items()):
        counts += [n_scans] * n_subjects
    return counts


def mean_std(values):
    v = np.asarray(values, dtype=float)
    return float(v.mean()), (float(v.std(ddof=1)) if v.size > 1 else 0.0)
