"""Metrics, significance testing, the elastic-net probe, and report types."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np


# -- ranking metrics ---------------------------------------------------------

def _check_binary(labels):
    labels = np.asarray(labels)
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0/1")
    return labels.astype(np.int64)


def _midranks(x):
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x), dtype=np.float64)
    sorted_x = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(scores, labels):
    """Rank-based (Mann-Whitney) AUROC with midrank tie handling."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = _check_binary(labels)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError(
            f"auroc needs both classes, got {n_pos} positives / {n_neg} negatives")
    ranks = _midranks(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores, labels):
    """Area under the precision-recall curve using the step-wise interpolated
    precision envelope over descending score thresholds."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = _check_binary(labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("auprc needs at least one positive")
    order = np.argsort(-scores, kind="mergesort")
    y = labels[order]
    s = scores[order]
    tp = np.cumsum(y)
    pred = np.arange(1, len(y) + 1)
    # keep only the last index of each tied-score block (thresholds)
    last = np.ones(len(s), dtype=bool)
    last[:-1] = s[1:] != s[:-1]
    precision = tp[last] / pred[last]
    recall = tp[last] / n_pos
    # envelope: best precision achievable at or beyond each recall level
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    area = 0.0
    for p, r in zip(env, recall):
        area += (r - prev_r) * p
        prev_r = r
    return float(area)


# -- Welch t-test ------------------------------------------------------------

def _betacf(a, b, x, max_iter=300, eps=3e-14):
    """Continued fraction for the regularized incomplete beta (Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    return h


def betainc_reg(a, b, x):
    """Regularized incomplete beta I_x(a, b)."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def welch_t_test(sample_a, sample_b):
    """Welch's unequal-variance two-sample t statistic and two-sided p."""
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError(f"welch_t_test needs >= 2 per sample, got {len(a)}/{len(b)}")
    na, nb = len(a), len(b)
    va, vb = a.var(ddof=1), b.var(ddof=1)
    diff = a.mean() - b.mean()
    denom_sq = va / na + vb / nb
    if denom_sq == 0.0:
        return (0.0, 1.0) if diff == 0.0 else (math.copysign(math.inf, diff), 0.0)
    t = diff / math.sqrt(denom_sq)
    df = denom_sq ** 2 / ((va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1))
    p = betainc_reg(df / 2.0, 0.5, df / (df + t * t))
    return float(t), float(p)


# -- elastic-net logistic regression -----------------------------------------

@dataclass
class ElasticNetModel:
    weights: np.ndarray
    intercept: float
    l1: float
    l2: float
    converged: bool
    final_grad_norm: float
    n_iter: int


def _logistic_objective(X, y, w, b, l1, l2):
    z = X @ w + b
    # log(1 + exp(-m)) computed stably
    m = np.where(y == 1, z, -z)
    loss = np.mean(np.logaddexp(0.0, -m))
    return loss + l1 * np.abs(w).sum() + 0.5 * l2 * (w @ w)


def elastic_net_fit(X, y, l1, l2, max_iter=10000, tol=1e-5):
    """Proximal-gradient (ISTA) fit of L1+L2-penalized logistic regression.

    Intercept is unpenalized.  Stops when the prox-gradient residual norm
    drops below ``tol``; otherwise returns with ``converged=False``.
    """
    X = np.asarray(X, dtype=np.float64)
    y = _check_binary(y).astype(np.float64)
    n, d = X.shape
    if len(y) != n:
        raise ValueError(f"{len(y)} labels for {n} rows")
    Xa = np.concatenate([np.ones((n, 1)), X], axis=1)
    lip = np.linalg.norm(Xa, 2) ** 2 / (4.0 * n) + l2
    step = 1.0 / lip
    w = np.zeros(d)
    b = 0.0
    grad_norm = math.inf
    it = 0
    for it in range(1, max_iter + 1):
        p = 1.0 / (1.0 + np.exp(-(X @ w + b)))
        resid = p - y
        grad_w = X.T @ resid / n + l2 * w
        grad_b = resid.mean()
        w_new = w - step * grad_w
        w_new = np.sign(w_new) * np.maximum(np.abs(w_new) - step * l1, 0.0)
        b_new = b - step * grad_b
        grad_norm = math.sqrt(np.sum(((w - w_new) / step) ** 2)
                              + ((b - b_new) / step) ** 2)
        w, b = w_new, b_new
        if grad_norm < tol:
            return ElasticNetModel(w, float(b), l1, l2, True, grad_norm, it)
    return ElasticNetModel(w, float(b), l1, l2, False, grad_norm, it)


def elastic_net_predict(model, X):
    X = np.asarray(X, dtype=np.float64)
    return 1.0 / (1.0 + np.exp(-(X @ model.weights + model.intercept)))


ELASTIC_NET_GRID = (0.001, 0.01, 0.1)


def elastic_net_cv_fit(X, y, seed=0, grid=ELASTIC_NET_GRID, n_folds=3):
    """Pick (l1, l2) by k-fold CV AUROC, then refit on all data."""
    X = np.asarray(X, dtype=np.float64)
    y = _check_binary(y)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(y))
    folds = np.array_split(perm, n_folds)
    best = None
    for l1 in grid:
        for l2 in grid:
            scores = []
            for i in range(n_folds):
                te = folds[i]
                tr = np.concatenate([folds[j] for j in range(n_folds) if j != i])
                if y[tr].min() == y[tr].max() or y[te].min() == y[te].max():
                    continue
                m = elastic_net_fit(X[tr], y[tr], l1, l2, max_iter=2000)
                scores.append(auroc(elastic_net_predict(m, X[te]), y[te]))
            if not scores:
                continue
            mean = float(np.mean(scores))
            if best is None or mean > best[0] + 1e-12:
                best = (mean, l1, l2)
    if best is None:
        raise ValueError("no CV split had both classes")
    _, l1, l2 = best
    return elastic_net_fit(X, y, l1, l2)


def transfer_probe(emb_a, labels_a, emb_b, labels_b, n_repeats=10, seed=0):
    """Fit elastic nets on group A embeddings, evaluate on group B, repeated
    with reseeded CV selection.  Returns mean/std AUROC and AUPRC."""
    labels_a = _check_binary(labels_a)
    labels_b = _check_binary(labels_b)
    for name, lab in (("A", labels_a), ("B", labels_b)):
        if lab.min() == lab.max():
            raise ValueError(f"group {name} has a single class")
    aurocs, auprcs = [], []
    for r in range(n_repeats):
        model = elastic_net_cv_fit(emb_a, labels_a, seed=seed * 1000 + r)
        scores = elastic_net_predict(model, emb_b)
        aurocs.append(auroc(scores, labels_b))
        auprcs.append(auprc(scores, labels_b))
    return {
        "auroc_mean": float(np.mean(aurocs)), "auroc_std": float(np.std(aurocs)),
        "auprc_mean": float(np.mean(auprcs)), "auprc_std": float(np.std(auprcs)),
    }


# -- reports -----------------------------------------------------------------

@dataclass
class EvalRecord:
    variant: str
    seed: int
    fold: int
    metric: str
    value: float


@dataclass
class EvalReport:
    records: list = field(default_factory=list)

    def add(self, variant, seed, fold, metric, value):
        self.records.append(EvalRecord(str(variant), int(seed), int(fold),
                                       str(metric), float(value)))

    def values(self, variant, metric="auroc"):
        return [r.value for r in self.records
                if r.variant == variant and r.metric == metric]

    def variants(self):
        return sorted({r.variant for r in self.records})

    def aggregates(self, metric="auroc"):
        out = {}
        for v in self.variants():
            vals = self.values(v, metric)
            if vals:
                out[v] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)),
                          "n": len(vals)}
        return out

    def pairwise_tests(self, metric="auroc"):
        tests = []
        variants = [v for v in self.variants() if self.values(v, metric)]
        for i, a in enumerate(variants):
            for b in variants[i + 1:]:
                va, vb = self.values(a, metric), self.values(b, metric)
                if len(va) >= 2 and len(vb) >= 2:
                    t, p = welch_t_test(va, vb)
                    tests.append({"variant_a": a, "variant_b": b,
                                  "t": t, "p": p})
        return tests

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["variant", "seed", "fold", "metric", "value"])
            for r in sorted(self.records, key=lambda r: (r.variant, r.seed,
                                                         r.fold, r.metric)):
                writer.writerow([r.variant, r.seed, r.fold, r.metric,
                                 np.format_float_positional(np.float64(r.value),
                                                            unique=True, trim="0")])

    def write_json(self, path):
        payload = {"aggregates": {m: self.aggregates(m)
                                  for m in sorted({r.metric for r in self.records})},
                   "tests": self.pairwise_tests()}
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)

    @classmethod
    def read_csv(cls, path):
        report = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                report.add(row["variant"], int(row["seed"]), int(row["fold"]),
                           row["metric"], float(row["value"]))
        return report
