"""Expression-matrix ingestion, feature selection, labeling, stratified
splitting, and the ground-truth-known synthetic confounded-data generator."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

ORIENTATIONS = ("samples_as_rows", "genes_as_rows")
DEFAULT_THRESHOLD_GRID = tuple(np.round(np.arange(0.05, 0.951, 0.05), 2))


@dataclass
class ExpressionDataset:
    sample_ids: list
    feature_names: list
    matrix: np.ndarray  # samples x features, float32
    domain: str
    labels: np.ndarray | None = None      # 0/1 per sample
    strata: list | None = None            # e.g. cancer type per sample
    response_auc: np.ndarray | None = None

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float32)
        n, d = self.matrix.shape
        if len(self.sample_ids) != n:
            raise ValueError(f"{len(self.sample_ids)} sample ids for {n} rows")
        if len(self.feature_names) != d:
            raise ValueError(f"{len(self.feature_names)} feature names for {d} columns")
        if len(set(self.sample_ids)) != n:
            raise ValueError("duplicate sample ids")
        if len(set(self.feature_names)) != d:
            raise ValueError("duplicate feature names")
        if np.isnan(self.matrix).any():
            raise ValueError("matrix contains NaN")

    @property
    def n_samples(self):
        return self.matrix.shape[0]

    @property
    def n_features(self):
        return self.matrix.shape[1]

    def subset_samples(self, idx):
        idx = np.asarray(idx, dtype=np.intp)
        return replace(
            self,
            sample_ids=[self.sample_ids[i] for i in idx],
            matrix=self.matrix[idx],
            labels=None if self.labels is None else self.labels[idx],
            strata=None if self.strata is None else [self.strata[i] for i in idx],
            response_auc=None if self.response_auc is None else self.response_auc[idx],
        )

    def subset_features(self, idx):
        idx = np.asarray(idx)
        return replace(
            self,
            feature_names=[self.feature_names[i] for i in idx],
            matrix=self.matrix[:, idx],
        )


def _read_table(path):
    sep = "\t" if str(path).endswith((".tsv", ".tsv.gz")) else ","
    try:
        df = pd.read_csv(path, sep=sep, index_col=0)
    except pd.errors.ParserError as exc:
        raise ValueError(f"{path}: ragged or malformed table: {exc}") from None
    return df


def load_expression_tsv(path, orientation="samples_as_rows", domain="cell_line",
                        log_transform=False):
    """Parse a TSV/CSV expression matrix (header row, id column first)."""
    if orientation not in ORIENTATIONS:
        raise ValueError(f"unknown orientation {orientation!r}")
    df = _read_table(path)
    if orientation == "genes_as_rows":
        df = df.T
    if df.index.has_duplicates:
        dup = df.index[df.index.duplicated()][0]
        raise ValueError(f"{path}: duplicate sample id {dup!r}")
    if df.columns.has_duplicates:
        dup = df.columns[df.columns.duplicated()][0]
        raise ValueError(f"{path}: duplicate feature name {dup!r}")
    bad = df.columns[df.dtypes == object]
    if len(bad):
        col = bad[0]
        row = df.index[pd.to_numeric(df[col], errors="coerce").isna()]
        where = row[0] if len(row) else "?"
        raise ValueError(f"{path}: non-numeric cell at row {where!r}, column {col!r}")
    if df.isna().any().any():
        col = df.columns[df.isna().any()][0]
        row = df.index[df[col].isna()][0]
        raise ValueError(f"{path}: NaN at row {row!r}, column {col!r}")
    matrix = df.to_numpy(dtype=np.float64)
    if log_transform:
        if (matrix < 0).any():
            raise ValueError(f"{path}: negative value under --log transform")
        matrix = np.log2(matrix + 1.0)
    return ExpressionDataset(
        sample_ids=[str(i) for i in df.index],
        feature_names=[str(c) for c in df.columns],
        matrix=matrix.astype(np.float32),
        domain=domain,
    )


def save_expression_tsv(ds, path):
    """Write samples-as-rows TSV; float32 values survive a round trip."""
    with open(path, "w") as fh:
        fh.write("sample_id\t" + "\t".join(ds.feature_names) + "\n")
        for sid, row in zip(ds.sample_ids, ds.matrix):
            cells = "\t".join(np.format_float_positional(
                np.float32(v), unique=True, trim="0") for v in row)
            fh.write(f"{sid}\t{cells}\n")


def load_label_csv(path):
    """Label file: CSV with columns sample_id, drug, auc."""
    df = pd.read_csv(path)
    required = {"sample_id", "drug", "auc"}
    missing = required - set(df.columns)
    if missing:
        raise ValueError(f"{path}: missing columns {sorted(missing)}")
    if df["auc"].isna().any():
        raise ValueError(f"{path}: NaN auc values")
    return df


def select_top_varied(ds, k):
    """Top-k features by fraction of distinct values across samples (values
    rounded to 6 decimals), ties broken by feature name ascending."""
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    if k > ds.n_features:
        raise ValueError(f"k={k} exceeds feature count {ds.n_features}")
    rounded = np.round(ds.matrix.astype(np.float64), 6)
    scores = np.array([len(np.unique(rounded[:, j])) for j in range(ds.n_features)],
                      dtype=np.float64) / ds.n_samples
    order = sorted(range(ds.n_features),
                   key=lambda j: (-scores[j], ds.feature_names[j]))
    return sorted(order[:k])


def union_features(ds_c, set_c, ds_t, set_t):
    """Merge two selected feature-name sets; both datasets are re-indexed to
    the sorted union.  Every union feature must exist in both matrices."""
    names_c = [ds_c.feature_names[j] for j in set_c]
    names_t = [ds_t.feature_names[j] for j in set_t]
    if not names_c or not names_t:
        raise ValueError("feature sets must be nonempty")
    union = sorted(set(names_c) | set(names_t))
    for ds in (ds_c, ds_t):
        have = set(ds.feature_names)
        absent = [n for n in union if n not in have]
        if absent:
            raise ValueError(
                f"features missing from {ds.domain} matrix: {absent[:5]}")
    idx_c = [ds_c.feature_names.index(n) for n in union]
    idx_t = [ds_t.feature_names.index(n) for n in union]
    return union, ds_c.subset_features(idx_c), ds_t.subset_features(idx_t)


def binarize_by_auc(auc_values, X, grid=DEFAULT_THRESHOLD_GRID, seed=0,
                    responsive_below=True, l1=0.01, l2=0.01):
    """Pick the AUC cut that a small elastic-net classifier separates best.

    For each grid threshold, label responsive iff auc < threshold (direction
    flips with ``responsive_below``), score the labeling by 3-fold CV AUROC of
    an elastic net on the expression features, and keep the best threshold
    (ties -> smaller).  Thresholds yielding a single class are skipped.
    """
    from .evaluation import auroc, elastic_net_fit, elastic_net_predict

    auc_values = np.asarray(auc_values, dtype=np.float64)
    if auc_values.min() < 0 or auc_values.max() > 1:
        raise ValueError("auc values must lie in [0, 1]")
    if len(grid) == 0:
        raise ValueError("threshold grid is empty")
    X = np.asarray(X, dtype=np.float64)
    rng = np.random.default_rng(seed)
    n = len(auc_values)
    perm = rng.permutation(n)
    folds = np.array_split(perm, 3)

    best = None
    for thr in sorted(grid):
        labels = (auc_values < thr) if responsive_below else (auc_values > thr)
        labels = labels.astype(np.int64)
        if labels.min() == labels.max():
            continue
        scores = []
        ok = True
        for i in range(3):
            test_idx = folds[i]
            train_idx = np.concatenate([folds[j] for j in range(3) if j != i])
            ytr, yte = labels[train_idx], labels[test_idx]
            if ytr.min() == ytr.max() or yte.min() == yte.max():
                ok = False
                break
            model = elastic_net_fit(X[train_idx], ytr, l1, l2)
            scores.append(auroc(elastic_net_predict(model, X[test_idx]), yte))
        if not ok:
            continue
        mean_score = float(np.mean(scores))
        if best is None or mean_score > best[0] + 1e-12:
            best = (mean_score, thr, labels)
    if best is None:
        raise ValueError("every threshold in the grid yields a single class")
    _, thr, labels = best
    return labels, float(thr)


def stratified_kfold(strata, k=10, seed=0):
    """Round-robin fold assignment within each stratum after a seeded
    shuffle; per-stratum fold sizes differ by at most one."""
    strata = list(strata)
    n = len(strata)
    if k > n:
        raise ValueError(f"k={k} exceeds sample count {n}")
    rng = np.random.default_rng(seed)
    assignment = np.empty(n, dtype=np.int64)
    for value in sorted(set(strata)):
        idx = np.array([i for i, s in enumerate(strata) if s == value])
        idx = idx[rng.permutation(len(idx))]
        # start each stratum at a rotated fold so small strata spread out
        start = int(rng.integers(k))
        for pos, i in enumerate(idx):
            assignment[i] = (start + pos) % k
    return assignment


def merge_small_strata(strata, min_size=10, other="other"):
    """Strata with fewer members than ``min_size`` collapse into one bucket.
    Returns (merged strata, list of merged stratum names)."""
    counts = {}
    for s in strata:
        counts[s] = counts.get(s, 0) + 1
    small = sorted(s for s, c in counts.items() if c < min_size)
    if not small:
        return list(strata), []
    return [other if s in small else s for s in strata], small


@dataclass
class SynthSpec:
    n_per_domain: int = 1000
    dim: int = 200
    shared_rank: int = 8
    confounder_strength: float = 3.0  # gamma
    confounder_rank: int = 16
    noise: float = 0.5                # sigma
    seed: int = 0

    def __post_init__(self):
        if self.shared_rank < 1:
            raise ValueError("shared_rank must be >= 1")
        if self.dim <= self.shared_rank:
            raise ValueError(
                f"dim ({self.dim}) must exceed shared_rank ({self.shared_rank})")
        if self.confounder_strength < 0:
            raise ValueError("confounder_strength (gamma) must be >= 0")
        if self.noise < 0:
            raise ValueError("noise (sigma) must be >= 0")
        if self.n_per_domain < 2:
            raise ValueError("n_per_domain must be >= 2")


def _unit_columns(rng, d, k):
    """Random orthonormal columns (thin QR of a Gaussian matrix)."""
    q, r = np.linalg.qr(rng.normal(size=(d, k)))
    # fix signs so the basis is a deterministic function of the draw
    return q * np.sign(np.diag(r))


def synth_generate(spec):
    """Two-domain confounded expression data with known ground truth.

    Shared latent factors drive both domains through one common linear map;
    each domain then corrupts its own random feature subset — the true
    signal on those features is attenuated by 1/(1+gamma) and replaced with
    nuisance factors pushed through a domain-specific random map scaled by
    gamma — plus isotropic noise everywhere.  At gamma=0 the corruption
    vanishes entirely and both domains follow the same clean law.
    Labels follow one linear rule in the shared factors for both domains.
    The nuisance factors never touch the labels, but because each domain
    corrupts a different feature subset, a classifier trained on raw source
    features freely uses features that are clean at home and ruined in the
    target domain, so it fails to transfer; an encoder that aligns the two
    domains learns to avoid both corrupted subsets.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(spec.seed), 0xDC0E]))
    d, r, q = spec.dim, spec.shared_rank, spec.confounder_rank
    n_corrupt = max(1, (3 * d) // 8)
    A = _unit_columns(rng, d, r)
    w = rng.normal(size=r)
    w /= np.linalg.norm(w)
    truth = {"seed": int(spec.seed), "w": w.tolist(),
             "gamma": spec.confounder_strength, "noise": spec.noise,
             "shared_rank": r, "confounder_rank": q}
    datasets = {}
    for domain, prefix in (("cell_line", "CL"), ("tissue", "TS")):
        corrupt = rng.choice(d, size=n_corrupt, replace=False)
        B = np.zeros((d, q))
        B[corrupt] = rng.normal(size=(n_corrupt, q)) / np.sqrt(q)
        s = rng.normal(size=(spec.n_per_domain, r))
        c = rng.normal(size=(spec.n_per_domain, q))
        X = s @ A.T
        # corruption attenuates the true signal on the affected features and
        # injects structured nuisance variation, both gated by gamma
        X[:, corrupt] /= 1.0 + spec.confounder_strength
        X = X + spec.confounder_strength * (c @ B.T)
        if spec.noise > 0:
            X = X + rng.normal(0.0, spec.noise, size=X.shape)
        margin = s @ w
        labels = (margin > 0).astype(np.int64)
        # pseudo drug-response curve area: low value <-> responsive (label 1)
        pseudo_auc = 1.0 / (1.0 + np.exp(-(-margin * 2.0)))
        strata = ["type%d" % t for t in
                  np.digitize(s[:, 0], [-0.6745, 0.0, 0.6745])]
        ids = [f"{prefix}_{i:05d}" for i in range(spec.n_per_domain)]
        names = [f"g{j:05d}" for j in range(d)]
        datasets[domain] = ExpressionDataset(
            sample_ids=ids, feature_names=names,
            matrix=X.astype(np.float32), domain=domain,
            labels=labels, strata=strata,
            response_auc=np.clip(pseudo_auc, 0.0, 1.0))
        truth[domain] = {"factors": s.tolist(),
                         "corrupted_features": sorted(int(j) for j in corrupt)}
    return datasets["cell_line"], datasets["tissue"], truth


def write_synth_bundle(spec, outdir, force=False):
    """Write the TSV pair, a labels CSV, and a ground-truth JSON sidecar."""
    import os

    ds_c, ds_t, truth = synth_generate(spec)
    paths = {name: os.path.join(outdir, name) for name in
             ("cell_line.tsv", "tissue.tsv", "labels.csv", "truth.json")}
    existing = [p for p in paths.values() if os.path.exists(p)]
    if existing and not force:
        raise FileExistsError(f"output exists (use --force): {existing[0]}")
    os.makedirs(outdir, exist_ok=True)
    save_expression_tsv(ds_c, paths["cell_line.tsv"])
    save_expression_tsv(ds_t, paths["tissue.tsv"])
    rows = []
    for ds in (ds_c, ds_t):
        for sid, auc in zip(ds.sample_ids, ds.response_auc):
            rows.append((sid, "synthetic", auc))
    with open(paths["labels.csv"], "w") as fh:
        fh.write("sample_id,drug,auc\n")
        for sid, drug, auc in rows:
            fh.write(f"{sid},{drug},{np.format_float_positional(np.float64(auc), unique=True, trim='0')}\n")
    with open(paths["truth.json"], "w") as fh:
        json.dump(truth, fh, sort_keys=True)
    return list(paths.values())
