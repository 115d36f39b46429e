"""Pretraining schedules for every variant, supervised fine-tuning with
gradual unfreezing and early stopping, and the full evaluation protocol."""

from __future__ import annotations

import logging
import time
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import losses as L
from . import models as M
from .autodiff import Tensor
from .data import merge_small_strata, stratified_kfold
from .evaluation import EvalReport, auroc
from .nn import Adam

log = logging.getLogger("deconfae")


def substream(seed, *tags):
    """Named, independent RNG stream derived from one root seed."""
    ints = [int(seed)] + [zlib.crc32(str(t).encode()) for t in tags]
    return np.random.default_rng(np.random.SeedSequence(ints))


@dataclass
class TrainingSchedule:
    batch_size: int = 64
    warmup_epochs: int = 5
    train_epochs: int = 20
    critic_steps: int = 2
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    pretrain_lr: float = 1e-3
    finetune_lr: float = 1e-4
    seed: int = 0
    finetune_max_epochs: int = 200
    patience: int = 10
    unfreeze_epoch: int = 10
    lr_decay: float = 0.1
    oversample_minority: bool = True
    dae_noise: float = 0.1

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.critic_steps < 1:
            raise ValueError(f"critic_steps must be >= 1, got {self.critic_steps}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")


def full_scale_schedule(**overrides):
    """Schedule defaults sized for full expression matrices (thousands of
    genes), as opposed to the desk-scale protocol defaults."""
    return TrainingSchedule(**{"warmup_epochs": 100, "train_epochs": 300,
                               "critic_steps": 5, **overrides})


@dataclass
class RunTrace:
    records: list = field(default_factory=list)  # (epoch, loss name, value)
    warmup_updates: int = 0
    critic_updates: int = 0
    generator_updates: int = 0
    early_stop_epoch: int | None = None
    wall_time: float = 0.0

    def record(self, epoch, name, value):
        self.records.append((int(epoch), str(name), float(value)))

    def to_lines(self):
        return [f"{e}\t{n}\t{v!r}" for e, n, v in self.records]

    def write(self, path):
        with open(path, "w") as fh:
            fh.write("\n".join(self.to_lines()) + "\n")


def _epoch_batches(rng, n_c, n_t, batch_size):
    """Index batches for one epoch: floor(min(Nc,Nt)/N) batches per domain,
    sampled without replacement (remainder dropped, larger domain
    re-subsampled each epoch)."""
    nb = min(n_c, n_t) // batch_size
    perm_c = rng.permutation(n_c)[:nb * batch_size]
    perm_t = rng.permutation(n_t)[:nb * batch_size]
    return [(perm_c[i * batch_size:(i + 1) * batch_size],
             perm_t[i * batch_size:(i + 1) * batch_size]) for i in range(nb)]


def _batch_tensor(matrix, idx):
    return Tensor(matrix[idx])


def _reparam_sample(mu, logvar, rng):
    eps = Tensor(rng.standard_normal(mu.shape).astype(np.float32))
    std = ad.texp(ad.scale(logvar, 0.5))
    return ad.add(mu, ad.mul(std, eps))


def _nonadv_step_loss(model, xb_c, xb_t, schedule, rng_noise):
    """One-batch objective for the non-adversarial variants."""
    w = schedule.weights
    variant = model.variant
    if variant == M.ModelVariant.DAE:
        cb_c = L.dae_corrupt(xb_c, schedule.dae_noise, rng_noise)
        cb_t = L.dae_corrupt(xb_t, schedule.dae_noise, rng_noise)
        pair_c = M.encode(model, cb_c, "cell_line")
        pair_t = M.encode(model, cb_t, "tissue")
        return L.recon_loss(xb_c, M.reconstruct(model, pair_c),
                            xb_t, M.reconstruct(model, pair_t))
    if variant == M.ModelVariant.VAE:
        loss = None
        for xb in (xb_c, xb_t):
            mu, logvar = M.vae_posterior(model, xb)
            z = _reparam_sample(mu, logvar, rng_noise)
            xhat = model.decoder(z)
            mse = ad.scale(ad.frobenius_sq(ad.sub(xb, xhat)), 1.0 / xb.shape[0])
            term = ad.add(mse, L.vae_kl(mu, logvar))
            loss = term if loss is None else ad.add(loss, term)
        return loss
    loss = L.base_loss(xb_c, xb_t, model, w)
    if variant in (M.ModelVariant.CODE_AE_MMD, M.ModelVariant.DSN_MMD):
        z_c = M.alignment_embedding(model, M.encode(model, xb_c, "cell_line"))
        z_t = M.alignment_embedding(model, M.encode(model, xb_t, "tissue"))
        loss = ad.add(loss, ad.scale(L.mmd_loss(z_c, z_t), w.beta))
    elif variant == M.ModelVariant.CORAL:
        z_c = M.encode(model, xb_c, "cell_line").shared
        z_t = M.encode(model, xb_t, "tissue").shared
        loss = ad.add(loss, ad.scale(L.coral_loss(z_c, z_t), w.beta))
    return loss


def pretrain(model, X_c, X_t, schedule):
    """Self-supervised pretraining; adversarial variants follow the warm-up /
    alternating-update procedure, everything else minimizes its objective on
    every batch."""
    if X_c.n_samples == 0 or X_t.n_samples == 0:
        raise ValueError("pretrain needs non-empty datasets for both domains")
    if X_c.feature_names != X_t.feature_names:
        raise ValueError("cell-line and tissue feature sets differ")
    if model.variant == M.ModelVariant.MLP_ONLY:
        return model, RunTrace()  # no pretraining by definition

    start = time.monotonic()
    trace = RunTrace()
    w = schedule.weights
    rng_batch = substream(schedule.seed, "batching", model.variant.value)
    rng_noise = substream(schedule.seed, "noise", model.variant.value)
    rng_eps = substream(schedule.seed, "interp", model.variant.value)
    gen_opt = Adam(model.generator_parameters(), lr=schedule.pretrain_lr)
    adversarial = model.variant in M.ADVERSARIAL_VARIANTS
    critic_opt = Adam(model.critic.parameters(), lr=schedule.pretrain_lr) \
        if adversarial else None
    mat_c, mat_t = X_c.matrix, X_t.matrix

    def gen_step(loss):
        grads = ad.backward(loss)
        gen_opt.step(grads)
        return loss.item()

    if adversarial:
        for epoch in range(1, schedule.warmup_epochs + 1):
            vals = []
            for idx_c, idx_t in _epoch_batches(rng_batch, X_c.n_samples,
                                               X_t.n_samples, schedule.batch_size):
                loss = L.base_loss(_batch_tensor(mat_c, idx_c),
                                   _batch_tensor(mat_t, idx_t), model, w)
                vals.append(gen_step(loss))
                trace.warmup_updates += 1
            trace.record(epoch, "warmup_base", np.mean(vals) if vals else np.nan)
        for epoch in range(1, schedule.train_epochs + 1):
            c_vals, g_vals = [], []
            batches = _epoch_batches(rng_batch, X_c.n_samples, X_t.n_samples,
                                     schedule.batch_size)
            for t, (idx_c, idx_t) in enumerate(batches, start=1):
                xb_c = _batch_tensor(mat_c, idx_c)
                xb_t = _batch_tensor(mat_t, idx_t)
                with ad.no_grad():
                    z_c = M.alignment_embedding(model, M.encode(model, xb_c, "cell_line"))
                    z_t = M.alignment_embedding(model, M.encode(model, xb_t, "tissue"))
                closs = L.critic_loss(model.critic, z_c, z_t, w.lambda_gp, rng_eps)
                critic_opt.step(ad.backward(closs))
                trace.critic_updates += 1
                c_vals.append(closs.item())
                if t % schedule.critic_steps == 0:
                    base = L.base_loss(xb_c, xb_t, model, w)
                    z_t_live = M.alignment_embedding(
                        model, M.encode(model, xb_t, "tissue"))
                    total = ad.add(base, ad.scale(
                        L.gen_loss(model.critic, z_t_live), w.lambda_gen))
                    g_vals.append(gen_step(total))
                    trace.generator_updates += 1
            trace.record(epoch, "critic", np.mean(c_vals) if c_vals else np.nan)
            trace.record(epoch, "gen_total", np.mean(g_vals) if g_vals else np.nan)
    else:
        for epoch in range(1, schedule.train_epochs + 1):
            vals = []
            for idx_c, idx_t in _epoch_batches(rng_batch, X_c.n_samples,
                                               X_t.n_samples, schedule.batch_size):
                loss = _nonadv_step_loss(model, _batch_tensor(mat_c, idx_c),
                                         _batch_tensor(mat_t, idx_t),
                                         schedule, rng_noise)
                vals.append(gen_step(loss))
            trace.record(epoch, "total", np.mean(vals) if vals else np.nan)

    trace.wall_time = time.monotonic() - start
    return model, trace


def _balanced_epoch_indices(labels, idx, rng, oversample):
    """Per-epoch sample order; with oversampling the minority class is drawn
    with replacement up to parity."""
    idx = np.asarray(idx)
    if not oversample:
        return idx[rng.permutation(len(idx))]
    y = labels[idx]
    pos, neg = idx[y == 1], idx[y == 0]
    minority, majority = (pos, neg) if len(pos) < len(neg) else (neg, pos)
    if len(minority) == 0:
        return idx[rng.permutation(len(idx))]
    extra = rng.choice(minority, size=len(majority) - len(minority), replace=True) \
        if len(majority) > len(minority) else np.empty(0, dtype=idx.dtype)
    combined = np.concatenate([majority, minority, extra])
    return combined[rng.permutation(len(combined))]


def _predict_probs(model, matrix, domain, batch=512):
    out = []
    with ad.no_grad():
        for i in range(0, matrix.shape[0], batch):
            out.append(M.classify(model, Tensor(matrix[i:i + batch]), domain).data)
    return np.concatenate(out)


def finetune(model, train_ds, val_ds, schedule, seed_tags=()):
    """Supervised fine-tuning of the classifier head, then gradual unfreezing
    of the shared encoder at a decayed learning rate, with early stopping on
    validation AUROC (best checkpoint returned, ties -> earliest epoch)."""
    if train_ds.labels is None or val_ds.labels is None:
        raise ValueError("finetune needs labeled datasets")
    counts = np.bincount(train_ds.labels, minlength=2)
    if counts[0] == 0 or counts[1] == 0:
        raise ValueError(
            f"training fold has a single class: {counts[1]} positive / "
            f"{counts[0]} negative")
    train_ids = set(train_ds.sample_ids)
    if train_ids & set(val_ds.sample_ids):
        raise ValueError("validation fold overlaps the training folds")

    start = time.monotonic()
    trace = RunTrace()
    rng = substream(schedule.seed, "finetune", *seed_tags)
    if model.head is None:
        M.attach_head(model, substream(schedule.seed, "head-init", *seed_tags))

    frozen_shared = [p.data.copy() for p in model.shared_encoder.parameters()]
    opt = Adam(model.head.parameters(), lr=schedule.finetune_lr)
    unfrozen = False
    best = None  # (auroc, epoch, model copy)
    stale = 0
    labels = train_ds.labels
    mat = train_ds.matrix
    n = len(labels)

    for epoch in range(1, schedule.finetune_max_epochs + 1):
        if not unfrozen and epoch > schedule.unfreeze_epoch:
            # sanity: phase 1 must not have touched the encoder
            for p, ref in zip(model.shared_encoder.parameters(), frozen_shared):
                assert np.array_equal(p.data, ref)
            opt = Adam(model.head.parameters() + model.shared_encoder.parameters(),
                       lr=schedule.finetune_lr * schedule.lr_decay)
            unfrozen = True
        order = _balanced_epoch_indices(labels, np.arange(n), rng,
                                        schedule.oversample_minority)
        vals = []
        for i in range(0, len(order) - schedule.batch_size + 1, schedule.batch_size):
            idx = order[i:i + schedule.batch_size]
            if unfrozen:
                probs = M.classify(model, Tensor(mat[idx]), "cell_line")
            else:
                with ad.no_grad():
                    emb = M.encode(model, Tensor(mat[idx]), "cell_line").shared
                probs = ad.reshape(model.head(emb), (len(idx),))
            loss = L.bce_loss(probs, labels[idx].astype(np.float64))
            opt.step(ad.backward(loss))
            vals.append(loss.item())
        trace.record(epoch, "bce", np.mean(vals) if vals else np.nan)

        val_scores = _predict_probs(model, val_ds.matrix, "cell_line")
        val_auroc = auroc(val_scores, val_ds.labels)
        trace.record(epoch, "val_auroc", val_auroc)
        if best is None or val_auroc > best[0] + 1e-12:
            best = (val_auroc, epoch, model.copy())
            stale = 0
        else:
            stale += 1
            if stale >= schedule.patience:
                trace.early_stop_epoch = epoch
                break

    trace.wall_time = time.monotonic() - start
    return best[2], trace


@dataclass
class ProtocolConfig:
    variants: list
    schedule: TrainingSchedule
    embed_dim: int = 16
    encoder_hidden: tuple = (64,)
    decoder_hidden: tuple = (64,)
    critic_hidden: tuple = (32, 16)
    head_hidden: tuple = (32, 16)
    n_folds: int = 10
    seed: int = 0


def _model_config(cfg, variant, input_dim):
    return M.ModelConfig(variant=variant, input_dim=input_dim,
                         embed_dim=cfg.embed_dim,
                         encoder_hidden=tuple(cfg.encoder_hidden),
                         decoder_hidden=tuple(cfg.decoder_hidden),
                         critic_hidden=tuple(cfg.critic_hidden),
                         head_hidden=tuple(cfg.head_hidden))


def run_variant(cfg, variant, X_c, X_t, folds):
    """Pretrain one variant, then fine-tune/evaluate per held-out fold.
    Returns (records, details) where details carries protocol-hygiene data."""
    variant = M.ModelVariant(variant)
    schedule = replace(cfg.schedule, seed=cfg.seed)
    model0 = M.build_model(_model_config(cfg, variant, X_c.n_features),
                           substream(cfg.seed, "init", variant.value))
    if variant != M.ModelVariant.MLP_ONLY:
        pretrain(model0, X_c, X_t, schedule)
    records = []
    finetune_ids = set()
    for fold in range(cfg.n_folds):
        val_idx = np.nonzero(folds == fold)[0]
        tr_idx = np.nonzero(folds != fold)[0]
        train_ds, val_ds = X_c.subset_samples(tr_idx), X_c.subset_samples(val_idx)
        m = model0.copy()
        M.attach_head(m, substream(cfg.seed, "head-init", variant.value, fold))
        m, _ = finetune(m, train_ds, val_ds, schedule,
                        seed_tags=(variant.value, fold))
        finetune_ids.update(train_ds.sample_ids)
        finetune_ids.update(val_ds.sample_ids)
        test_scores = _predict_probs(m, X_t.matrix, "tissue")
        records.append((variant.value, cfg.seed, fold, "auroc",
                        auroc(test_scores, X_t.labels)))
    details = {"finetune_sample_ids": sorted(finetune_ids),
               "test_sample_ids": sorted(X_t.sample_ids)}
    return records, details


def run_protocol(cfg, X_c, X_t, jobs=1):
    """Full protocol: per variant, pretrain once on the unlabeled pool, then
    ``n_folds`` fine-tune/evaluate iterations; per-variant AUROC records plus
    pairwise significance tests come back in one report."""
    if X_c.labels is None or X_t.labels is None:
        raise ValueError("protocol needs labels on both datasets")
    strata = X_c.strata if X_c.strata is not None else ["all"] * X_c.n_samples
    strata, merged = merge_small_strata(strata, min_size=cfg.n_folds)
    if merged:
        log.warning("merged %d small strata into 'other': %s", len(merged), merged)
    folds = stratified_kfold(strata, k=cfg.n_folds,
                             seed=int(substream(cfg.seed, "folds").integers(2 ** 31)))
    report = EvalReport()
    details = {}
    variants = list(cfg.variants)
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {v: pool.submit(run_variant, cfg, v, X_c, X_t, folds)
                       for v in variants}
            results = {v: f.result() for v, f in futures.items()}
    else:
        results = {v: run_variant(cfg, v, X_c, X_t, folds) for v in variants}
    for v in sorted(results, key=str):
        records, det = results[v]
        for rec in records:
            report.add(*rec)
        details[str(v)] = det
    return report, details
