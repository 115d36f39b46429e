"""Pretraining schedules (including the adversarial warm-up / alternating
update procedure), fine-tuning with gradual unfreezing, and the protocol
driver."""

import numpy as np
import pytest

from conftest import make_dataset
from deconfae import models as M
from deconfae import train as T
from deconfae.losses import LossWeights
from deconfae.train import TrainingSchedule, substream


def tiny_pair(n_c=24, n_t=24, d=8, seed=0):
    rng = np.random.default_rng(seed)
    ds_c = make_dataset(rng.normal(size=(n_c, d)).astype(np.float32),
                        domain="cell_line", prefix="C")
    ds_t = make_dataset(rng.normal(size=(n_t, d)).astype(np.float32),
                        domain="tissue", prefix="T")
    return ds_c, ds_t


def tiny_model(variant, d=8, seed=0):
    cfg = M.ModelConfig(variant=variant, input_dim=d, embed_dim=3,
                        encoder_hidden=(6,), decoder_hidden=(6,),
                        critic_hidden=(4,), head_hidden=(4,))
    return M.build_model(cfg, np.random.default_rng(seed))


def tiny_schedule(**kw):
    base = dict(batch_size=8, warmup_epochs=1, train_epochs=2, critic_steps=1,
                seed=0, finetune_max_epochs=3, patience=2, unfreeze_epoch=1)
    base.update(kw)
    return TrainingSchedule(**base)


# -- named RNG substreams -----------------------------------------------------

def test_substream_is_deterministic():
    a = substream(7, "batching", "AE").standard_normal(5)
    b = substream(7, "batching", "AE").standard_normal(5)
    np.testing.assert_array_equal(a, b)


def test_substream_tags_and_seed_change_the_stream():
    base = substream(7, "batching").standard_normal(5)
    assert not np.array_equal(base, substream(7, "noise").standard_normal(5))
    assert not np.array_equal(base, substream(8, "batching").standard_normal(5))
    assert not np.array_equal(base,
                              substream(7, "batching", 0).standard_normal(5))


# -- schedule validation ------------------------------------------------------

def test_schedule_validation():
    with pytest.raises(ValueError, match="batch_size"):
        TrainingSchedule(batch_size=1)
    with pytest.raises(ValueError, match="critic_steps"):
        TrainingSchedule(critic_steps=0)
    with pytest.raises(ValueError, match="patience"):
        TrainingSchedule(patience=0)


# -- epoch batching -----------------------------------------------------------

def test_epoch_batches_count_and_shape():
    rng = np.random.default_rng(0)
    batches = T._epoch_batches(rng, n_c=23, n_t=11, batch_size=4)
    assert len(batches) == 11 // 4
    for idx_c, idx_t in batches:
        assert len(idx_c) == len(idx_t) == 4


def test_epoch_batches_sample_without_replacement():
    rng = np.random.default_rng(1)
    batches = T._epoch_batches(rng, n_c=20, n_t=30, batch_size=5)
    seen_c = np.concatenate([c for c, _ in batches])
    seen_t = np.concatenate([t for _, t in batches])
    assert len(set(seen_c.tolist())) == len(seen_c)
    assert len(set(seen_t.tolist())) == len(seen_t)
    assert seen_c.max() < 20 and seen_t.max() < 30


def test_epoch_batches_empty_when_batch_exceeds_domain():
    rng = np.random.default_rng(2)
    assert T._epoch_batches(rng, n_c=3, n_t=100, batch_size=4) == []


# -- adversarial update accounting --------------------------------------------

@pytest.mark.parametrize("n_warm", [1, 2, 5])
@pytest.mark.parametrize("n_train", [1, 3])
@pytest.mark.parametrize("batch_size", [4, 10])
@pytest.mark.parametrize("critic_steps", [1, 2, 5])
def test_adversarial_update_counts(n_warm, n_train, batch_size, critic_steps):
    """Warm-up updates every batch; then the critic updates every batch and
    the generator every critic_steps-th batch."""
    n_c, n_t = 23, 21
    ds_c, ds_t = tiny_pair(n_c=n_c, n_t=n_t, d=6)
    sched = tiny_schedule(batch_size=batch_size, warmup_epochs=n_warm,
                          train_epochs=n_train, critic_steps=critic_steps)
    model = tiny_model("CODE_AE_ADV", d=6)
    _, trace = T.pretrain(model, ds_c, ds_t, sched)
    nb = min(n_c, n_t) // batch_size
    assert trace.warmup_updates == n_warm * nb
    assert trace.critic_updates == n_train * nb
    assert trace.generator_updates == n_train * (nb // critic_steps)


def test_warmup_leaves_critic_untouched():
    ds_c, ds_t = tiny_pair()
    model = tiny_model("CODE_AE_ADV")
    before = [p.data.copy() for p in model.critic.parameters()]
    T.pretrain(model, ds_c, ds_t,
               tiny_schedule(warmup_epochs=3, train_epochs=0))
    for p, ref in zip(model.critic.parameters(), before):
        np.testing.assert_array_equal(p.data, ref)


def test_warmup_does_update_the_generator():
    ds_c, ds_t = tiny_pair()
    model = tiny_model("CODE_AE_ADV")
    before = model.shared_encoder.layers[0].weight.data.copy()
    _, trace = T.pretrain(model, ds_c, ds_t,
                          tiny_schedule(warmup_epochs=2, train_epochs=0))
    assert trace.warmup_updates == 2 * (24 // 8)
    assert not np.array_equal(model.shared_encoder.layers[0].weight.data, before)


def test_nonadversarial_variants_skip_the_warmup_phase():
    ds_c, ds_t = tiny_pair()
    model = tiny_model("CODE_AE_MMD")
    _, trace = T.pretrain(model, ds_c, ds_t,
                          tiny_schedule(warmup_epochs=5, train_epochs=3))
    assert trace.warmup_updates == 0
    names = [n for _, n, _ in trace.records]
    assert names == ["total"] * 3


def test_mlp_only_pretrain_is_a_no_op():
    ds_c, ds_t = tiny_pair()
    model = tiny_model("MLP_ONLY")
    before = model.shared_encoder.layers[0].weight.data.copy()
    _, trace = T.pretrain(model, ds_c, ds_t, tiny_schedule())
    assert trace.records == []
    np.testing.assert_array_equal(model.shared_encoder.layers[0].weight.data,
                                  before)


def test_pretrain_rejects_empty_or_mismatched_datasets():
    ds_c, ds_t = tiny_pair()
    empty = ds_c.subset_samples([])
    with pytest.raises(ValueError, match="non-empty"):
        T.pretrain(tiny_model("AE"), empty, ds_t, tiny_schedule())
    narrower = ds_t.subset_features([0, 1, 2])
    with pytest.raises(ValueError, match="feature sets"):
        T.pretrain(tiny_model("AE"), ds_c, narrower, tiny_schedule())


@pytest.mark.parametrize("variant", ["AE", "DAE", "VAE", "CORAL", "DSN_MMD"])
def test_pretrain_runs_and_reduces_loss(variant):
    ds_c, ds_t = tiny_pair(n_c=48, n_t=48, seed=3)
    model = tiny_model(variant, seed=4)
    _, trace = T.pretrain(model, ds_c, ds_t,
                          tiny_schedule(train_epochs=20))
    totals = [v for _, n, v in trace.records if n == "total"]
    assert len(totals) == 20
    assert totals[-1] < totals[0]


def test_pretrain_determinism():
    ds_c, ds_t = tiny_pair()
    outs = []
    for _ in range(2):
        model = tiny_model("CODE_AE_ADV", seed=5)
        model, _ = T.pretrain(model, ds_c, ds_t, tiny_schedule(train_epochs=2))
        outs.append({n: p.data.copy()
                     for n, p in model.named_parameters().items()})
    assert set(outs[0]) == set(outs[1])
    for name in outs[0]:
        np.testing.assert_array_equal(outs[0][name], outs[1][name])


def test_base_objective_halves_within_fifty_epochs():
    """On structured data the reconstruction-plus-orthogonality objective
    after 50 epochs falls below half its first-epoch value."""
    rng = np.random.default_rng(6)
    z = rng.normal(size=(120, 3))
    mix = rng.normal(size=(3, 16))
    ds_c = make_dataset((z @ mix + 0.05 * rng.normal(size=(120, 16)))
                        .astype(np.float32), domain="cell_line", prefix="C")
    z2 = rng.normal(size=(120, 3))
    ds_t = make_dataset((z2 @ mix + 0.05 * rng.normal(size=(120, 16)))
                        .astype(np.float32), domain="tissue", prefix="T")
    cfg = M.ModelConfig(variant="CODE_AE_BASE", input_dim=16, embed_dim=4,
                        encoder_hidden=(16,), decoder_hidden=(16,))
    model = M.build_model(cfg, np.random.default_rng(7))
    sched = tiny_schedule(batch_size=32, train_epochs=50,
                          weights=LossWeights(alpha=1e-3))
    _, trace = T.pretrain(model, ds_c, ds_t, sched)
    totals = [v for _, n, v in trace.records if n == "total"]
    assert totals[49] < 0.5 * totals[0]


# -- trace bookkeeping --------------------------------------------------------

def test_trace_write_round_trip(tmp_path):
    trace = T.RunTrace()
    trace.record(1, "total", 2.5)
    trace.record(2, "total", 1.25)
    path = tmp_path / "trace.tsv"
    trace.write(path)
    lines = path.read_text().strip().split("\n")
    assert lines == ["1\ttotal\t2.5", "2\ttotal\t1.25"]


# -- balanced epoch ordering --------------------------------------------------

def test_balanced_indices_oversample_to_parity():
    labels = np.array([0] * 30 + [1] * 6)
    rng = np.random.default_rng(8)
    order = T._balanced_epoch_indices(labels, np.arange(36), rng, True)
    assert len(order) == 60
    assert (labels[order] == 1).sum() == 30
    assert set(order.tolist()) == set(range(36))  # every sample appears


def test_balanced_indices_plain_permutation_without_oversampling():
    labels = np.array([0] * 5 + [1] * 3)
    rng = np.random.default_rng(9)
    order = T._balanced_epoch_indices(labels, np.arange(8), rng, False)
    assert sorted(order.tolist()) == list(range(8))


# -- fine-tuning --------------------------------------------------------------

def labeled_pair(n_train=40, n_val=16, d=8, seed=10):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=d)
    X = rng.normal(size=(n_train + n_val, d)).astype(np.float32)
    y = (X @ w > 0).astype(np.int64)
    train = make_dataset(X[:n_train], domain="cell_line", labels=y[:n_train],
                         prefix="TR")
    val = make_dataset(X[n_train:], domain="cell_line", labels=y[n_train:],
                       prefix="VA")
    return train, val


def test_finetune_rejects_single_class_fold():
    train, val = labeled_pair()
    train.labels[:] = 1
    with pytest.raises(ValueError, match="single class"):
        T.finetune(tiny_model("AE"), train, val, tiny_schedule())


def test_finetune_rejects_overlapping_folds():
    train, _ = labeled_pair()
    with pytest.raises(ValueError, match="overlap"):
        T.finetune(tiny_model("AE"), train, train, tiny_schedule())


def test_finetune_head_phase_freezes_the_encoder():
    train, val = labeled_pair()
    model = tiny_model("AE")
    ref = {n: p.data.copy() for n, p in model.named_parameters().items()
           if n.startswith("shared_encoder")}
    tuned, _ = T.finetune(model, train, val,
                          tiny_schedule(finetune_max_epochs=3,
                                        unfreeze_epoch=99, patience=99))
    now = tuned.named_parameters()
    for name, before in ref.items():
        np.testing.assert_array_equal(now[name].data, before)


def test_finetune_unfreezing_updates_the_encoder():
    train, val = labeled_pair()
    model = tiny_model("AE")
    before = model.shared_encoder.layers[0].weight.data.copy()
    sched = tiny_schedule(finetune_max_epochs=4, unfreeze_epoch=1, patience=99,
                          finetune_lr=1e-2, lr_decay=1.0)
    tuned, _ = T.finetune(model, train, val, sched)
    assert not np.array_equal(tuned.shared_encoder.layers[0].weight.data,
                              before)


def test_finetune_early_stops_when_validation_stalls():
    train, val = labeled_pair()
    model = tiny_model("AE")
    # zero learning rate: validation AUROC never improves after epoch 1
    sched = tiny_schedule(finetune_max_epochs=50, patience=3,
                          unfreeze_epoch=99, finetune_lr=0.0)
    _, trace = T.finetune(model, train, val, sched)
    assert trace.early_stop_epoch == 1 + 3
    epochs = [e for e, n, _ in trace.records if n == "val_auroc"]
    assert max(epochs) == 4


def test_finetune_returns_best_epoch_copy():
    train, val = labeled_pair(seed=11)
    model = tiny_model("AE", seed=12)
    sched = tiny_schedule(finetune_max_epochs=12, patience=99,
                          unfreeze_epoch=4, finetune_lr=5e-3)
    tuned, trace = T.finetune(model, train, val, sched)
    aurocs = {e: v for e, n, v in trace.records if n == "val_auroc"}
    best_val = max(aurocs.values())
    probs = T._predict_probs(tuned, val.matrix, "cell_line")
    from deconfae.evaluation import auroc
    assert auroc(probs, val.labels) == pytest.approx(best_val, abs=1e-12)


def test_finetuned_validation_auroc_beats_permutation_null():
    """After pretraining and fine-tuning on synthetic labels, validation
    AUROC exceeds 0.5 + 3 sigma of a 20-permutation label-shuffle null."""
    from deconfae import data as D
    from deconfae.evaluation import auroc

    ds_c, ds_t, _ = D.synth_generate(D.SynthSpec(
        n_per_domain=350, dim=20, shared_rank=4, confounder_strength=1.0,
        seed=21))
    cfg = M.ModelConfig(variant="CODE_AE_ADV", input_dim=20, embed_dim=8,
                        encoder_hidden=(16,), decoder_hidden=(16,),
                        critic_hidden=(8,), head_hidden=(8,))
    sched = TrainingSchedule(batch_size=16, warmup_epochs=2, train_epochs=10,
                             critic_steps=1, seed=0, finetune_max_epochs=30,
                             patience=30, unfreeze_epoch=10, finetune_lr=1e-2)
    base = M.build_model(cfg, substream(0, "init", "CODE_AE_ADV"))
    base, _ = T.pretrain(base, ds_c, ds_t, sched)

    train = ds_c.subset_samples(np.arange(150))
    val = ds_c.subset_samples(np.arange(150, 350))

    def val_auroc_with(train_labels):
        shuffled = train.subset_samples(np.arange(150))
        shuffled.labels = train_labels
        model = base.copy()
        M.attach_head(model, substream(0, "head-init"))
        model, _ = T.finetune(model, shuffled, val, sched)
        return auroc(T._predict_probs(model, val.matrix, "cell_line"),
                     val.labels)

    real = val_auroc_with(train.labels)
    rng = np.random.default_rng(0)
    null = [val_auroc_with(rng.permutation(train.labels)) for _ in range(20)]
    assert real > 0.5 + 3.0 * np.std(null), (real, float(np.std(null)))


# -- protocol driver ----------------------------------------------------------

def protocol_setup(seed=13):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=6)
    Xc = rng.normal(size=(60, 6)).astype(np.float32)
    Xt = rng.normal(size=(30, 6)).astype(np.float32)
    ds_c = make_dataset(Xc, domain="cell_line",
                        labels=(Xc @ w > 0).astype(np.int64), prefix="C")
    ds_t = make_dataset(Xt, domain="tissue",
                        labels=(Xt @ w > 0).astype(np.int64), prefix="T")
    sched = tiny_schedule(batch_size=8, warmup_epochs=1, train_epochs=1,
                          finetune_max_epochs=2, unfreeze_epoch=1, patience=2)
    cfg = T.ProtocolConfig(variants=["MLP_ONLY", "AE"], schedule=sched,
                           embed_dim=3, encoder_hidden=(6,),
                           decoder_hidden=(6,), critic_hidden=(4,),
                           head_hidden=(4,), n_folds=3, seed=1)
    return cfg, ds_c, ds_t


def test_run_protocol_record_counts_and_hygiene():
    cfg, ds_c, ds_t = protocol_setup()
    report, details = T.run_protocol(cfg, ds_c, ds_t)
    assert sorted(report.variants()) == ["AE", "MLP_ONLY"]
    for variant in ("AE", "MLP_ONLY"):
        assert len(report.values(variant, "auroc")) == 3
        det = details[variant]
        # test samples never enter fine-tuning
        assert not set(det["finetune_sample_ids"]) & set(det["test_sample_ids"])
        assert det["test_sample_ids"] == sorted(ds_t.sample_ids)


def test_run_protocol_is_deterministic():
    cfg, ds_c, ds_t = protocol_setup()
    r1, _ = T.run_protocol(cfg, ds_c, ds_t)
    r2, _ = T.run_protocol(cfg, ds_c, ds_t)
    for variant in r1.variants():
        np.testing.assert_array_equal(r1.values(variant, "auroc"),
                                      r2.values(variant, "auroc"))


def test_run_protocol_requires_labels():
    cfg, ds_c, ds_t = protocol_setup()
    ds_t.labels = None
    with pytest.raises(ValueError, match="labels"):
        T.run_protocol(cfg, ds_c, ds_t)
