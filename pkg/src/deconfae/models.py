"""Model assembly: shared/private factorized autoencoders and baselines.

A model bundle holds up to six networks: the weight-tied shared encoder, two
private encoders, the decoder, an optional critic and an optional classifier
head.  Which networks exist, and which embedding the alignment machinery
sees, is decided by the variant dispatch tables below.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor


class ModelVariant(str, Enum):
    CODE_AE_BASE = "CODE_AE_BASE"
    CODE_AE_MMD = "CODE_AE_MMD"
    CODE_AE_ADV = "CODE_AE_ADV"
    AE = "AE"
    DAE = "DAE"
    VAE = "VAE"
    DSN_MMD = "DSN_MMD"
    DSN_ADV = "DSN_ADV"
    ADAE = "ADAE"
    CORAL = "CORAL"
    MLP_ONLY = "MLP_ONLY"


FACTORIZED_VARIANTS = frozenset({
    ModelVariant.CODE_AE_BASE, ModelVariant.CODE_AE_MMD, ModelVariant.CODE_AE_ADV,
    ModelVariant.DSN_MMD, ModelVariant.DSN_ADV,
})

ADVERSARIAL_VARIANTS = frozenset({
    ModelVariant.CODE_AE_ADV, ModelVariant.DSN_ADV, ModelVariant.ADAE,
})

# What the alignment loss (MMD or critic) operates on.
ALIGNMENT_TARGET = {
    ModelVariant.CODE_AE_BASE: "concat",
    ModelVariant.CODE_AE_MMD: "concat",
    ModelVariant.CODE_AE_ADV: "concat",
    ModelVariant.DSN_MMD: "shared",
    ModelVariant.DSN_ADV: "shared",
    ModelVariant.ADAE: "single",
    ModelVariant.CORAL: "single",
}

DOMAINS = ("cell_line", "tissue")


@dataclass
class ModelConfig:
    variant: ModelVariant
    input_dim: int
    embed_dim: int = 128
    encoder_hidden: tuple = (512, 256)
    decoder_hidden: tuple = (256, 512)
    critic_hidden: tuple = (64, 32)
    head_hidden: tuple = (64, 32)
    with_head: bool = False

    def __post_init__(self):
        self.variant = ModelVariant(self.variant)
        if self.input_dim <= 0:
            raise ValueError(f"input_dim must be positive, got {self.input_dim}")
        if self.embed_dim <= 0:
            raise ValueError(f"embed_dim must be positive, got {self.embed_dim}")


@dataclass
class EmbeddingPair:
    shared: Tensor
    private: Tensor | None
    domain: str


@dataclass
class CodeAeModel:
    variant: ModelVariant
    config: ModelConfig
    shared_encoder: nn.Mlp
    decoder: nn.Mlp | None
    cell_private_encoder: nn.Mlp | None = None
    tissue_private_encoder: nn.Mlp | None = None
    critic: nn.Mlp | None = None
    head: nn.Mlp | None = None
    logvar_encoder: nn.Mlp | None = None  # VAE only

    def networks(self):
        out = {"shared_encoder": self.shared_encoder}
        for name in ("decoder", "cell_private_encoder", "tissue_private_encoder",
                     "critic", "head", "logvar_encoder"):
            net = getattr(self, name)
            if net is not None:
                out[name] = net
        return out

    def named_parameters(self):
        out = {}
        for name, net in self.networks().items():
            out.update(net.named_parameters(prefix=name + "."))
        return out

    def generator_parameters(self):
        """Everything the reconstruction/alignment objective updates: all
        networks except the critic and the classifier head."""
        params = []
        for name, net in self.networks().items():
            if name in ("critic", "head"):
                continue
            params.extend(net.parameters())
        return params

    def copy(self):
        kwargs = {}
        for name, net in self.networks().items():
            kwargs[name] = net.copy()
        for name in ("decoder", "cell_private_encoder", "tissue_private_encoder",
                     "critic", "head", "logvar_encoder"):
            kwargs.setdefault(name, None)
        return CodeAeModel(variant=self.variant, config=self.config, **kwargs)


def build_model(config, rng, with_head=None):
    """Instantiate the network set a variant needs."""
    config = config if isinstance(config, ModelConfig) else ModelConfig(**config)
    variant = config.variant
    d, k = config.input_dim, config.embed_dim
    head_wanted = config.with_head if with_head is None else with_head

    def encoder():
        return nn.Mlp.build(d, config.encoder_hidden, k, rng,
                            final_instance_norm=True)

    factorized = variant in FACTORIZED_VARIANTS
    dec_in = 2 * k if factorized else k

    shared = encoder()
    logvar = None
    decoder = nn.Mlp.build(dec_in, config.decoder_hidden, d, rng)
    cell_p = tissue_p = None
    if factorized:
        cell_p, tissue_p = encoder(), encoder()
    if variant == ModelVariant.VAE:
        # mean path keeps the plain encoder; a parallel encoder emits logvar
        shared = nn.Mlp.build(d, config.encoder_hidden, k, rng)
        logvar = nn.Mlp.build(d, config.encoder_hidden, k, rng)
    if variant == ModelVariant.MLP_ONLY:
        decoder = None

    critic = None
    if variant in ADVERSARIAL_VARIANTS:
        critic_in = 2 * k if ALIGNMENT_TARGET[variant] == "concat" else k
        critic = nn.Mlp.build(critic_in, config.critic_hidden, 1, rng)

    head = None
    if head_wanted:
        head = nn.Mlp.build(k, config.head_hidden, 1, rng,
                            output_activation="sigmoid")

    return CodeAeModel(variant=variant, config=config, shared_encoder=shared,
                       decoder=decoder, cell_private_encoder=cell_p,
                       tissue_private_encoder=tissue_p, critic=critic,
                       head=head, logvar_encoder=logvar)


def attach_head(model, rng):
    model.head = nn.Mlp.build(model.config.embed_dim, model.config.head_hidden,
                              1, rng, output_activation="sigmoid")
    return model


def encode(model, batch, domain):
    """Map a batch to its (shared, private) embedding pair; private is None
    for single-embedding variants.  VAE returns the posterior mean."""
    if domain not in DOMAINS:
        raise ValueError(f"unknown domain {domain!r}, expected one of {DOMAINS}")
    shared = model.shared_encoder(batch)
    private = None
    if model.variant in FACTORIZED_VARIANTS:
        enc = (model.cell_private_encoder if domain == "cell_line"
               else model.tissue_private_encoder)
        private = enc(batch)
    return EmbeddingPair(shared=shared, private=private, domain=domain)


def vae_posterior(model, batch):
    if model.variant != ModelVariant.VAE:
        raise ValueError("vae_posterior is only defined for the VAE variant")
    return model.shared_encoder(batch), model.logvar_encoder(batch)


def alignment_embedding(model, pair):
    """The embedding the alignment loss sees: concatenation for the
    factorized deconfounding variants, shared only for DSN, the single
    embedding otherwise."""
    target = ALIGNMENT_TARGET.get(model.variant)
    if target is None:
        raise ValueError(f"variant {model.variant} has no alignment target")
    if target == "concat":
        return ad.concat_lastdim(pair.shared, pair.private)
    return pair.shared


def reconstruct(model, pair):
    if model.decoder is None:
        raise ValueError(f"variant {model.variant} has no decoder")
    k = model.config.embed_dim
    if pair.shared.shape[1] != k:
        raise ValueError(
            f"shared width {pair.shared.shape[1]} does not match embed dim {k}")
    if pair.private is not None:
        if pair.private.shape[1] != k:
            raise ValueError(
                f"private width {pair.private.shape[1]} does not match embed dim {k}")
        z = ad.concat_lastdim(pair.shared, pair.private)  # shared first, fixed
    else:
        z = pair.shared
    return model.decoder(z)


def save_model(model, path, extra_meta=None):
    """Persist all networks via the binary checkpoint format; variant and
    dims go into the metadata sidecar."""
    from . import nn as _nn

    meta = {
        "variant": model.variant.value,
        "input_dim": model.config.input_dim,
        "embed_dim": model.config.embed_dim,
        "encoder_hidden": list(model.config.encoder_hidden),
        "decoder_hidden": list(model.config.decoder_hidden),
        "critic_hidden": list(model.config.critic_hidden),
        "head_hidden": list(model.config.head_hidden),
        "with_head": model.head is not None,
    }
    if extra_meta:
        meta.update(extra_meta)
    _nn.save_checkpoint(model.named_parameters(), path, metadata=meta)


def load_model(path):
    from . import nn as _nn

    arrays, meta = _nn.load_checkpoint(path)
    if meta is None:
        raise ValueError(f"{path}: missing metadata sidecar")
    config = ModelConfig(
        variant=meta["variant"], input_dim=meta["input_dim"],
        embed_dim=meta["embed_dim"],
        encoder_hidden=tuple(meta["encoder_hidden"]),
        decoder_hidden=tuple(meta["decoder_hidden"]),
        critic_hidden=tuple(meta["critic_hidden"]),
        head_hidden=tuple(meta["head_hidden"]),
        with_head=meta.get("with_head", False))
    model = build_model(config, np.random.default_rng(0))
    params = model.named_parameters()
    if set(params) != set(arrays):
        missing = sorted(set(params) ^ set(arrays))
        raise ValueError(f"{path}: parameter names do not match model: {missing[:5]}")
    for name, tensor in params.items():
        if tensor.data.shape != arrays[name].shape:
            raise ValueError(
                f"{path}: shape mismatch for {name}: "
                f"{arrays[name].shape} vs {tensor.data.shape}")
        tensor.data = arrays[name].copy()
    return model, meta


def classify(model, batch, domain="cell_line"):
    """Classifier probabilities from the shared (deconfounded) embedding."""
    if model.head is None:
        raise ValueError("model has no classifier head")
    pair = encode(model, batch, domain)
    probs = model.head(pair.shared)
    return ad.reshape(probs, (batch.shape[0],))
