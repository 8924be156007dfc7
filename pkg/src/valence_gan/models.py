"""The four compared architectures, built from one shared conv stack.

BasicCNN / MultitaskCNN are the supervised baselines: the identical
4-layer stride-2 conv stack with task heads but no generator and no
real/fake head. BasicDCGAN / MultitaskDCGAN add the generator and the
adversarial head; Basic kinds drop the activation head.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError
from .layers import BatchNorm2D, Conv2D, Dense, TransposedConv2D
from .tensor import Tensor, load_tensor, save_tensor

KINDS = ("BasicCNN", "MultitaskCNN", "BasicDCGAN", "MultitaskDCGAN")

SPEC_HEIGHT = 128  # spectrogram bands; conv stack halves 128 -> 8 in 4 layers


@dataclass
class ModelConfig:
    kind: str
    crop_width: int = 64
    filter_size: int = 3
    num_filters: int = 32
    batch_size: int = 64
    learning_rate: float = 1e-3
    latent_dim: int = 100
    shared_dense_dim: int = 128

    def validate(self):
        problems = []
        if self.kind not in KINDS:
            problems.append(f"kind {self.kind!r} not in {KINDS}")
        if self.crop_width not in (64, 128):
            problems.append(f"crop_width {self.crop_width} not in {{64, 128}}")
        else:
            if not (2 <= self.filter_size <= self.crop_width // 8):
                problems.append(
                    f"filter_size {self.filter_size} outside [2, {self.crop_width // 8}]")
        if not (32 <= self.num_filters <= 90 and (self.num_filters - 32) % 4 == 0):
            problems.append(
                f"num_filters {self.num_filters} not in {{32, 36, ..., 88}}")
        if self.batch_size not in (64, 128, 256):
            problems.append(f"batch_size {self.batch_size} not in {{64, 128, 256}}")
        if self.learning_rate not in (1e-3, 1e-4, 1e-5):
            problems.append(
                f"learning_rate {self.learning_rate} not in {{1e-3, 1e-4, 1e-5}}")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    @property
    def is_multitask(self):
        return self.kind in ("MultitaskCNN", "MultitaskDCGAN")

    @property
    def is_gan(self):
        return self.kind in ("BasicDCGAN", "MultitaskDCGAN")

    @property
    def conv_out_shape(self):
        return (self.num_filters, SPEC_HEIGHT // 16, self.crop_width // 16)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d).validate()


class Discriminator:
    """Shared conv stack plus real/fake, valence, and activation heads.

    The real/fake head reads the flattened conv features directly; the
    task heads go through one shared dense layer.
    """

    def __init__(self, config, rng):
        f, k = config.num_filters, config.filter_size
        self.config = config
        self.convs = [Conv2D(1 if i == 0 else f, f, k, rng) for i in range(4)]
        flat = int(np.prod(config.conv_out_shape))
        self.has_gan_head = config.is_gan
        self.rf_head = Dense(flat, 1, rng) if config.is_gan else None
        self.shared = Dense(flat, config.shared_dense_dim, rng)
        self.val_head = Dense(config.shared_dense_dim, 5, rng)
        self.act_head = (Dense(config.shared_dense_dim, 5, rng)
                         if config.is_multitask else None)

    def features(self, x):
        """Conv stack + flatten: [B,1,128,w] -> [B, F*8*(w/16)]."""
        h = x
        for conv in self.convs:
            h = conv(h).leaky_relu(0.2)
        b = h.shape[0]
        return h.reshape(b, int(np.prod(h.shape[1:])))

    def forward(self, x):
        """Returns (real_prob [B,1] or None, valence [B,5], activation [B,5] or None)."""
        flat = self.features(x)
        real = self.rf_head(flat).sigmoid() if self.rf_head is not None else None
        hidden = self.shared(flat).leaky_relu(0.2)
        valence = self.val_head(hidden).softmax()
        activation = (self.act_head(hidden).softmax()
                      if self.act_head is not None else None)
        return real, valence, activation

    def real_score(self, x):
        if self.rf_head is None:
            raise ContractError(f"{self.config.kind} has no real/fake head")
        return self.rf_head(self.features(x)).sigmoid()

    def conv_parameters(self):
        return [(f"conv{i}.{n}", p)
                for i, c in enumerate(self.convs) for n, p in c.parameters()]

    def named_groups(self):
        groups = {"disc": self.conv_parameters(),
                  "shared": [(f"shared.{n}", p) for n, p in self.shared.parameters()],
                  "val_head": [(f"val_head.{n}", p) for n, p in self.val_head.parameters()]}
        if self.rf_head is not None:
            groups["disc"] = groups["disc"] + [
                (f"rf_head.{n}", p) for n, p in self.rf_head.parameters()]
        if self.act_head is not None:
            groups["act_head"] = [(f"act_head.{n}", p) for n, p in self.act_head.parameters()]
        return groups


class Generator:
    """Latent vectors -> tanh spectrogram crops of shape [B,1,128,w]."""

    def __init__(self, config, rng):
        f = config.num_filters
        k = config.filter_size
        self.config = config
        self.seed_shape = config.conv_out_shape
        self.project = Dense(config.latent_dim, int(np.prod(self.seed_shape)), rng)
        self.bns = [BatchNorm2D(f) for _ in range(4)]
        self.tconvs = [TransposedConv2D(f, f, k, rng) for _ in range(3)]
        self.tconvs.append(TransposedConv2D(f, 1, k, rng))

    def forward(self, z, train=True):
        b = z.shape[0]
        h = self.project(z).reshape(b, *self.seed_shape)
        h = self.bns[0](h, train=train).relu()
        for i, tconv in enumerate(self.tconvs[:-1]):
            h = self.bns[i + 1](tconv(h), train=train).relu()
        return self.tconvs[-1](h).tanh()

    def named_parameters(self):
        params = [(f"project.{n}", p) for n, p in self.project.parameters()]
        for i, bn in enumerate(self.bns):
            params += [(f"bn{i}.{n}", p) for n, p in bn.parameters()]
        for i, tconv in enumerate(self.tconvs):
            params += [(f"tconv{i}.{n}", p) for n, p in tconv.parameters()]
        return params


@dataclass
class ModelBundle:
    config: ModelConfig
    discriminator: Discriminator
    generator: Generator | None

    def named_groups(self):
        groups = self.discriminator.named_groups()
        if self.generator is not None:
            groups["gen"] = self.generator.named_parameters()
        return groups

    def all_parameters(self):
        return [(f"{g}.{n}", p)
                for g, params in sorted(self.named_groups().items())
                for n, p in params]


def build(config, rng):
    """Construct the model bundle for a validated config."""
    config.validate()
    disc = Discriminator(config, rng)
    gen = Generator(config, rng) if config.is_gan else None
    return ModelBundle(config=config, discriminator=disc, generator=gen)


def discriminate(bundle, batch):
    """Run the discriminator on a [B,1,128,w] crop batch (numpy or Tensor)."""
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=np.float32))
    if x.data.ndim != 4 or x.shape[1] != 1 or x.shape[2] != SPEC_HEIGHT \
            or x.shape[3] != bundle.config.crop_width:
        raise ContractError(
            f"expected [B,1,{SPEC_HEIGHT},{bundle.config.crop_width}] crops, got {x.shape}")
    return bundle.discriminator.forward(x)


def generate(bundle, z, train=True):
    """Run the generator on a [B, latent_dim] latent batch."""
    if bundle.generator is None:
        raise ContractError(f"{bundle.config.kind} has no generator")
    zt = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=np.float32))
    if zt.data.ndim != 2 or zt.shape[1] != bundle.config.latent_dim:
        raise ContractError(
            f"expected [B,{bundle.config.latent_dim}] latents, got {zt.shape}")
    return bundle.generator.forward(zt, train=train)


# -- checkpointing --------------------------------------------------------------


def save_checkpoint(directory, bundle):
    """Write every parameter as a tensor snapshot plus a JSON manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"config": bundle.config.to_dict(), "groups": {}}
    for group, params in sorted(bundle.named_groups().items()):
        manifest["groups"][group] = []
        for name, p in params:
            fname = f"{group}.{name}.vgt".replace("/", "_")
            save_tensor(directory / fname, p)
            manifest["groups"][group].append({"name": name, "file": fname})
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(directory, bundle):
    """Restore parameters saved by save_checkpoint into an equal-config bundle."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    groups = bundle.named_groups()
    for group, entries in manifest["groups"].items():
        if group not in groups:
            raise ContractError(f"checkpoint group '{group}' missing from model")
        by_name = dict(groups[group])
        for entry in entries:
            if entry["name"] not in by_name:
                raise ContractError(
                    f"checkpoint parameter '{group}.{entry['name']}' missing from model")
            p = by_name[entry["name"]]
            loaded = load_tensor(directory / entry["file"])
            if loaded.shape != p.shape:
                raise ContractError(
                    f"checkpoint {group}.{entry['name']}: shape {loaded.shape} != {p.shape}")
            p.data = loaded.data.astype(p.data.dtype)
