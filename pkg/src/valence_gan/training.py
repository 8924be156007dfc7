"""Losses and the alternating semi-supervised training loop.

Each step runs, in order: discriminator update on L_d = L_r + L_f,
generator update on L_g, valence classifier update, and (for multitask
kinds) activation classifier update. Task updates backpropagate through
the shared dense layer and the conv stack. CNN kinds skip the adversarial
updates. Every pathway owns its own Adam moments, mirroring one optimizer
per loss.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, NumericFault, ValidationError
from .layers import Adam
from .tensor import Tensor, backward

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7  # applied before every log so the losses cannot diverge

LOSS_CSV_HEADER = "step,l_d,l_g,l_val,l_act"


def cross_entropy(targets, preds):
    """Mean over the batch of -sum_i y_i log(clamp(yhat_i)).

    targets: constant [B,5] rows summing to 1; preds: [B,5] softmax output.
    """
    y = targets if isinstance(targets, Tensor) else Tensor(np.asarray(targets, dtype=np.float32))
    row_sums = y.data.sum(axis=-1)
    if not np.allclose(row_sums, 1.0, atol=1e-6):
        raise ValidationError("cross_entropy targets must be normalized rows")
    logp = preds.clip_min(PROB_CLAMP).log()
    n = y.data.shape[0]
    return (y * logp).sum() * (-1.0 / n)


def gan_losses(real_scores, fake_scores):
    """The four adversarial loss terms (L_r, L_f, L_d, L_g).

    L_r = -mean log(yhat_r); L_f = -mean log(1 - yhat_g); L_d = L_r + L_f;
    L_g = -mean log(yhat_g). Scores are clamped at 1e-7 away from {0, 1}.
    """
    if real_scores.data.size == 0 or fake_scores.data.size == 0:
        raise ContractError("gan_losses requires non-empty score batches")
    l_r = real_scores.clip_min(PROB_CLAMP).log().mean() * -1.0
    one_minus = (1.0 - fake_scores).clip_min(PROB_CLAMP)
    l_f = one_minus.log().mean() * -1.0
    l_d = l_r + l_f
    l_g = fake_scores.clip_min(PROB_CLAMP).log().mean() * -1.0
    return l_r, l_f, l_d, l_g


@dataclass
class Batch:
    """One training step's data."""

    labeled_crops: np.ndarray            # [B,1,128,w]
    valence_targets: np.ndarray          # [B,5]
    activation_targets: np.ndarray       # [B,5]
    unlabeled_crops: np.ndarray | None = None  # [B,1,128,w]
    z: np.ndarray | None = None          # [B,latent] for the discriminator update
    z2: np.ndarray | None = None         # fresh latents for the generator update


@dataclass
class TrainState:
    bundle: object
    optimizers: dict
    step: int = 0
    history: list = field(default_factory=list)  # dicts: step, l_d, l_g, l_val, l_act

    def loss_rows(self):
        def fmt(v):
            return "" if v is None else f"{v:.6f}"
        return [f"{h['step']},{fmt(h['l_d'])},{fmt(h['l_g'])},"
                f"{fmt(h['l_val'])},{fmt(h['l_act'])}" for h in self.history]


def init_train_state(bundle):
    """Create per-pathway Adam optimizers for a model bundle."""
    lr = bundle.config.learning_rate
    groups = bundle.named_groups()
    disc = bundle.discriminator
    opts = {
        "valence": Adam(disc.conv_parameters()
                        + [(f"shared.{n}", p) for n, p in disc.shared.parameters()]
                        + [(f"val_head.{n}", p) for n, p in disc.val_head.parameters()], lr),
    }
    if disc.act_head is not None:
        opts["activation"] = Adam(
            disc.conv_parameters()
            + [(f"shared.{n}", p) for n, p in disc.shared.parameters()]
            + [(f"act_head.{n}", p) for n, p in disc.act_head.parameters()], lr)
    if bundle.generator is not None:
        opts["disc"] = Adam(groups["disc"], lr)
        opts["gen"] = Adam(bundle.generator.named_parameters(), lr)
    return TrainState(bundle=bundle, optimizers=opts)


def snapshot_params(bundle):
    """Copy all parameter arrays and batchnorm running stats."""
    snap = {name: p.data.copy() for name, p in bundle.all_parameters()}
    if bundle.generator is not None:
        snap["__bn_stats__"] = [(bn.running_mean.copy(), bn.running_var.copy())
                                for bn in bundle.generator.bns]
    return snap


def restore_params(bundle, snap):
    for name, p in bundle.all_parameters():
        p.data = snap[name].copy()
    if bundle.generator is not None and "__bn_stats__" in snap:
        for bn, (mean, var) in zip(bundle.generator.bns, snap["__bn_stats__"]):
            bn.running_mean = mean.copy()
            bn.running_var = var.copy()


def _update(opt, loss):
    backward(loss)
    opt.step()
    opt.zero_grad()


def train_step(state, batch):
    """Run one alternating update step; rolls back on numeric faults."""
    bundle = state.bundle
    config = bundle.config
    pre = snapshot_params(bundle)
    record = {"step": state.step, "l_d": None, "l_g": None, "l_val": None, "l_act": None}
    try:
        if config.is_gan:
            if batch.unlabeled_crops is None or batch.z is None:
                raise ContractError("DCGAN kinds need unlabeled crops and latents")
            # (1) discriminator on real (labeled + unlabeled) vs generated
            real = Tensor(np.concatenate([batch.labeled_crops, batch.unlabeled_crops]))
            fake = bundle.generator.forward(Tensor(batch.z), train=True)
            fake_const = Tensor(fake.data.copy())  # block gradients into G
            _, _, l_d, _ = gan_losses(bundle.discriminator.real_score(real),
                                      bundle.discriminator.real_score(fake_const))
            _update(state.optimizers["disc"], l_d)
            record["l_d"] = float(l_d.data)

            # (2) generator on fresh latents; discriminator params get no update
            z2 = batch.z2 if batch.z2 is not None else batch.z
            fake2 = bundle.generator.forward(Tensor(z2), train=True)
            scores = bundle.discriminator.real_score(fake2)
            l_g = scores.clip_min(PROB_CLAMP).log().mean() * -1.0
            backward(l_g)
            state.optimizers["gen"].step()
            state.optimizers["gen"].zero_grad()
            for _, p in state.optimizers["disc"].named_params:
                p.grad = None  # discard L_g gradients that flowed through D
            record["l_g"] = float(l_g.data)

        # (3) valence classifier
        _, val_pred, _ = bundle.discriminator.forward(Tensor(batch.labeled_crops))
        l_val = cross_entropy(batch.valence_targets, val_pred)
        _update(state.optimizers["valence"], l_val)
        record["l_val"] = float(l_val.data)

        # (4) activation classifier (multitask kinds)
        if config.is_multitask:
            _, _, act_pred = bundle.discriminator.forward(Tensor(batch.labeled_crops))
            l_act = cross_entropy(batch.activation_targets, act_pred)
            _update(state.optimizers["activation"], l_act)
            record["l_act"] = float(l_act.data)
    except NumericFault as fault:
        restore_params(bundle, pre)
        log.warning("step %d aborted and rolled back: %s", state.step, fault)
        raise
    state.history.append(record)
    state.step += 1
    return state


class WrapSampler:
    """Round-robin sampler over a pool: reshuffles per wrap, no repeats within one."""

    def __init__(self, n_items, rng):
        self.n = n_items
        self.rng = rng
        self._order = []

    def draw(self, count):
        out = []
        while len(out) < count:
            if not self._order:
                self._order = list(self.rng.permutation(self.n))
            out.append(self._order.pop())
        return out


def run_epoch(state, labeled_provider, unlabeled_provider, shuffle_rng):
    """One full pass over the (oversampled) labeled set.

    labeled_provider(indices) -> Batch fields for those labeled items;
    unlabeled_provider(count) -> unlabeled crop array or None.
    """
    config = state.bundle.config
    n = labeled_provider.size
    order = shuffle_rng.permutation(n)
    batch_size = config.batch_size
    losses = []
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        batch = labeled_provider.make_batch(idx)
        if config.is_gan:
            batch.unlabeled_crops = unlabeled_provider.draw_crops(len(idx))
            batch.z = unlabeled_provider.draw_latents(len(idx), config.latent_dim)
            batch.z2 = unlabeled_provider.draw_latents(len(idx), config.latent_dim)
        train_step(state, batch)
        losses.append(state.history[-1])
    summary = {}
    for key in ("l_d", "l_g", "l_val", "l_act"):
        vals = [rec[key] for rec in losses if rec[key] is not None]
        summary[key] = float(np.mean(vals)) if vals else None
    summary["steps"] = len(losses)
    return summary
