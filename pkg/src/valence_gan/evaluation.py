"""Evaluation protocol: session folds, early stopping, metrics, and search.

Five leave-one-session-out folds; within the held-out session one speaker
validates and the other tests. Training stops after five consecutive
epochs below the best validation accuracy, weights are restored to the
best epoch, and test metrics are unweighted per-class accuracy (5- and
3-class), Pearson correlation of expected-value decodings, and a
row-normalized confusion matrix.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import audio, labels, models, training
from .errors import ConfigError, ProtocolError
from .tensor import Tensor

log = logging.getLogger(__name__)


# -- folds ----------------------------------------------------------------------


@dataclass
class FoldSplit:
    index: int
    train_sessions: list
    held_session: str
    val_speaker: str
    test_speaker: str


def make_folds(entries):
    """Build the 5 leave-one-session-out splits from manifest entries.

    Only labeled entries define the session/speaker structure. Within the
    held-out session, the lexicographically first speaker validates.
    """
    sessions = {}
    for e in entries:
        if e.labeled:
            sessions.setdefault(e.session, set()).add(e.speaker)
    if len(sessions) != 5:
        raise ProtocolError(f"expected 5 labeled sessions, found {len(sessions)}")
    for s, speakers in sessions.items():
        if len(speakers) != 2:
            raise ProtocolError(
                f"session {s!r} has {len(speakers)} speakers, expected exactly 2")
    folds = []
    ordered = sorted(sessions)
    for i, held in enumerate(ordered, start=1):
        val, test = sorted(sessions[held])
        folds.append(FoldSplit(
            index=i,
            train_sessions=[s for s in ordered if s != held],
            held_session=held,
            val_speaker=val,
            test_speaker=test,
        ))
    return folds


# -- early stopping ---------------------------------------------------------------


def early_stop(trace, patience=5):
    """Best/stop epochs (1-indexed) for a validation-accuracy trace.

    Stops once `patience` consecutive epochs after the running best are all
    strictly lower; a new high inside the window restarts the search.
    Returns (best_epoch, stop_epoch); stop_epoch is None if the trace ends
    before the rule triggers.
    """
    best_epoch, best = None, -np.inf
    streak = 0
    for epoch, acc in enumerate(trace, start=1):
        if acc > best:
            best, best_epoch = acc, epoch
            streak = 0
        elif acc < best:
            streak += 1
            if streak >= patience:
                return best_epoch, epoch
        else:
            streak = 0
    return best_epoch, None


# -- metrics ------------------------------------------------------------------------


def _target_matrix(targets, classes):
    rows = np.array([t.probs for t in targets], dtype=np.float64)
    if classes == 3:
        rows = np.stack([labels.pool_to_3(r) for r in rows])
    return rows


def _tied_classes(row, tol=1e-9):
    return np.flatnonzero(row >= row.max() - tol)


# 3-class bucket of each 5-class decision: {1,2}=negative, {3}=neutral, {4,5}=positive.
_CLASS5_TO_3 = np.array([0, 0, 1, 2, 2])


def unweighted_accuracy(preds, targets, classes=5):
    """Mean per-class recall; split targets count 1/2 toward each tied class."""
    preds = np.asarray(preds, dtype=np.float64)
    if len(preds) == 0:
        raise ProtocolError("unweighted_accuracy: empty prediction set")
    # The classifier always decides among 5 classes; 3-class scoring buckets
    # that decision, so a sample correct at 5 classes stays correct at 3.
    pred_classes = np.argmax(preds, axis=1)
    if classes == 3:
        pred_classes = _CLASS5_TO_3[pred_classes]
    target_rows = _target_matrix(targets, classes)
    hits = np.zeros(classes)
    totals = np.zeros(classes)
    for pred_class, row in zip(pred_classes, target_rows):
        tied = _tied_classes(row)
        weight = 1.0 / len(tied)
        correct = int(pred_class) in tied
        for c in tied:
            totals[c] += weight
            hits[c] += weight * correct
    recalls = [hits[c] / totals[c] for c in range(classes) if totals[c] > 0]
    return float(np.mean(recalls))


def expected_value_rho(preds, targets):
    """Pearson correlation between expected-value decodings and mean ratings.

    Returns (rho, None) or (None, reason) when undefined.
    """
    preds = np.asarray(preds, dtype=np.float64)
    if len(preds) < 2:
        return None, "fewer than 2 samples"
    v = preds @ np.arange(1, 6)
    t = np.array([lab.mean_rating for lab in targets])
    if np.std(v) == 0 or np.std(t) == 0:
        return None, "zero variance"
    return float(np.corrcoef(v, t)[0, 1]), None


def confusion_matrix(preds, targets):
    """Row-normalized 5x5 matrix: rows = actual targets, columns = predictions."""
    preds = np.asarray(preds, dtype=np.float64)
    target_rows = _target_matrix(targets, 5)
    mat = np.zeros((5, 5))
    for pred, row in zip(preds, target_rows):
        j = int(np.argmax(pred))
        tied = _tied_classes(row)
        for c in tied:
            mat[c, j] += 1.0 / len(tied)
    sums = mat.sum(axis=1, keepdims=True)
    empty = sums.ravel() == 0
    if empty.any():
        log.warning("confusion_matrix: %d empty target rows", int(empty.sum()))
    with np.errstate(invalid="ignore", divide="ignore"):
        mat = np.where(sums > 0, mat / np.where(sums == 0, 1.0, sums), 0.0)
    return mat


# -- corpus data and crop providers ----------------------------------------------


@dataclass
class PreparedUtterance:
    entry: audio.ManifestEntry
    spec: audio.Spectrogram
    words: list
    valence: labels.FuzzyLabel | None = None
    activation: labels.FuzzyLabel | None = None


class CorpusData:
    """Spectrograms and fuzzy labels for every utterance in a manifest."""

    def __init__(self, prepared, normalizer):
        self.items = prepared
        self.normalizer = normalizer

    @classmethod
    def load(cls, manifest_path, cache_dir=None):
        import json

        manifest_path = Path(manifest_path)
        base = manifest_path.parent
        entries = audio.read_manifest(manifest_path)
        cache_dir = Path(cache_dir) if cache_dir is not None else None
        stats_path = cache_dir / "stats.json" if cache_dir else None

        if stats_path is not None and stats_path.exists():
            normalizer = audio.SpectrogramNormalizer.from_dict(
                json.loads(stats_path.read_text()))
            specs = [audio.load_spectrogram(cache_dir / f"{e.id}.vgs", e.id)
                     for e in entries]
        else:
            utts = [audio.load_utterance(e, base) for e in entries]
            raw = [audio.stft_bands(u.samples) for u in utts]
            # One affine normalization for the whole corpus keeps fold runs
            # and cache files consistent.
            normalizer = audio.SpectrogramNormalizer.fit(raw)
            specs = [audio.Spectrogram(values=normalizer.apply(b).astype(np.float32),
                                       utterance_id=e.id)
                     for e, b in zip(entries, raw)]
            if cache_dir is not None:
                cache_dir.mkdir(parents=True, exist_ok=True)
                for e, spec in zip(entries, specs):
                    audio.save_spectrogram(cache_dir / f"{e.id}.vgs", spec.values)
                stats_path.write_text(json.dumps(normalizer.to_dict(), sort_keys=True))

        prepared = []
        for e, spec in zip(entries, specs):
            words = audio.read_transcript(base / e.transcript)
            item = PreparedUtterance(entry=e, spec=spec, words=words)
            if e.labeled:
                item.valence = labels.encode(float(np.mean(e.valence)))
                item.activation = labels.encode(float(np.mean(e.activation)))
            prepared.append(item)
        return cls(prepared, normalizer)

    def labeled(self):
        return [i for i in self.items if i.entry.labeled]

    def unlabeled_pool(self):
        """GAN 'real' pool: every utterance, labeled or not."""
        return list(self.items)


def _to_model_input(crop):
    # (w, 128) crop -> (1, 128, w) channel-first image
    return crop.T[np.newaxis, :, :]


class LabeledProvider:
    """Assembles labeled crop batches for the trainer."""

    def __init__(self, items, crop_width, rng):
        self.items = items
        self.crop_width = crop_width
        self.rng = rng

    @property
    def size(self):
        return len(self.items)

    def make_batch(self, indices):
        crops, val_t, act_t = [], [], []
        for i in indices:
            item = self.items[i]
            crop = audio.word_centered_crop(item.spec, item.words, self.crop_width, self.rng)
            crops.append(_to_model_input(crop))
            val_t.append(item.valence.probs)
            act_t.append(item.activation.probs)
        return training.Batch(
            labeled_crops=np.stack(crops).astype(np.float32),
            valence_targets=np.array(val_t, dtype=np.float32),
            activation_targets=np.array(act_t, dtype=np.float32),
        )


class UnlabeledProvider:
    """Round-robin crops from the unlabeled pool plus latent samples."""

    def __init__(self, items, crop_width, crop_rng, z_rng):
        if not items:
            raise ConfigError("DCGAN training requires a non-empty unlabeled pool")
        self.items = items
        self.crop_width = crop_width
        self.crop_rng = crop_rng
        self.z_rng = z_rng
        self.sampler = training.WrapSampler(len(items), crop_rng)

    def draw_crops(self, count):
        crops = []
        for i in self.sampler.draw(count):
            item = self.items[i]
            crop = audio.word_centered_crop(
                item.spec, item.words, self.crop_width, self.crop_rng)
            crops.append(_to_model_input(crop))
        return np.stack(crops).astype(np.float32)

    def draw_latents(self, count, dim):
        return self.z_rng.standard_normal((count, dim)).astype(np.float32)


def predict_valence(bundle, items, crop_width, rng, batch_size=64):
    """One deterministic crop per utterance -> valence probability rows."""
    crops = [_to_model_input(
        audio.word_centered_crop(item.spec, item.words, crop_width, rng))
        for item in items]
    out = []
    for start in range(0, len(crops), batch_size):
        x = Tensor(np.stack(crops[start:start + batch_size]).astype(np.float32))
        _, val, _ = bundle.discriminator.forward(x)
        out.append(val.data)
    return np.concatenate(out)


# -- fold runs --------------------------------------------------------------------


@dataclass
class FoldReport:
    fold: int
    acc5: float
    acc3: float
    rho: float | None
    rho_reason: str | None
    confusion5: list
    best_epoch: int
    stop_epoch: int | None
    val_trace: list
    loss_rows: list = field(default_factory=list)

    def to_dict(self):
        return {
            "fold": self.fold, "acc5": self.acc5, "acc3": self.acc3,
            "rho": self.rho, "rho_reason": self.rho_reason,
            "confusion5": self.confusion5, "best_epoch": self.best_epoch,
            "stop_epoch": self.stop_epoch, "val_trace": self.val_trace,
            "losses": self.loss_rows,
        }


def _fold_rngs(seed, fold_index):
    names = ("init", "crop", "shuffle", "z", "oversample", "eval")
    return {name: np.random.default_rng([seed, fold_index, i])
            for i, name in enumerate(names)}


def run_fold(config, corpus, fold, seed, max_epochs=200, patience=5):
    """Train one fold with early stopping; returns a FoldReport."""
    rngs = _fold_rngs(seed, fold.index)
    bundle = models.build(config, rngs["init"])
    state = training.init_train_state(bundle)

    train_items = [i for i in corpus.labeled()
                   if i.entry.session in fold.train_sessions]
    val_items = [i for i in corpus.labeled()
                 if i.entry.session == fold.held_session
                 and i.entry.speaker == fold.val_speaker]
    test_items = [i for i in corpus.labeled()
                  if i.entry.session == fold.held_session
                  and i.entry.speaker == fold.test_speaker]
    if not train_items or not val_items or not test_items:
        raise ProtocolError(f"fold {fold.index}: empty train/validation/test split")

    balanced = labels.oversample(train_items, rngs["oversample"],
                                 key=lambda item: item.valence)
    labeled_provider = LabeledProvider(balanced, config.crop_width, rngs["crop"])
    unlabeled_provider = None
    if config.is_gan:
        pool = [i for i in corpus.unlabeled_pool()
                if i.entry.session in fold.train_sessions or not i.entry.labeled]
        unlabeled_provider = UnlabeledProvider(
            pool, config.crop_width, rngs["crop"], rngs["z"])

    val_targets = [i.valence for i in val_items]
    test_targets = [i.valence for i in test_items]

    trace = []
    best_acc, best_epoch, best_snap = -np.inf, 0, None
    streak = 0
    stop_epoch = None
    for epoch in range(1, max_epochs + 1):
        training.run_epoch(state, labeled_provider, unlabeled_provider, rngs["shuffle"])
        eval_rng = np.random.default_rng([seed, fold.index, 100, epoch])
        preds = predict_valence(bundle, val_items, config.crop_width, eval_rng,
                                config.batch_size)
        acc = unweighted_accuracy(preds, val_targets, classes=5)
        trace.append(acc)
        if acc > best_acc:
            best_acc, best_epoch = acc, epoch
            best_snap = training.snapshot_params(bundle)
            streak = 0
        elif acc < best_acc:
            streak += 1
            if streak >= patience:
                stop_epoch = epoch
                break
        else:
            streak = 0
    if stop_epoch is None:
        log.info("fold %d: hit the %d-epoch cap without converging", fold.index, max_epochs)
    if best_snap is not None:
        training.restore_params(bundle, best_snap)

    eval_rng = np.random.default_rng([seed, fold.index, 200])
    preds = predict_valence(bundle, test_items, config.crop_width, eval_rng,
                            config.batch_size)
    rho, reason = expected_value_rho(preds, test_targets)
    return FoldReport(
        fold=fold.index,
        acc5=unweighted_accuracy(preds, test_targets, classes=5),
        acc3=unweighted_accuracy(preds, test_targets, classes=3),
        rho=rho, rho_reason=reason,
        confusion5=confusion_matrix(preds, test_targets).tolist(),
        best_epoch=best_epoch, stop_epoch=stop_epoch,
        val_trace=[float(a) for a in trace],
        loss_rows=state.loss_rows(),
    ), bundle


def run_experiment(config, corpus, seed, max_epochs=200, patience=5):
    """All five folds plus the Table-2 style aggregate."""
    folds = make_folds([i.entry for i in corpus.items])
    reports = []
    for fold in folds:
        report, _ = run_fold(config, corpus, fold, seed,
                             max_epochs=max_epochs, patience=patience)
        log.info("fold %d: acc5=%.4f acc3=%.4f", fold.index, report.acc5, report.acc3)
        reports.append(report)
    rhos = [r.rho for r in reports if r.rho is not None]
    aggregate = {
        "acc5": float(np.mean([r.acc5 for r in reports])),
        "acc3": float(np.mean([r.acc3 for r in reports])),
        "rho": float(np.mean(rhos)) if rhos else None,
    }
    return reports, aggregate


# -- random hyper-parameter search ------------------------------------------------


SEARCH_SPACE = {
    "crop_width": (64, 128),
    "num_filters": tuple(range(32, 89, 4)),
    "batch_size": (64, 128, 256),
    "learning_rate": (1e-3, 1e-4, 1e-5),
    "filter_size_global": tuple(range(2, 17)),
}


def sample_config(kind, rng):
    """Sample one configuration; infeasible filter sizes are resampled."""
    while True:
        w = int(rng.choice(SEARCH_SPACE["crop_width"]))
        k = int(rng.choice(SEARCH_SPACE["filter_size_global"]))
        if k > w // 8:
            log.debug("resampling: filter_size %d > %d for crop %d", k, w // 8, w)
            continue
        return models.ModelConfig(
            kind=kind,
            crop_width=w,
            filter_size=k,
            num_filters=int(rng.choice(SEARCH_SPACE["num_filters"])),
            batch_size=int(rng.choice(SEARCH_SPACE["batch_size"])),
            learning_rate=float(rng.choice(SEARCH_SPACE["learning_rate"])),
        ).validate()


def random_search(kind, n_trials, rng, eval_fn):
    """Sample configs, score each with eval_fn, keep the best.

    Returns (best_config, trials) where trials is a list of
    (config, validation_accuracy) in sampling order.
    """
    if n_trials < 1:
        raise ConfigError("random_search needs at least one trial")
    trials = []
    for _ in range(n_trials):
        config = sample_config(kind, rng)
        trials.append((config, float(eval_fn(config))))
    best_config, _ = max(trials, key=lambda t: t[1])
    return best_config, trials
