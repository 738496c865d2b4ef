"""Two-step optimization: auto-encoder pretraining, then joint classifier training.

Variants share one loop: ``joint`` (encoder frozen for the first
``freeze_until`` iterations, then tuned), ``frozen`` (encoder never
updated), ``discriminative`` (reconstruction loss kept in the objective with
weight 1 and classification weighted by ``lam``) and ``scratch`` (joint
training from a freshly initialized encoder).  One sample per iteration,
drawn uniformly with replacement.

A frozen encoder runs with fixed (running) batch-norm statistics, which
makes it a deterministic feature extractor; its outputs are memoized per
(case, rotation) in a :class:`FeatureCache`.
"""

from __future__ import annotations

import hashlib
import itertools
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import model as M
from .nn.optim import NonFiniteGradientError, OptState, sgd_step
from .nn.rng import make_rng
from .shapegen import ROTATION_ANGLES, crop_and_rescale, dsc, rotate_mask

log = logging.getLogger(__name__)

PHASES = ("pretrain_ae", "joint", "frozen", "discriminative", "scratch")
ANGLE_TRIPLES = tuple(itertools.product(ROTATION_ANGLES, repeat=3))


class TrainingError(RuntimeError):
    """Training aborted; ``model`` holds the parameters of the last finite step."""

    def __init__(self, message, model=None):
        super().__init__(message)
        self.model = model


@dataclass(frozen=True)
class TrainConfig:
    phase: str
    iterations: int
    base_lr: float
    lr_decay_points: tuple = ()
    decay_factor: float = 0.1
    freeze_until: int = 0
    momentum: float = 0.9
    batch_size: int = 1
    augmentation: bool = True
    seed: int = 0
    lam: float = 0.5
    log_every: int = 100
    encoder_bn: str = "train"

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if self.encoder_bn not in ("train", "frozen"):
            raise ValueError(f"encoder_bn must be 'train' or 'frozen', got {self.encoder_bn!r}")
        if self.iterations < 0 or self.base_lr <= 0 or self.decay_factor <= 0:
            raise ValueError("iterations >= 0, base_lr > 0 and decay_factor > 0 required")
        if self.batch_size != 1:
            raise ValueError("only batch_size 1 is supported")
        if not 0 <= self.freeze_until <= self.iterations:
            raise ValueError(f"freeze_until={self.freeze_until} outside [0, {self.iterations}]")
        pts = list(self.lr_decay_points)
        if any(b <= a for a, b in zip(pts, pts[1:])):
            raise ValueError("lr_decay_points must be strictly increasing")

    def lr_at(self, iteration: int) -> float:
        passed = sum(1 for p in self.lr_decay_points if iteration >= p)
        return self.base_lr * self.decay_factor ** passed


@dataclass
class LogRecord:
    iteration: int
    lr: float
    loss_total: float
    loss_recon: float | None
    loss_clf: float | None
    wall_time: float


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    checkpoint: str | None = None

    def to_text(self) -> str:
        """``iter,lr,loss_total,loss_recon,loss_clf`` lines; wall time is not persisted."""
        def f(v):
            return "" if v is None else repr(float(v))
        lines = ["iter,lr,loss_total,loss_recon,loss_clf"]
        lines += [f"{r.iteration},{r.lr!r},{f(r.loss_total)},{f(r.loss_recon)},{f(r.loss_clf)}"
                  for r in self.records]
        return "\n".join(lines) + "\n"


class _Recorder:
    def __init__(self, log_every):
        self.log, self.every = TrainLog(), max(1, log_every)
        self.acc, self.t0 = [], time.perf_counter()

    def add(self, it, lr, total, model, recon=None, clf=None):
        if not np.isfinite(total):
            raise TrainingError(f"non-finite loss at iteration {it} (lr={lr:g})", model)
        self.acc.append((total, recon, clf))
        if (it + 1) % self.every == 0:
            self.flush(it, lr)

    def flush(self, it, lr):
        if not self.acc:
            return
        cols = list(zip(*self.acc))
        mean = [None if c[0] is None else float(np.mean(c)) for c in cols]
        self.log.records.append(LogRecord(it, lr, mean[0], mean[1], mean[2],
                                          time.perf_counter() - self.t0))
        self.acc = []


def augment_sample(record, rng, size: int, augmentation: bool = True) -> np.ndarray:
    """Random one-of-27 rotation, then bounding-box rescale to a ``1 x size^3`` tensor."""
    angles = ANGLE_TRIPLES[draw_rotation(rng)] if augmentation else (0.0, 0.0, 0.0)
    return prepare(record.grid, angles, size)


def draw_rotation(rng) -> int:
    """Uniform index into ``ANGLE_TRIPLES``."""
    return int(rng.integers(len(ANGLE_TRIPLES)))


def prepare(grid, angles, size: int) -> np.ndarray:
    return crop_and_rescale(rotate_mask(grid, angles), size)[None].astype(np.float64)


class SampleCache:
    """Memoized ``prepare`` keyed by (case id, rotation index), bit-packed."""

    def __init__(self, size: int):
        self.size = size
        self._store = {}

    def get(self, record, angle_index: int) -> np.ndarray:
        key = (record.case_id, angle_index)
        packed = self._store.get(key)
        if packed is None:
            mask = crop_and_rescale(rotate_mask(record.grid, ANGLE_TRIPLES[angle_index]), self.size)
            self._store[key] = packed = np.packbits(mask.reshape(-1))
        n = self.size ** 3
        return np.unpackbits(packed, count=n).reshape(1, self.size, self.size, self.size).astype(np.float64)


def encoder_digest(model: M.ShapeModel) -> str:
    h = hashlib.sha256()
    for k in sorted(model.params):
        if k.startswith("enc/"):
            h.update(k.encode())
            h.update(model.params[k].tobytes())
    for k in sorted(model.buffers):
        if k.startswith("enc/"):
            h.update(k.encode())
            h.update(model.buffers[k].tobytes())
    return h.hexdigest()


class FeatureCache:
    """Infer-mode shape vectors of a fixed encoder keyed by (case id, rotation index)."""

    def __init__(self, samples: SampleCache):
        self.samples = samples
        self._store = {}

    def get(self, model: M.ShapeModel, digest: str, record, angle_index: int) -> np.ndarray:
        key = (digest, record.case_id, angle_index)
        v = self._store.get(key)
        if v is None:
            v = M.encode(model, self.samples.get(record, angle_index))
            self._store[key] = v
        return v


IDENTITY = ANGLE_TRIPLES.index((0.0, 0.0, 0.0))


class _Sampler:
    def __init__(self, cases, cfg: TrainConfig):
        self.cases = list(cases)
        self.rng = make_rng(cfg.seed, 500)
        self.augmentation = cfg.augmentation

    def draw(self):
        i = int(self.rng.integers(len(self.cases)))
        a = draw_rotation(self.rng) if self.augmentation else IDENTITY
        return self.cases[i], a


def _apply(model, grads, opt, names, it):
    try:
        sgd_step(model.params, grads, opt, names)
    except NonFiniteGradientError as exc:
        raise TrainingError(f"iteration {it}: {exc}", model) from exc


def pretrain_autoencoder(cases, cfg: TrainConfig, arch: M.Architecture | None = None,
                         model: M.ShapeModel | None = None, samples: SampleCache | None = None,
                         callback=None):
    """Minimize reconstruction loss of encoder+decoder on normal cases.

    Returns ``(model, log)``; the returned model carries an untrained classifier.
    """
    cases = list(cases)
    if not cases:
        raise ValueError("pretraining needs at least one case")
    if any(c.label != 0 for c in cases):
        raise ValueError("auto-encoder pretraining uses normal cases only")
    if model is None:
        model = M.ShapeModel.initialize(arch or M.Architecture(), cfg.seed)
    samples = samples or SampleCache(model.arch.size)
    sampler = _Sampler(cases, cfg)
    opt = OptState(cfg.base_lr, cfg.momentum)
    rec = _Recorder(cfg.log_every)
    names = model.names("enc/") + model.names("dec/")
    for it in range(cfg.iterations):
        opt.learning_rate = lr = cfg.lr_at(it)
        record, a = sampler.draw()
        x = samples.get(record, a)
        v, ce = model.encoder.forward(model.params, model.buffers, x, "train", True)
        out, cd = model.decoder.forward(model.params, model.buffers, v, "train", True)
        loss = M.reconstruction_loss(x, out)
        rec.add(it, lr, loss, model, recon=loss)
        gv, grads = model.decoder.backward(model.params, cd, M.reconstruction_loss_grad(x, out))
        _, ge = model.encoder.backward(model.params, ce, gv, need_input=False)
        grads.update(ge)
        _apply(model, grads, opt, names, it)
        if callback:
            callback(it, model)
    rec.flush(cfg.iterations - 1, cfg.lr_at(max(cfg.iterations - 1, 0)))
    return model, rec.log


def train_classifier(cases, pretrained: M.ShapeModel | None, cfg: TrainConfig,
                     arch: M.Architecture | None = None, samples: SampleCache | None = None,
                     features: FeatureCache | None = None, stop_after: int | None = None,
                     callback=None):
    """Second optimization step for every classifier variant.

    ``cfg.phase`` selects the variant.  The input model is not modified; the
    trained copy is returned together with the log and the class-balance
    weight that was used.
    """
    cases = list(cases)
    phase = cfg.phase
    if phase == "pretrain_ae":
        raise ValueError("use pretrain_autoencoder for the pretrain_ae phase")
    eta = M.class_balance(c.label for c in cases)
    if phase == "scratch":
        model = M.ShapeModel.initialize(arch or (pretrained.arch if pretrained else M.Architecture()),
                                        cfg.seed)
    else:
        if pretrained is None:
            raise ValueError(f"phase {phase!r} needs a pretrained auto-encoder")
        model = pretrained.copy()
        model.reset_classifier(cfg.seed)
    freeze = cfg.iterations if phase == "frozen" else cfg.freeze_until
    samples = samples or SampleCache(model.arch.size)
    features = features or FeatureCache(samples)
    digest = encoder_digest(model)
    model.standardize_inputs([features.get(model, digest, c, IDENTITY) for c in cases])
    sampler = _Sampler(cases, cfg)
    opt = OptState(cfg.base_lr, cfg.momentum)
    rec = _Recorder(cfg.log_every)
    lam = cfg.lam if phase == "discriminative" else 1.0
    enc_mode = "infer" if cfg.encoder_bn == "frozen" else "train"
    clf_names = model.names("clf/")
    enc_names = model.names("enc/")
    dec_names = model.names("dec/") if phase == "discriminative" else []
    end = cfg.iterations if stop_after is None else min(cfg.iterations, stop_after)
    for it in range(end):
        opt.learning_rate = lr = cfg.lr_at(it)
        record, a = sampler.draw()
        frozen = it < freeze
        if frozen:
            v = features.get(model, digest, record, a)
        else:
            x = samples.get(record, a)
            v, ce = model.encoder.forward(model.params, model.buffers, x, enc_mode, True)
        z, cc = model.classifier.forward(model.params, model.buffers, v, "train", True)
        clf_loss, dz = M.classification_loss_logit(record.label, float(z[0]), eta)
        gv, grads = model.classifier.backward(model.params, cc, np.array([lam * dz]))
        names = list(clf_names)
        recon_loss = None
        if phase == "discriminative":
            xt = samples.get(record, a) if frozen else x
            out, cd = model.decoder.forward(model.params, model.buffers, v, "train", True)
            recon_loss = M.reconstruction_loss(xt, out)
            gv_dec, gd = model.decoder.backward(model.params, cd,
                                                M.reconstruction_loss_grad(xt, out))
            grads.update(gd)
            gv = gv + gv_dec
            names += dec_names
        if not frozen:
            _, ge = model.encoder.backward(model.params, ce, gv, need_input=False)
            grads.update(ge)
            names += enc_names
        total = lam * clf_loss + (recon_loss or 0.0)
        rec.add(it, lr, total, model, recon=recon_loss, clf=clf_loss)
        _apply(model, grads, opt, names, it)
        if callback:
            callback(it, model)
    rec.flush(end - 1, cfg.lr_at(max(end - 1, 0)))
    return model, rec.log, eta


def train_joint(cases, pretrained, cfg, **kw):
    return train_classifier(cases, pretrained, _with_phase(cfg, "joint"), **kw)


def train_frozen(cases, pretrained, cfg, **kw):
    return train_classifier(cases, pretrained, _with_phase(cfg, "frozen"), **kw)


def train_discriminative(cases, pretrained, cfg, lam=None, **kw):
    cfg = _with_phase(cfg, "discriminative")
    if lam is not None:
        cfg = replace(cfg, lam=lam)
    return train_classifier(cases, pretrained, cfg, **kw)


def _with_phase(cfg, phase):
    return cfg if cfg.phase == phase else replace(cfg, phase=phase)


def reconstruction_dsc(model: M.ShapeModel, cases, samples: SampleCache | None = None,
                       threshold: float = 0.5) -> list[float]:
    """Dice between each unaugmented mask and its thresholded reconstruction (infer mode)."""
    samples = samples or SampleCache(model.arch.size)
    out = []
    for c in cases:
        x = samples.get(c, IDENTITY)
        recon = M.decode(model, M.encode(model, x))
        out.append(dsc(x[0] > 0.5, recon[0] >= threshold))
    return out
