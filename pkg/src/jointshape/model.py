"""Shape encoder, decoder, 2-layer classifier, their losses, and a linear SVM.

The encoder alternates size-preserving 3x3x3 convolutions with 2x2x2
stride-2 down-convolutions (each followed by batch norm and ReLU) until the
volume is 4^3, then flattens and maps linearly to the shape vector.  The
decoder mirrors it with transposed convolutions and ends in a 1-channel
sigmoid volume.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_expit

from .nn import checkpoint
from .nn.functional import ConvSpec
from .nn.layers import (
    BatchNorm, Conv3d, Deconv3d, Linear, ReLU, Reshape, Sequential, Sigmoid, Standardize,
)
from .nn.rng import make_rng

SHAPE_DIMS = (16, 32, 64, 128, 256, 512, 1024)
CLAMP = 1e-7


class ModelMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class Architecture:
    size: int = 32
    shape_dim: int = 64
    hidden: int = 0
    base_channels: int = 8

    def __post_init__(self):
        if self.size < 8 or self.size & (self.size - 1):
            raise ValueError(f"input size must be a power of two >= 8, got {self.size}")
        if self.shape_dim not in SHAPE_DIMS:
            raise ValueError(f"shape_dim must be one of {SHAPE_DIMS}, got {self.shape_dim}")
        if self.hidden == 0:
            object.__setattr__(self, "hidden", max(16, self.shape_dim // 2))

    @property
    def channels(self) -> tuple[int, ...]:
        blocks = int(math.log2(self.size // 4))
        return tuple(self.base_channels * 2 ** i for i in range(blocks))

    @property
    def bottleneck(self) -> int:
        return self.channels[-1] * 4 ** 3


def build_encoder(arch: Architecture) -> Sequential:
    layers, prev = [], 1
    for i, c in enumerate(arch.channels):
        layers += [Conv3d(f"enc/conv{i}", ConvSpec(prev, c, (3, 3, 3), 1, 1)),
                   BatchNorm(f"enc/bn{i}a", c), ReLU(),
                   Conv3d(f"enc/down{i}", ConvSpec(c, c, (2, 2, 2), 2, 0)),
                   BatchNorm(f"enc/bn{i}b", c), ReLU()]
        prev = c
    layers += [Reshape((arch.bottleneck,)), Linear("enc/fc", arch.bottleneck, arch.shape_dim)]
    return Sequential(layers)


def build_decoder(arch: Architecture) -> Sequential:
    chans = arch.channels[::-1]
    layers = [Linear("dec/fc", arch.shape_dim, arch.bottleneck),
              Reshape((chans[0], 4, 4, 4)), BatchNorm("dec/bn_in", chans[0]), ReLU()]
    for i, c in enumerate(chans):
        nxt = chans[i + 1] if i + 1 < len(chans) else c
        layers += [Deconv3d(f"dec/up{i}", ConvSpec(c, c, (2, 2, 2), 2, 0)),
                   BatchNorm(f"dec/bn{i}a", c), ReLU(),
                   Conv3d(f"dec/conv{i}", ConvSpec(c, nxt, (3, 3, 3), 1, 1)),
                   BatchNorm(f"dec/bn{i}b", nxt), ReLU()]
    layers += [Conv3d("dec/out", ConvSpec(chans[-1], 1, (3, 3, 3), 1, 1)), Sigmoid()]
    return Sequential(layers)


def build_classifier(arch: Architecture) -> Sequential:
    """Returns the *logit*; apply a sigmoid for the confidence ``p``.

    The input passes through a fixed standardization (identity until
    :meth:`ShapeModel.standardize_inputs` sets it), which only rescales the
    first layer's coordinates.
    """
    return Sequential([Standardize("clf/input", arch.shape_dim),
                       Linear("clf/fc1", arch.shape_dim, arch.hidden), ReLU(),
                       Linear("clf/fc2", arch.hidden, 1)])


@dataclass
class ShapeModel:
    """All three networks over one flat parameter dict.

    Parameter names are prefixed ``enc/``, ``dec/`` and ``clf/``.
    """

    arch: Architecture
    params: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)

    def __post_init__(self):
        self.encoder = build_encoder(self.arch)
        self.decoder = build_decoder(self.arch)
        self.classifier = build_classifier(self.arch)

    @classmethod
    def initialize(cls, arch: Architecture, seed: int, parts=("enc", "dec", "clf")) -> "ShapeModel":
        model = cls(arch)
        for key, net in enumerate((model.encoder, model.decoder, model.classifier)):
            part = ("enc", "dec", "clf")[key]
            if part in parts:
                net.init(model.params, model.buffers, make_rng(seed, 300 + key))
        return model

    def reset_classifier(self, seed: int) -> None:
        for k in [k for k in self.params if k.startswith("clf/")]:
            del self.params[k]
        self.classifier.init(self.params, self.buffers, make_rng(seed, 302))

    def standardize_inputs(self, vectors) -> None:
        """Fix the classifier input statistics to those of ``vectors``."""
        V = np.asarray(vectors, dtype=np.float64)
        scale = V.std(axis=0)
        scale[scale < 1e-12] = 1.0
        self.buffers["clf/input/mean"] = V.mean(axis=0)
        self.buffers["clf/input/scale"] = scale

    def names(self, prefix: str) -> list[str]:
        return sorted(k for k in self.params if k.startswith(prefix))

    def copy(self) -> "ShapeModel":
        return ShapeModel(self.arch, {k: v.copy() for k, v in self.params.items()},
                          {k: v.copy() for k, v in self.buffers.items()})

    def check_input(self, mask: np.ndarray) -> np.ndarray:
        x = np.asarray(mask, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        if x.shape != (1,) + (self.arch.size,) * 3:
            raise ModelMismatchError(
                f"model expects a 1x{self.arch.size}^3 mask, got shape {x.shape}")
        return x


def encode(model: ShapeModel, mask, mode: str = "infer") -> np.ndarray:
    v, _ = model.encoder.forward(model.params, model.buffers, model.check_input(mask), mode,
                                 update_stats=False)
    return v


def decode(model: ShapeModel, v, mode: str = "infer") -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (model.arch.shape_dim,):
        raise ModelMismatchError(f"expected shape vector of length {model.arch.shape_dim}, got {v.shape}")
    out, _ = model.decoder.forward(model.params, model.buffers, v, mode, update_stats=False)
    return out


def classify(model: ShapeModel, v) -> float:
    z, _ = model.classifier.forward(model.params, model.buffers, np.asarray(v, np.float64), "infer", False)
    return float(1.0 / (1.0 + math.exp(-z[0]))) if z[0] >= 0 else float(
        math.exp(z[0]) / (1.0 + math.exp(z[0])))


def predict(model: ShapeModel, mask) -> float:
    return classify(model, encode(model, mask))


def reconstruction_loss(target, recon) -> float:
    """Mean voxelwise binary cross-entropy with predictions clamped to [1e-7, 1-1e-7]."""
    target, recon = np.asarray(target, np.float64), np.asarray(recon, np.float64)
    if target.shape != recon.shape:
        raise ModelMismatchError(f"shape mismatch {target.shape} vs {recon.shape}")
    q = np.clip(recon, CLAMP, 1 - CLAMP)
    return float(-np.mean(target * np.log(q) + (1 - target) * np.log1p(-q)))


def reconstruction_loss_grad(target, recon) -> np.ndarray:
    q = np.clip(recon, CLAMP, 1 - CLAMP)
    g = (q - target) / (q * (1 - q)) / target.size
    return np.where((recon > CLAMP) & (recon < 1 - CLAMP), g, 0.0)


def _check_prob(p):
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must lie strictly in (0, 1), got {p}")


def classification_loss(y: int, p: float, eta: float) -> float:
    """Class-balanced cross-entropy ``-[y ln p + eta (1-y) ln(1-p)]``."""
    _check_prob(p)
    return -(y * math.log(p) + eta * (1 - y) * math.log1p(-p))


def classification_loss_grad(y: int, p: float, eta: float) -> float:
    """Derivative with respect to ``p``."""
    _check_prob(p)
    return -y / p + eta * (1 - y) / (1 - p)


def classification_loss_logit(y: int, z: float, eta: float) -> tuple[float, float]:
    """Loss and its derivative with respect to the logit ``z`` (``p = sigmoid(z)``)."""
    loss = -(y * log_expit(z) + eta * (1 - y) * log_expit(-z))
    p = 1.0 / (1.0 + math.exp(-z)) if z >= 0 else math.exp(z) / (1.0 + math.exp(z))
    return float(loss), float(y * (p - 1.0) + eta * (1 - y) * p)


def combined_loss(target, recon, y, p, eta, lam) -> float:
    return reconstruction_loss(target, recon) + lam * classification_loss(y, p, eta)


def class_balance(labels) -> float:
    """``N_abnormal / N_normal``: the weight that equalizes both classes' contribution."""
    labels = list(labels)
    n_pos = sum(1 for y in labels if y == 1)
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("both classes must be present")
    return n_pos / n_neg


# -- checkpoints -------------------------------------------------------------

def model_tensors(model: ShapeModel, eta: float = 0.0, lam: float = 0.0,
                  velocity: dict | None = None, svm: "SvmParams | None" = None,
                  fold_exclude: int = -1) -> dict[str, np.ndarray]:
    """Flat tensor dict: ``param/``, ``buffer/``, ``velocity/``, ``svm/`` and ``meta/`` entries."""
    out = {f"param/{k}": v for k, v in model.params.items()}
    out.update({f"buffer/{k}": v for k, v in model.buffers.items()})
    out.update({f"velocity/{k}": v for k, v in (velocity or {}).items()})
    a = model.arch
    out.update({"meta/size": np.array(a.size), "meta/shape_dim": np.array(a.shape_dim),
                "meta/hidden": np.array(a.hidden), "meta/channels": np.array(a.channels),
                "meta/eta": np.array(eta), "meta/lambda": np.array(lam),
                "meta/fold_exclude": np.array(fold_exclude)})
    if svm is not None:
        out.update({"svm/w": svm.w, "svm/bias": np.array(svm.bias), "svm/C": np.array(svm.C),
                    "svm/feature_mean": svm.feature_mean, "svm/feature_scale": svm.feature_scale})
    return out


def save_model(path, model: ShapeModel, **meta) -> None:
    checkpoint.save(path, model_tensors(model, **meta))


def load_model(path, expect: Architecture | None = None) -> tuple[ShapeModel, dict]:
    t = checkpoint.load(path)
    try:
        arch = Architecture(size=int(t["meta/size"]), shape_dim=int(t["meta/shape_dim"]),
                            hidden=int(t["meta/hidden"]),
                            base_channels=int(t["meta/channels"].reshape(-1)[0]))
    except KeyError as exc:
        raise ModelMismatchError(f"checkpoint lacks model manifest entry {exc}") from None
    if tuple(int(c) for c in t["meta/channels"].reshape(-1)) != arch.channels:
        raise ModelMismatchError("checkpoint channel schedule is inconsistent with its input size")
    if expect is not None and (expect.size, expect.shape_dim) != (arch.size, arch.shape_dim):
        raise ModelMismatchError(
            f"checkpoint is V={arch.size}, d={arch.shape_dim}; expected V={expect.size}, d={expect.shape_dim}")
    model = ShapeModel(arch,
                       {k[6:]: v for k, v in t.items() if k.startswith("param/")},
                       {k[7:]: v for k, v in t.items() if k.startswith("buffer/")})
    meta = {"eta": float(t["meta/eta"]), "lambda": float(t["meta/lambda"]),
            "fold_exclude": int(t.get("meta/fold_exclude", np.array(-1))),
            "velocity": {k[9:]: v for k, v in t.items() if k.startswith("velocity/")},
            "svm": None}
    if "svm/w" in t:
        meta["svm"] = SvmParams(t["svm/w"], float(t["svm/bias"]), float(t["svm/C"]),
                                t["svm/feature_mean"], t["svm/feature_scale"])
    return model, meta


# -- linear SVM baseline -----------------------------------------------------

@dataclass
class SvmParams:
    w: np.ndarray
    bias: float
    C: float
    feature_mean: np.ndarray
    feature_scale: np.ndarray


def svm_train(vectors, labels, C: float = 1.0, iterations: int = 1000) -> SvmParams:
    """Linear SVM, ``min 1/2 |w|^2 + C sum hinge(y (w.v + b))``.

    Features are standardized with training statistics and the bias is
    folded in as a constant feature (so it is regularized too).
    Optimization is full-batch Pegasos-style projected subgradient descent
    and the iterate with the lowest primal objective is kept, which makes
    the result a deterministic function of the training set.
    """
    X = np.asarray(vectors, dtype=np.float64)
    y = np.where(np.asarray(labels) == 1, 1.0, -1.0)
    if len(set(y.tolist())) < 2:
        raise ValueError("SVM training needs both classes")
    if C <= 0:
        raise ValueError("C must be positive")
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0] = 1.0
    Xa = np.hstack([(X - mean) / scale, np.ones((len(y), 1))])
    n = len(y)
    lam = 1.0 / (C * n)
    radius = 1.0 / math.sqrt(lam)

    def objective(w):
        return 0.5 * w @ w + C * np.maximum(0.0, 1.0 - y * (Xa @ w)).sum()

    w = np.zeros(Xa.shape[1])
    best_obj, best_w = objective(w), w.copy()
    for t in range(1, iterations + 1):
        viol = y * (Xa @ w) < 1.0
        w = w - (lam * w - (y[viol] @ Xa[viol]) / n) / (lam * t)
        norm = np.linalg.norm(w)
        if norm > radius:
            w *= radius / norm
        obj = objective(w)
        if obj < best_obj:
            best_obj, best_w = obj, w.copy()
    return SvmParams(best_w[:-1], float(best_w[-1]), C, mean, scale)


def svm_predict(params: SvmParams, v) -> float:
    """Signed margin ``w.v + b`` (positive means abnormal)."""
    return float(((np.asarray(v, np.float64) - params.feature_mean) / params.feature_scale) @ params.w
                 + params.bias)
