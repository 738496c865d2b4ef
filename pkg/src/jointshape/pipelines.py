"""Concrete classifiers for :func:`jointshape.evaluation.cross_validate`.

Every pipeline exposes ``name``, ``threshold`` (the fixed decision
threshold on its score) and ``fit(train_cases, seed) -> scorer`` where the
scorer maps a list of cases to one score per case.  Test cases are scored
on their unaugmented, bounding-box rescaled masks.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from . import model as M
from . import train as T

PIPELINES = ("svm", "frozen", "joint", "discriminative", "scratch")


class _Cached:
    """Per-process sample and feature caches, dropped when pickled."""

    def _caches(self, size):
        caches = self.__dict__.get("_cache_pair")
        if caches is None:
            samples = T.SampleCache(size)
            caches = self.__dict__["_cache_pair"] = (samples, T.FeatureCache(samples))
        return caches

    def __getstate__(self):
        state = dict(self.__dict__)
        state.pop("_cache_pair", None)
        return state


def _inputs(cases, size):
    return [T.prepare(c.grid, (0.0, 0.0, 0.0), size) for c in cases]


@dataclass
class SvmPipeline(_Cached):
    """Linear SVM on shape vectors of the pretrained (fixed) encoder."""

    encoder: M.ShapeModel
    C: float = 1.0
    iterations: int = 1000
    name: str = field(default="svm", init=False)
    threshold: float = field(default=0.0, init=False)

    def fit(self, train_cases, seed):
        samples, features = self._caches(self.encoder.arch.size)
        digest = T.encoder_digest(self.encoder)
        X = [features.get(self.encoder, digest, c, T.IDENTITY) for c in train_cases]
        params = M.svm_train(X, [c.label for c in train_cases], self.C, self.iterations)

        def score(cases):
            return [M.svm_predict(params, M.encode(self.encoder, x))
                    for x in _inputs(cases, self.encoder.arch.size)]
        return score


@dataclass
class NetworkPipeline(_Cached):
    """Two-layer classifier on the shape vector, trained by ``train_classifier``.

    ``name`` selects the variant (``frozen``, ``joint``, ``discriminative``
    or ``scratch``); ``cfg.seed`` is replaced by the run seed.
    """

    name: str
    pretrained: M.ShapeModel | None
    cfg: T.TrainConfig
    arch: M.Architecture | None = None
    threshold: float = field(default=0.5, init=False)

    def __post_init__(self):
        if self.name not in PIPELINES[1:]:
            raise ValueError(f"unknown network pipeline {self.name!r}")
        if self.name != "scratch" and self.pretrained is None:
            raise ValueError(f"pipeline {self.name!r} needs a pretrained auto-encoder")

    def fit(self, train_cases, seed):
        cfg = replace(self.cfg, phase=self.name, seed=seed)
        size = (self.arch or self.pretrained.arch).size
        samples, features = self._caches(size)
        model, _, _ = T.train_classifier(train_cases, self.pretrained, cfg, arch=self.arch,
                                         samples=samples, features=features)

        def score(cases):
            return [M.predict(model, x) for x in _inputs(cases, size)]
        return score


def make_pipeline(cfg, name: str, pretrained: M.ShapeModel | None):
    """Pipeline ``name`` configured from an :class:`~jointshape.config.ExperimentConfig`."""
    if name == "svm":
        return SvmPipeline(pretrained, cfg.svm_c, cfg.svm_iterations)
    return NetworkPipeline(name, None if name == "scratch" else pretrained, cfg.train_config(name),
                           arch=cfg.architecture())
