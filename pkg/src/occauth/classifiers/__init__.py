"""The four one-class classifiers behind one fit/score/predict surface.

Fitting functions take genuine samples only; there is no argument through
which impostor data could reach them.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from ..core import Decision, InsufficientDataError, ParameterError, ShapeError, as_feature_matrix
from ..preprocess import PcaProjector, Standardizer, fit_pca, fit_standardizer
from .base import ALL_KINDS, OccKind, OccModel
from .ee import EeModel, EeParams, fast_mcd, fit_ee
from .iforest import IfModel, IfParams, average_path_length, fit_iforest
from .lof import LofModel, LofParams, fit_lof
from .sv1c import Sv1cModel, Sv1cParams, fit_sv1c

log = logging.getLogger(__name__)

Params = Union[Sv1cParams, EeParams, IfParams, LofParams]

PARAM_TYPES = {OccKind.SV1C: Sv1cParams, OccKind.EE: EeParams, OccKind.IF: IfParams, OccKind.LOF: LofParams}
MODEL_TYPES = {OccKind.SV1C: Sv1cModel, OccKind.EE: EeModel, OccKind.IF: IfModel, OccKind.LOF: LofModel}

MODEL_FORMAT = "occauth-model"
MODEL_FORMAT_VERSION = 1


class DimensionalityError(ShapeError):
    pass


def fit_model(kind, X, params: Params | None = None, *, allow_fallback: bool = False) -> OccModel:
    kind = OccKind.parse(kind)
    params = params if params is not None else PARAM_TYPES[kind]()
    if not isinstance(params, PARAM_TYPES[kind]):
        raise ParameterError(f"{kind.name} expects {PARAM_TYPES[kind].__name__}, got {type(params).__name__}")
    if kind is OccKind.SV1C:
        return fit_sv1c(X, params)
    if kind is OccKind.EE:
        return fit_ee(X, params, allow_fallback=allow_fallback)
    if kind is OccKind.IF:
        return fit_iforest(X, params)
    return fit_lof(X, params)


def score(model, x) -> float:
    """Genuineness score of one vector (higher is more genuine)."""
    return model.score(x)


def predict(model, x, threshold: float) -> Decision:
    if not np.isfinite(threshold):
        raise ParameterError("threshold must be finite")
    return Decision.from_score(score(model, x), threshold)


@dataclass(frozen=True)
class ClassifierConfig:
    sv1c: Sv1cParams = field(default_factory=Sv1cParams)
    ee: EeParams = field(default_factory=EeParams)
    iforest: IfParams = field(default_factory=IfParams)
    lof: LofParams = field(default_factory=LofParams)
    pca_keep: float | None = 0.30  # EE only; None disables PCA

    def params_for(self, kind: OccKind) -> Params:
        return {OccKind.SV1C: self.sv1c, OccKind.EE: self.ee,
                OccKind.IF: self.iforest, OccKind.LOF: self.lof}[OccKind.parse(kind)]


class Pipeline:
    """Standardizer, optional PCA (EE only) and a fitted one-class model.

    Scores raw feature vectors; ``dim`` is the raw input dimensionality.
    """

    def __init__(self, standardizer: Standardizer, pca: PcaProjector | None, model: OccModel):
        self.standardizer = standardizer
        self.pca = pca
        self.model = model

    @property
    def kind(self) -> OccKind:
        return self.model.kind

    @property
    def dim(self) -> int:
        return self.standardizer.dim

    @property
    def threshold(self) -> float:
        return self.model.threshold

    @property
    def training_scores(self) -> np.ndarray:
        return self.model.training_scores

    def transform(self, X) -> np.ndarray:
        Z = self.standardizer.transform(X)
        return self.pca.transform(Z) if self.pca is not None else Z

    def score_samples(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(1, -1)
        return self.model.score_samples(self.transform(X))

    def score(self, x) -> float:
        return float(self.score_samples(np.asarray(x, float).reshape(1, -1))[0])

    def predict(self, x, threshold: float | None = None) -> Decision:
        return Decision.from_score(self.score(x), self.threshold if threshold is None else threshold)


def fit_pipeline(kind, X, config: ClassifierConfig = ClassifierConfig(), seed: int | None = None) -> Pipeline:
    """Standardize, project (EE only) and fit ``kind`` on genuine samples ``X``."""
    kind = OccKind.parse(kind)
    X = as_feature_matrix(X)
    std = fit_standardizer(X)
    Z = std.transform(X)
    pca = None
    if kind is OccKind.EE and config.pca_keep is not None and config.pca_keep < 1.0:
        if Z.shape[0] < 2:
            raise InsufficientDataError("EE needs at least two training samples")
        pca = fit_pca(Z, config.pca_keep)
        Z = pca.transform(Z)
    params = config.params_for(kind)
    if seed is not None and hasattr(params, "seed"):
        params = dataclasses.replace(params, seed=int(seed))
    model = fit_model(kind, Z, params, allow_fallback=True)
    return Pipeline(std, pca, model)


@dataclass(frozen=True)
class Grid:
    xs: np.ndarray
    ys: np.ndarray
    values: np.ndarray  # values[i, j] at (xs[j], ys[i])

    def rows(self):
        """``(x, y, value)`` triples, x varying fastest."""
        for i, y in enumerate(self.ys):
            for j, x in enumerate(self.xs):
                yield float(x), float(y), float(self.values[i, j])


def decision_grid(model, bounds, resolution: int = 100) -> Grid:
    """Decision values ``score - threshold`` over a 2-D box.

    ``bounds`` is ``((xmin, xmax), (ymin, ymax))``. The zero level set of the
    returned values is the model's decision boundary.
    """
    if model.dim != 2:
        raise DimensionalityError(f"decision grids need a 2-D model, got dim {model.dim}")
    if resolution < 2:
        raise ParameterError("resolution must be at least 2")
    (x0, x1), (y0, y1) = bounds
    xs = np.linspace(x0, x1, resolution)
    ys = np.linspace(y0, y1, resolution)
    XX, YY = np.meshgrid(xs, ys)
    pts = np.column_stack([XX.ravel(), YY.ravel()])
    vals = model.score_samples(pts) - model.threshold
    return Grid(xs, ys, vals.reshape(resolution, resolution))


# serialization ---------------------------------------------------------------

def _params_to_dict(params) -> dict:
    return dataclasses.asdict(params)


def model_to_dict(model: OccModel) -> dict:
    return {
        "kind": model.kind.value,
        "params": _params_to_dict(model.params),
        "state": model.get_state(),
    }


def model_from_dict(d: dict) -> OccModel:
    kind = OccKind.parse(d["kind"])
    params = PARAM_TYPES[kind](**d["params"])
    return MODEL_TYPES[kind].from_state(params, d["state"])


def to_dict(obj: OccModel | Pipeline) -> dict:
    out = {"format": MODEL_FORMAT, "version": MODEL_FORMAT_VERSION}
    if isinstance(obj, Pipeline):
        out["pipeline"] = {
            "standardizer": obj.standardizer.to_dict(),
            "pca": obj.pca.to_dict() if obj.pca is not None else None,
        }
        obj = obj.model
    out["model"] = model_to_dict(obj)
    return out


def from_dict(d: dict) -> OccModel | Pipeline:
    if d.get("format") != MODEL_FORMAT:
        raise ParameterError("not a serialized occauth model")
    if d.get("version") != MODEL_FORMAT_VERSION:
        raise ParameterError(f"unsupported model format version {d.get('version')}")
    model = model_from_dict(d["model"])
    if "pipeline" not in d:
        return model
    p = d["pipeline"]
    pca = PcaProjector.from_dict(p["pca"]) if p["pca"] is not None else None
    return Pipeline(Standardizer.from_dict(p["standardizer"]), pca, model)


def save_model(obj: OccModel | Pipeline, path) -> None:
    Path(path).write_text(json.dumps(to_dict(obj), sort_keys=True), encoding="utf-8")


def load_model(path) -> OccModel | Pipeline:
    return from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


__all__ = [
    "ALL_KINDS", "ClassifierConfig", "DimensionalityError", "EeModel", "EeParams", "Grid",
    "IfModel", "IfParams", "LofModel", "LofParams", "OccKind", "OccModel", "Pipeline",
    "Sv1cModel", "Sv1cParams", "average_path_length", "decision_grid", "fast_mcd", "fit_ee",
    "fit_iforest", "fit_lof", "fit_model", "fit_pipeline", "fit_sv1c", "from_dict",
    "load_model", "predict", "save_model", "score", "to_dict",
]
