"""scikit-learn style wrappers around the reconstruction methods.

Each estimator maps a :class:`ProjectionSet` to a :class:`Volume` through
``predict``.  The classical methods have nothing to learn, so ``fit`` only
validates hyper-parameters; :class:`DiCEReconstructor` trains on a dataset manifest.
"""

from __future__ import annotations

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .baselines import fdk_reconstruct, sart_reconstruct
from .dice import ModelConfig, reconstruct_volume
from .errors import InvalidConfig, InvalidRelaxation
from .training import DatasetManifest, TrainStageConfig, new_model, train_stage
from .volumes import ProjectionSet, Volume


def check_projection_set(proj) -> ProjectionSet:
    """Validate an estimator input and return it."""
    if not isinstance(proj, ProjectionSet):
        raise TypeError(f"expected a ProjectionSet, got {type(proj).__name__}")
    if len(proj) == 0:
        raise ValueError("projection set is empty")
    return proj


class FDKReconstructor(BaseEstimator):
    def __init__(self, filter: str = "ram-lak", short_scan: bool = True):
        self.filter = filter
        self.short_scan = short_scan

    def fit(self, proj=None, y=None):
        if self.filter not in ("ram-lak", "hann-apodized"):
            raise InvalidConfig(f"unknown filter {self.filter!r}")
        self.fitted_ = True
        return self

    def predict(self, proj) -> Volume:
        check_is_fitted(self)
        return fdk_reconstruct(check_projection_set(proj), filter=self.filter,
                               short_scan=self.short_scan)


class SARTReconstructor(BaseEstimator):
    def __init__(self, iterations: int = 10, relax: float = 0.5, step_frac: float = 0.5):
        self.iterations = iterations
        self.relax = relax
        self.step_frac = step_frac

    def fit(self, proj=None, y=None):
        if not 0.0 <= self.relax <= 1.0:
            raise InvalidRelaxation(f"relaxation must lie in [0, 1], got {self.relax}")
        if self.iterations < 0:
            raise InvalidConfig("iterations must be >= 0")
        self.fitted_ = True
        return self

    def predict(self, proj) -> Volume:
        check_is_fitted(self)
        return sart_reconstruct(check_projection_set(proj), iterations=self.iterations,
                                relax=self.relax, step_frac=self.step_frac)


class DiCEReconstructor(BaseEstimator):
    """Pretrain, then finetune in two steps for ``n_views`` input views.

    ``iterations`` gives the (pretrain, step-1, step-2) iteration counts;
    stage hyper-parameters not listed here keep their defaults.
    """

    def __init__(self, n_views: int = 6, n_min: int = 3, n_max: int = 8,
                 model_config: ModelConfig | None = None, iterations=(1200, 400, 400),
                 lr: float = 1e-3, n_points: int = 2048, seed: int = 0):
        self.n_views = n_views
        self.n_min = n_min
        self.n_max = n_max
        self.model_config = model_config
        self.iterations = iterations
        self.lr = lr
        self.n_points = n_points
        self.seed = seed

    def _stage(self, stage: str, seed: int) -> TrainStageConfig:
        return TrainStageConfig.for_stage(stage, None if stage == "pretrain" else self.n_views,
                                          n_max=self.n_max, n_min=self.n_min, lr=self.lr,
                                          n_points=self.n_points, seed=seed)

    def fit(self, manifest: DatasetManifest, y=None):
        if len(self.iterations) != 3:
            raise InvalidConfig("iterations needs three stage counts")
        train = manifest.load_split("train")
        model = new_model(self.model_config or ModelConfig.mini(), self.seed, manifest.norm_max)
        for k, stage in enumerate(("pretrain", "step1", "step2")):
            train_stage(model, train, self._stage(stage, self.seed + k), iterations=self.iterations[k])
        self.model_ = model
        return self

    def predict(self, proj) -> Volume:
        check_is_fitted(self)
        return reconstruct_volume(check_projection_set(proj), self.model_)
