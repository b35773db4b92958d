"""scikit-learn style front end to the flow model.

``fit(X, y, schedules)`` takes rest series ``X`` and task series ``y``
(arrays or TimeSeries) with optional event schedules; ``predict`` samples
task series for new rest series.  Hyperparameters are constructor
arguments so ``get_params``/``set_params``/``clone`` work as usual.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import flow, metrics
from .data import SubjectPair
from .io import RunConfig, TimeSeries, ValidationError


def check_series(x, tr=None, name="series"):
    """Coerce an array or TimeSeries to a validated TimeSeries."""
    if isinstance(x, TimeSeries):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if tr is None:
        raise ValidationError(f"{name}: tr is required for plain arrays")
    return TimeSeries(arr, tr)


def check_paired(X, y=None, schedules=None, tr=None):
    """Validate parallel lists of rest series, task series and schedules."""
    X = list(X)
    if not X:
        raise ValidationError("no samples")
    rests = [check_series(x, tr, "rest") for x in X]
    tasks = None
    if y is not None:
        y = list(y)
        if len(y) != len(X):
            raise ValidationError(f"X has {len(X)} samples but y has {len(y)}")
        tasks = [check_series(t, tr, "task") for t in y]
        for r, t in zip(rests, tasks):
            if r.n_regions != t.n_regions:
                raise ValidationError(f"rest has {r.n_regions} ROIs but task has {t.n_regions}")
    if schedules is None:
        schedules = [None] * len(X)
    schedules = list(schedules)
    if len(schedules) != len(X):
        raise ValidationError(f"X has {len(X)} samples but {len(schedules)} schedules")
    return rests, tasks, schedules


class RestToTaskFlow(BaseEstimator):
    """Event-conditioned flow-matching generator of task series from rest series.

    Parameters not listed explicitly (architecture, band, Adam betas) come
    from ``config``; explicit arguments override it.
    """

    def __init__(self, config=None, lambda_fc=1.0, lambda_psd=0.1, use_events=True, epochs=50,
                 batch_size=16, learning_rate=1e-3, weight_decay=1e-5, euler_steps=50, random_state=0):
        self.config = config
        self.lambda_fc = lambda_fc
        self.lambda_psd = lambda_psd
        self.use_events = use_events
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.euler_steps = euler_steps
        self.random_state = random_state

    def run_config(self):
        base = self.config if self.config is not None else RunConfig()
        return base.replace(lambda_fc=self.lambda_fc, lambda_psd=self.lambda_psd, use_events=self.use_events,
                            epochs=self.epochs, batch_size=self.batch_size, lr=self.learning_rate,
                            weight_decay=self.weight_decay, euler_steps=self.euler_steps,
                            seed=self.random_state)

    def fit(self, X, y, schedules=None, tr=None):
        rests, tasks, schedules = check_paired(X, y, schedules, tr)
        pairs = [SubjectPair(r, t, s, str(i)) for i, (r, t, s) in enumerate(zip(rests, tasks, schedules))]
        self.model_, self.history_ = flow.train(pairs, self.run_config())
        self.n_regions_ = self.model_.n_regions
        self.vocab_ = dict(self.model_.vocab)
        self.tr_ = self.model_.tr
        return self

    def sample(self, X, schedules=None, random_state=None, steps=None):
        """Generated task arrays, shape (n_samples, T, V)."""
        check_is_fitted(self, "model_")
        rests, _, schedules = check_paired(X, None, schedules, self.tr_)
        for r in rests:
            if r.n_regions != self.n_regions_:
                raise ValidationError(f"model expects {self.n_regions_} ROIs, got {r.n_regions}")
        seed = self.random_state if random_state is None else random_state
        rng = np.random.default_rng(seed)
        return flow.sample_batch(self.model_, [r.data for r in rests], schedules, steps, rng)

    predict = sample

    def evaluate(self, X, y, schedules=None, random_state=None, task="task"):
        """MetricReport of generated versus real task series."""
        check_is_fitted(self, "model_")
        _, tasks, _ = check_paired(X, y, schedules, self.tr_)
        gen = self.sample(X, schedules, random_state)
        cfg = self.model_.config
        return metrics.evaluate([t.data for t in tasks], list(gen), self.tr_, cfg.band,
                                min(cfg.welch_seg_len, gen.shape[1]), task=task)

    def score(self, X, y, schedules=None):
        """Mean FC similarity between generated and real task series."""
        return self.evaluate(X, y, schedules).fc_sim

    def save(self, path):
        check_is_fitted(self, "model_")
        flow.save_checkpoint(self.model_, self.history_, path)

    @classmethod
    def load(cls, path):
        model, history = flow.load_checkpoint(Path(path))
        cfg = model.config
        est = cls(config=cfg, lambda_fc=cfg.lambda_fc, lambda_psd=cfg.lambda_psd, use_events=cfg.use_events,
                  epochs=cfg.epochs, batch_size=cfg.batch_size, learning_rate=cfg.lr,
                  weight_decay=cfg.weight_decay, euler_steps=cfg.euler_steps, random_state=cfg.seed)
        est.model_, est.history_ = model, history
        est.n_regions_, est.vocab_, est.tr_ = model.n_regions, dict(model.vocab), model.tr
        return est
