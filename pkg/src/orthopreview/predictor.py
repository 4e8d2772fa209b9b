"""Training loop, k-fold cross-validation and a scikit-learn style estimator
for the residual code predictor."""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace
from os import PathLike

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .augmentation import AugmentConfig, augment_dataset
from .dataset import DatasetError, code_arrays, split_kfold
from .losses import TERMS, LossEvaluator, LossWeights
from .metrics import chamfer_distance, hausdorff_distance
from .morphable import MorphableModel, decode_vertices, region_mask
from .network import SGD, Adam, MlpParams, backward, forward, init_params, predict_codes, update_running_stats

OPTIMIZERS = {"adam": Adam, "sgd": SGD}


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 150
    epochs: int = 500
    lr: float = 1e-3
    decay: float = 0.5
    decay_every: int = 100
    dropout: float = 0.5
    momentum: float = 0.1
    hidden: int = 100
    optimizer: str = "adam"
    seed: int = 0
    weights: LossWeights = LossWeights()
    asymmetry_normal: str = "fitted"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0.0 <= self.dropout <= 1.0 or not 0.0 <= self.momentum <= 1.0:
            raise ValueError("dropout and momentum must lie in [0, 1]")
        if self.decay_every < 1:
            raise ValueError("decay_every must be >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {sorted(OPTIMIZERS)}")


def learning_rate(epoch, lr=1e-3, decay=0.5, every=100):
    """Step schedule: ``lr`` scaled by ``decay`` after each block of ``every`` epochs."""
    return lr * decay ** (epoch // every)


@dataclass
class TrainHistory:
    lr: list = field(default_factory=list)
    terms: list = field(default_factory=list)  # per epoch: mean L_p, L_a, L_f, L_g
    total: list = field(default_factory=list)
    val_hd: list = field(default_factory=list)
    val_cd: list = field(default_factory=list)

    def __len__(self):
        return len(self.total)

    def to_csv(self, path: str | PathLike):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "lr", *TERMS, "total", "val_HD", "val_CD"])
            for e in range(len(self)):
                hd = repr(self.val_hd[e]) if self.val_hd else ""
                cd = repr(self.val_cd[e]) if self.val_cd else ""
                w.writerow([e, repr(self.lr[e]), *(repr(float(t)) for t in self.terms[e]),
                            repr(self.total[e]), hd, cd])


# ---------------------------------------------------------------- metrics


def face_metrics(model: MorphableModel, pred_codes, gt_vertices, root=False):
    """Hausdorff and Chamfer between decoded predictions and ground-truth
    vertex arrays, both restricted to the face region. Returns two (n,) arrays."""
    face = region_mask(model, "face").indices
    pred = decode_vertices(model, np.atleast_2d(pred_codes))
    hd = np.empty(len(pred))
    cd = np.empty(len(pred))
    for i, (p, g) in enumerate(zip(pred, gt_vertices)):
        a, b = p[face], np.asarray(g)[face]
        hd[i] = hausdorff_distance(a, b)
        cd[i] = chamfer_distance(a, b, root=root)
    return hd, cd


# ---------------------------------------------------------------- training


def _check_terms(terms):
    bad = ~np.isfinite(terms)
    if np.any(bad):
        names = [TERMS[j] for j in range(4) if bad[:, j].any()]
        raise TrainingError(f"non-finite loss in term(s) {', '.join(names)}")


def train(model: MorphableModel, pre_codes, post_codes, config: TrainConfig = TrainConfig(),
          validation=None, params: MlpParams | None = None, evaluator: LossEvaluator | None = None):
    """Fit the residual predictor on ``(pre, post)`` code pairs.

    ``validation`` is an optional ``(pre_codes, post_vertices)`` tuple used
    for per-epoch Hausdorff / Chamfer. Returns ``(params, history)``.
    """
    x = np.atleast_2d(np.asarray(pre_codes, dtype=np.float64))
    y = np.atleast_2d(np.asarray(post_codes, dtype=np.float64))
    if len(x) < 1 or x.shape != y.shape or x.shape[1] != model.n_modes:
        raise TrainingError("need at least one (pre, post) pair of length-K codes")
    rng = np.random.default_rng(config.seed)
    params = params.copy() if params is not None else init_params(model.n_modes, config.hidden, rng)
    history = TrainHistory()
    if config.epochs == 0:
        return params, history
    ev = evaluator or LossEvaluator(model, config.weights, config.asymmetry_normal)
    w = config.weights
    target = ev.target_normals(y) if w.alpha_g > 0 and w.w_normal > 0 else None
    opt = OPTIMIZERS[config.optimizer](params)
    n, bs = len(x), config.batch_size
    for epoch in range(config.epochs):
        lr = learning_rate(epoch, config.lr, config.decay, config.decay_every)
        order = rng.permutation(n)
        term_sum = np.zeros(4)
        total_sum = 0.0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            delta, cache = forward(params, x[idx], "train", rng, config.dropout)
            terms, total, g = ev.evaluate(x[idx] + delta, y[idx], None if target is None else target[idx])
            _check_terms(terms)
            grads, _ = backward(params, cache, g / len(idx))
            opt.step(params, grads, lr)
            update_running_stats(params, cache, config.momentum)
            term_sum += terms.sum(axis=0)
            total_sum += float(total.sum())
        if not np.isfinite(total_sum):
            raise TrainingError("non-finite total loss")
        history.lr.append(lr)
        history.terms.append(term_sum / n)
        history.total.append(total_sum / n)
        if validation is not None:
            hd, cd = face_metrics(model, predict_codes(params, validation[0]), validation[1])
            history.val_hd.append(float(hd.mean()))
            history.val_cd.append(float(cd.mean()))
    params.check()
    return params, history


# ---------------------------------------------------------------- cross-validation


@dataclass
class FoldResult:
    fold: int
    n_train: int
    n_val: int
    val_ids: list
    hd: np.ndarray
    cd: np.ndarray


@dataclass
class CVReport:
    folds: list
    augment_reports: list = field(default_factory=list)

    def _stat(self, name):
        per_fold = np.array([getattr(f, name).mean() for f in self.folds])
        return float(per_fold.mean()), float(per_fold.min()), float(per_fold.max())

    def summary(self):
        """Mean / min / max of the per-fold mean HD and CD."""
        (hm, hlo, hhi), (cm, clo, chi) = self._stat("hd"), self._stat("cd")
        return {"hd_mean": hm, "hd_min": hlo, "hd_max": hhi, "cd_mean": cm, "cd_min": clo, "cd_max": chi,
                "data_amount": int(round(np.mean([f.n_train for f in self.folds])))}


def _child_seed(seed, *key):
    return int(np.random.SeedSequence(seed, spawn_key=key).generate_state(1)[0])


def cross_validate(model: MorphableModel, pairs, k=5, config: TrainConfig = TrainConfig(),
                   augment: AugmentConfig | None = None, split_seed=0, evaluator=None, root=False,
                   augment_cache=None):
    """k-fold CV over the non-synthetic pairs.

    Folds come from a seeded shuffle; only the training split of each fold
    is augmented, so synthetic pairs never reach validation. A dict passed
    as ``augment_cache`` lets repeated runs over the same folds reuse the
    synthetic pairs.
    """
    real = [p for p in pairs if p.provenance != "synthetic"]
    if len(real) < k:
        raise DatasetError(f"need at least {k} real pairs, got {len(real)}")
    folds = split_kfold(len(real), k, split_seed)
    ev = evaluator or LossEvaluator(model, config.weights, config.asymmetry_normal)
    results, reports = [], []
    for f, val_idx in enumerate(folds):
        if len(val_idx) == 0:
            raise DatasetError(f"fold {f} has no validation pairs")
        held = set(val_idx.tolist())
        train_pairs = [real[i] for i in range(len(real)) if i not in held]
        val_pairs = [real[i] for i in val_idx]
        if augment is not None:
            key = (f, augment, split_seed, tuple(p.id for p in train_pairs))
            if augment_cache is not None and key in augment_cache:
                synth, rep = augment_cache[key]
            else:
                synth, rep = augment_dataset(model, train_pairs, replace(augment, seed=_child_seed(augment.seed, f)))
                if augment_cache is not None:
                    augment_cache[key] = synth, rep
            reports.append(rep)
            train_pairs = train_pairs + synth
        if any(p.provenance == "synthetic" for p in val_pairs):
            raise DatasetError("synthetic pair in a validation fold")
        x, y = code_arrays(train_pairs)
        params, _ = train(model, x, y, replace(config, seed=_child_seed(config.seed, f)), evaluator=ev)
        vx, _ = code_arrays(val_pairs)
        hd, cd = face_metrics(model, predict_codes(params, vx), [p.post.mesh.vertices for p in val_pairs], root)
        results.append(FoldResult(f, len(train_pairs), len(val_pairs), [p.id for p in val_pairs], hd, cd))
    return CVReport(results, reports)


def identity_baseline(model: MorphableModel, pairs, root=False):
    """Metrics of predicting post = pre."""
    x, _ = code_arrays(pairs)
    return face_metrics(model, x, [p.post.mesh.vertices for p in pairs], root)


# ---------------------------------------------------------------- estimator


class ResidualCodePredictor(RegressorMixin, BaseEstimator):
    """Estimator wrapper: ``fit(pre_codes, post_codes)``, ``predict(pre_codes)``.

    Parameters mirror :class:`TrainConfig` plus the loss weights; the
    morphable model is required because the losses act on decoded faces.
    """

    def __init__(self, model=None, hidden=100, batch_size=150, epochs=500, lr=1e-3, decay=0.5,
                 decay_every=100, dropout=0.5, optimizer="adam", alpha_p=5000.0, alpha_a=5000.0,
                 alpha_f=1.0, alpha_g=1.0, w_normal=1.0, asymmetry_normal="fitted", random_state=0):
        self.model = model
        self.hidden = hidden
        self.batch_size = batch_size
        self.epochs = epochs
        self.lr = lr
        self.decay = decay
        self.decay_every = decay_every
        self.dropout = dropout
        self.optimizer = optimizer
        self.alpha_p = alpha_p
        self.alpha_a = alpha_a
        self.alpha_f = alpha_f
        self.alpha_g = alpha_g
        self.w_normal = w_normal
        self.asymmetry_normal = asymmetry_normal
        self.random_state = random_state

    def _config(self):
        weights = LossWeights(self.alpha_p, self.alpha_a, self.alpha_f, self.alpha_g, self.w_normal)
        return TrainConfig(self.batch_size, self.epochs, self.lr, self.decay, self.decay_every, self.dropout,
                           hidden=self.hidden, optimizer=self.optimizer, seed=int(self.random_state or 0),
                           weights=weights, asymmetry_normal=self.asymmetry_normal)

    def fit(self, X, y):
        if self.model is None:
            raise ValueError("a MorphableModel is required")
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True, dtype=np.float64)
        if y.ndim != 2 or y.shape != X.shape or X.shape[1] != self.model.n_modes:
            raise ValueError(f"X and y must both be (n, {self.model.n_modes})")
        self.params_, self.history_ = train(self.model, X, y, self._config())
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return predict_codes(self.params_, X)


# ---------------------------------------------------------------- ablation


ABLATIONS = ("full", "- L_p", "- L_a", "- L_f", "- L_g", "- augmentation")
_ZEROED = {"- L_p": "alpha_p", "- L_a": "alpha_a", "- L_f": "alpha_f", "- L_g": "alpha_g"}


@dataclass(frozen=True)
class AblationRow:
    name: str
    hd: float
    cd: float
    data_amount: int
    seconds: float = 0.0


def ablation_study(model: MorphableModel, pairs, k=5, config: TrainConfig = TrainConfig(),
                   augment: AugmentConfig = AugmentConfig(), split_seed=0, root=False, names=ABLATIONS):
    """Cross-validate the full pipeline and each single ablation.

    Every row shares folds, seeds and, when augmenting, the synthetic data.
    """
    rows, cache = [], {}
    for name in names:
        if name not in ABLATIONS:
            raise ValueError(f"unknown ablation {name!r}")
        cfg = config
        if name in _ZEROED:
            cfg = replace(config, weights=replace(config.weights, **{_ZEROED[name]: 0.0}))
        t0 = time.perf_counter()
        report = cross_validate(model, pairs, k, cfg, None if name == "- augmentation" else augment,
                                split_seed, root=root, augment_cache=cache)
        s = report.summary()
        rows.append(AblationRow(name, s["hd_mean"], s["cd_mean"], s["data_amount"], time.perf_counter() - t0))
    return rows
