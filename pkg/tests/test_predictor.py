import numpy as np
import pytest
from sklearn.base import clone

from orthopreview.augmentation import AugmentConfig
from orthopreview.dataset import DatasetError, DeformityConfig, code_arrays, generate_synthetic_cohort, split_kfold
from orthopreview.losses import LossWeights
from orthopreview.predictor import (
    ResidualCodePredictor,
    TrainConfig,
    TrainingError,
    ablation_study,
    cross_validate,
    identity_baseline,
    learning_rate,
    train,
)

SMALL = LossWeights(0.005, 0.005, 1.0, 1.0)


@pytest.fixture(scope="module")
def cohort64(model64):
    return generate_synthetic_cohort(model64, 40, DeformityConfig(seed=3))


def test_learning_rate_schedule():
    assert learning_rate(0) == 1e-3
    assert learning_rate(99) == 1e-3
    assert learning_rate(100) == 5e-4
    assert learning_rate(250) == pytest.approx(2.5e-4)
    assert learning_rate(499) == pytest.approx(1e-3 / 16)


def test_zero_epochs_returns_initial(model16, rng):
    x = rng.normal(size=(4, 16))
    params, hist = train(model16, x, x, TrainConfig(epochs=0))
    assert len(hist) == 0 and not params.W2.any()


def test_train_rejects_bad_shapes(model16):
    with pytest.raises(TrainingError):
        train(model16, np.zeros((3, 16)), np.zeros((3, 15)))
    with pytest.raises(TrainingError):
        train(model16, np.zeros((0, 16)), np.zeros((0, 16)))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="rmsprop")
    with pytest.raises(ValueError):
        TrainConfig(dropout=1.5)


def test_constant_shift_oracle(model8):
    # latent-only loss on a shift of one mode: the optimum predicts pre + c
    model = model8
    rng = np.random.default_rng(0)
    x = rng.normal(size=(64, 8))
    y = x.copy()
    y[:, 0] += 0.8
    cfg = TrainConfig(batch_size=64, epochs=600, lr=1e-2, decay_every=200, dropout=0.0, hidden=8,
                      weights=LossWeights(0, 0, 1, 0))
    params, hist = train(model, x, y, cfg)
    from orthopreview.network import predict_codes

    shift = predict_codes(params, x) - x
    assert abs(shift[:, 0].mean() - 0.8) < 0.02
    assert np.abs(shift - (y - x)).mean() < 0.02
    assert hist.total[-1] < 1e-2 * hist.total[0]


def test_training_loss_halves(model64):
    x, y = code_arrays(generate_synthetic_cohort(model64, 128, DeformityConfig(seed=11)))
    cfg = TrainConfig(epochs=40, batch_size=16, weights=SMALL, seed=1)
    _, hist = train(model64, x, y, cfg)
    assert hist.total[-1] <= 0.5 * hist.total[0]
    assert len(hist.terms) == 40 and all(np.all(np.asarray(t) >= 0) for t in hist.terms)


def test_training_deterministic(model16, rng):
    x = rng.normal(size=(12, 16))
    y = x + rng.normal(size=(12, 16)) * 0.3
    cfg = TrainConfig(epochs=5, batch_size=5, weights=SMALL, seed=7)
    p1, h1 = train(model16, x, y, cfg)
    p2, h2 = train(model16, x, y, cfg)
    assert np.array_equal(p1.W1, p2.W1) and np.array_equal(p1.W2, p2.W2)
    assert h1.total == h2.total


def test_history_csv(tmp_path, model16, rng):
    x = rng.normal(size=(6, 16))
    _, hist = train(model16, x, x, TrainConfig(epochs=3, batch_size=3, weights=SMALL),
                    validation=(x, [np.zeros((model16.n_vertices, 3))] * 6))
    hist.to_csv(tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,lr,L_p,L_a,L_f,L_g,total,val_HD,val_CD"
    assert len(lines) == 4 and len(hist.val_cd) == 3


def test_kfold_sizes():
    folds = split_kfold(163, 5, seed=0)
    assert sorted((len(f) for f in folds), reverse=True) == [33, 33, 33, 32, 32]
    allidx = np.concatenate(folds)
    assert np.array_equal(np.sort(allidx), np.arange(163))


def test_cross_validation_excludes_synthetic(model64, cohort64):
    cfg = TrainConfig(epochs=2, batch_size=16, weights=SMALL)
    aug = AugmentConfig(factor=1, tau=50.0, seed=2)
    report = cross_validate(model64, cohort64[:10], k=2, config=cfg, augment=aug)
    real_ids = {p.id for p in cohort64[:10]}
    for fold in report.folds:
        assert set(fold.val_ids) <= real_ids
        # 5 real training pairs plus the accepted synthetic ones
        assert fold.n_train == 5 + report.augment_reports[fold.fold].generated
    assert sorted(i for f in report.folds for i in f.val_ids) == sorted(real_ids)
    with pytest.raises(DatasetError):
        cross_validate(model64, cohort64[:3], k=5, config=cfg)


def test_identity_baseline_zero_on_identity_pairs(model16, rng):
    from orthopreview.dataset import PatientPair, face_record

    code = rng.normal(size=16)
    pair = PatientPair("p", face_record(model16, code), face_record(model16, code))
    hd, cd = identity_baseline(model16, [pair])
    assert hd[0] == 0 and cd[0] == 0


def test_ablation_rows(model64, cohort64):
    cfg = TrainConfig(epochs=1, batch_size=16, weights=SMALL)
    rows = ablation_study(model64, cohort64[:10], k=2, config=cfg, augment=AugmentConfig(factor=1, tau=50.0))
    assert [r.name for r in rows] == ["full", "- L_p", "- L_a", "- L_f", "- L_g", "- augmentation"]
    assert rows[-1].data_amount == 5 and rows[0].data_amount >= 5
    assert all(np.isfinite(r.cd) and np.isfinite(r.hd) for r in rows)


# ---------------------------------------------------------------- estimator


def test_estimator_params_and_clone(model16):
    est = ResidualCodePredictor(model16, epochs=3, lr=5e-3)
    assert est.get_params()["epochs"] == 3
    c = clone(est)
    assert c.get_params()["lr"] == 5e-3 and c.model.n_modes == 16
    est.set_params(hidden=12)
    assert est.hidden == 12


def test_estimator_fit_predict(model16, rng):
    x = rng.normal(size=(10, 16))
    y = x + 0.2
    est = ResidualCodePredictor(model16, epochs=3, batch_size=5, alpha_p=0.005, alpha_a=0.005, random_state=4)
    pred = est.fit(x, y).predict(x)
    assert pred.shape == (10, 16) and np.all(np.isfinite(pred))
    assert len(est.history_) == 3


def test_estimator_validation(model16, rng):
    est = ResidualCodePredictor(model16, epochs=1)
    with pytest.raises(Exception):
        est.predict(np.zeros((2, 16)))
    with pytest.raises(ValueError):
        est.fit(np.zeros((4, 15)), np.zeros((4, 15)))
    with pytest.raises(ValueError):
        est.fit(np.full((4, 16), np.nan), np.zeros((4, 16)))
    with pytest.raises(ValueError):
        ResidualCodePredictor(None).fit(np.zeros((4, 16)), np.zeros((4, 16)))
    est.fit(rng.normal(size=(4, 16)), rng.normal(size=(4, 16)))
    with pytest.raises(ValueError):
        est.predict(np.zeros((2, 8)))
