import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from tpckit.autograd import Tensor
from tpckit.training import (Adam, AdamState, PredictionTable, TrainConfig, TrainingDiverged, adam_step,
                             get_loss, load_model, mse_loss, msle_loss, predict, save_model, train)

TINY = {"kind": "tpc", "n_layers": 2, "temp_channels": 3, "point_channels": 2,
        "diag_embedding_size": 4, "final_fc_size": 5}


# ---------------------------------------------------------------- losses

def test_msle_hand_values():
    pred = np.array([1.0, math.e, 2.0])
    true = np.array([1.0, 1.0, 2.0])
    assert msle_loss(pred, true).item() == pytest.approx(1.0 / 3)
    # labels under the floor count as the floor
    assert msle_loss(np.array([1 / 48]), np.array([0.0])).item() == 0.0


def test_losses_ignore_masked_positions():
    pred = np.array([[2.0, 5.0, 1.0]])
    true = np.array([[1.0, -3.0, 1.0]])
    mask = np.array([[True, False, True]])
    assert msle_loss(pred, true, mask).item() == pytest.approx(math.log(2) ** 2 / 2)
    assert mse_loss(pred, true, mask).item() == pytest.approx(0.5)
    assert mse_loss(pred, true, mask, reduction="sum").item() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        mse_loss(pred, true, np.zeros((1, 3), bool))
    with pytest.raises(ValueError):
        get_loss("mae")


def test_msle_gradient_at_padding_is_zero():
    pred = Tensor(np.array([[2.0, 0.0]]), requires_grad=True)
    msle_loss(pred, np.array([[1.0, 1.0]]), np.array([[True, False]])).backward()
    assert pred.grad[0, 1] == 0.0
    assert pred.grad[0, 0] == pytest.approx(2 * math.log(2) / 2)


@given(arrays(np.float64, 8, elements=st.floats(0.05, 50)),
       arrays(np.float64, 8, elements=st.floats(0.05, 50)),
       st.floats(0.1, 10))
def test_msle_scale_invariance(pred, true, c):
    a = msle_loss(pred, true, label_floor=1e-6).item()
    b = msle_loss(pred * c, true * c, label_floor=1e-6).item()
    assert a == pytest.approx(b, rel=1e-9, abs=1e-12)


# ---------------------------------------------------------------- Adam

def reference_adam(w, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        out.append(w)
    return out


def test_adam_first_step_is_minus_lr():
    p = {"w": np.array([1.0, -2.0])}
    adam_step(p, {"w": np.array([0.3, -40.0])}, AdamState(), lr=0.01)
    np.testing.assert_allclose(p["w"], [1.0 - 0.01, -2.0 + 0.01], rtol=0, atol=1e-8)


def test_adam_matches_reference_trajectory():
    grads = [0.5, -1.0, 2.0, 0.1, 0.0, -3.0, 1.5, 0.7, -0.2, 4.0]
    p = {"w": np.array([0.25])}
    state = AdamState()
    for g, ref in zip(grads, reference_adam(0.25, grads, 0.05)):
        adam_step(p, {"w": np.array([g])}, state, lr=0.05)
        assert p["w"][0] == pytest.approx(ref, abs=1e-12)
    assert state.t == 10


def test_adam_minimises_quadratic_bowl():
    w = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam([("w", w)], lr=0.1)
    for step in range(200):
        opt.zero_grad()
        (w * w).sum().backward()
        opt.step()
        if abs(w.data[0]) < 1e-3:
            break
    assert abs(w.data[0]) < 1e-3


def test_adam_refuses_non_finite_gradients():
    with pytest.raises(TrainingDiverged, match="'bad'"):
        adam_step({"bad": np.zeros(2)}, {"bad": np.array([np.nan, 0.0])}, AdamState(), 0.1)


# ---------------------------------------------------------------- training loop

@pytest.fixture(scope="module")
def tiny_run(small_dataset):
    cfg = TrainConfig(TINY, epochs=2, batch_size=8, seed=3)
    return train(small_dataset, cfg)


def test_train_is_deterministic(small_dataset, tiny_run):
    again = train(small_dataset, TrainConfig(TINY, epochs=2, batch_size=8, seed=3))
    assert again.train_loss == tiny_run.train_loss
    assert again.val_loss == tiny_run.val_loss
    np.testing.assert_array_equal(again.predictions.y_pred, tiny_run.predictions.y_pred)
    other = train(small_dataset, TrainConfig(TINY, epochs=2, batch_size=8, seed=4))
    assert other.train_loss != tiny_run.train_loss


def test_checkpoint_round_trip_is_bit_identical(tmp_path, small_dataset, tiny_run):
    path = save_model(tiny_run.model, tmp_path / "m.ckpt")
    back = load_model(path, expected_hash=tiny_run.config_hash)
    test = small_dataset.splits["test"]
    np.testing.assert_array_equal(predict(back, test).y_pred, predict(tiny_run.model, test).y_pred)
    with pytest.raises(ValueError):
        load_model(path, expected_hash="0" * 16)
    with pytest.raises(ValueError):
        predict(tiny_run.model, test, expected_hash="0" * 16)


def test_predictions_cover_every_valid_hour(small_dataset, tiny_run):
    test = small_dataset.splits["test"]
    table = tiny_run.predictions
    assert len(table) == sum(s.n_valid for s in test)
    assert np.all((table.y_pred >= 1 / 48) & (table.y_pred <= 100))
    s = next(s for s in test if s.n_valid)
    rows = table.stay_id == s.stay_id
    np.testing.assert_array_equal(table.hour[rows], np.flatnonzero(s.valid))
    np.testing.assert_array_equal(table.y_true[rows], s.labels[s.valid])


def test_prediction_table_csv_round_trip(tmp_path, tiny_run):
    path = tiny_run.predictions.to_csv(tmp_path / "p.csv")
    back = PredictionTable.from_csv(path)
    np.testing.assert_array_equal(back.y_pred, tiny_run.predictions.y_pred)
    np.testing.assert_array_equal(back.stay_id, tiny_run.predictions.stay_id)
    assert path.read_text().splitlines()[0] == "stay_id,hour,y_true,y_pred"


def test_best_epoch_restored(small_dataset, tiny_run):
    assert tiny_run.best_epoch == int(np.argmin(tiny_run.val_msle))


def test_write_run_outputs(tmp_path, small_dataset):
    run = train(small_dataset, TrainConfig({"kind": "median"}), out_dir=tmp_path / "r", dataset_hash="abc")
    assert {p.name for p in (tmp_path / "r").iterdir()} == {"model.ckpt", "predictions.csv", "run.json"}
    assert np.all(run.predictions.y_pred == run.model.constant)
    assert '"dataset_hash": "abc"' in (tmp_path / "r" / "run.json").read_text()


def test_packed_and_padded_training_both_learn(small_dataset):
    for pack in (True, False):
        run = train(small_dataset, TrainConfig(TINY, epochs=3, batch_size=16, seed=0, pack=pack))
        assert run.train_loss[-1] < run.train_loss[0]


def test_train_config_defaults_and_validation():
    cfg = TrainConfig({"kind": "lstm"})
    assert (cfg.lr, cfg.batch_size, cfg.epochs) == (0.00129, 512, 8)
    assert TrainConfig({"kind": "tpc"}).lr == 0.00226
    with pytest.raises(ValueError):
        TrainConfig({"kind": "tpc"}, batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig({"kind": "tpc"}, loss="huber")


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported(small_dataset):
    with pytest.raises(TrainingDiverged, match="epoch"):
        train(small_dataset, TrainConfig(TINY, epochs=1, batch_size=8, lr=float("inf")))
