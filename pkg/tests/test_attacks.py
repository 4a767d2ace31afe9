import json

import numpy as np
import pytest

from splitlab.attacks import (
    AttackReport,
    direction_attack,
    infer_k_attack,
    model_completion_attack,
    norm_attack,
    spectral_attack,
)
from splitlab.data import Dataset, gen_synthetic, train_test_split
from splitlab.metrics import leak_auc
from splitlab.models import bottom_network, save_checkpoint
from splitlab.numerics import DegenerateClusteringError, RngStream
from splitlab.secdt import Architecture, normalize_gradients
from splitlab.splitproto import CutLayerMessage, GradientMessage, GradientTap, TrainConfig, run_training


def tap_of(gradients, embeddings=None, epoch=0):
    g = np.asarray(gradients, dtype=float)
    tap = GradientTap()
    ids = np.arange(g.shape[0])
    if embeddings is not None:
        tap.record(CutLayerMessage(epoch, 0, ids, np.asarray(embeddings, dtype=float)))
    tap.record(GradientMessage(epoch, 0, ids, g))
    return tap


# norm

def test_norm_perfect_order():
    rep = norm_attack(tap_of([[0.1, 0.0], [0.0, 0.2], [3.0, 0.0]])).score_against([0, 1, 2], [0, 0, 1])
    assert rep.leak == 1.0


def test_norm_identical_gradients():
    rep = norm_attack(tap_of([[1.0, 2.0]] * 4)).score_against(range(4), [0, 1, 0, 1])
    assert rep.leak == 0.5


def test_norm_empty_tap():
    with pytest.raises(ValueError):
        norm_attack(GradientTap())


def test_norm_sign_flip_invariant():
    g = RngStream(0).gaussian((10, 3))
    np.testing.assert_array_equal(norm_attack(tap_of(g)).scores, norm_attack(tap_of(-g)).scores)


@pytest.mark.parametrize("standard", ["min", "mean", "max"])
def test_norm_dead_after_normalization(standard):
    rng = RngStream(1)
    labels = (rng.uniform(200) < 0.2).astype(int)
    g = rng.child("g").gaussian((200, 8)) * (1 + 4 * labels[:, None])
    before = norm_attack(tap_of(g)).score_against(range(200), labels)
    after = norm_attack(tap_of(normalize_gradients(g, standard))).score_against(range(200), labels)
    assert before.leak > 0.9
    assert abs(after.leak - 0.5) <= 0.05


def test_last_observation_wins():
    tap = GradientTap()
    tap.record(GradientMessage(0, 0, np.array([0, 1]), np.array([[5.0], [1.0]])))
    tap.record(GradientMessage(1, 0, np.array([1, 0]), np.array([[2.0], [3.0]])))
    rep = norm_attack(tap, window=None)
    np.testing.assert_array_equal(rep.sample_ids, [0, 1])
    np.testing.assert_array_equal(rep.scores, [3.0, 2.0])
    np.testing.assert_array_equal(norm_attack(tap, window=(0, 0)).scores, [5.0, 1.0])


# direction

def test_direction_hand_example():
    g = [[1.0, 0.0], [1.0, 0.1], [1.0, -0.1], [0.9, 0.05], [-1.0, 0.0]]
    rep = direction_attack(tap_of(g), majority_class_hint=0)
    np.testing.assert_allclose(rep.scores, [0.75, 0.75, 0.75, 0.75, 0.0])
    np.testing.assert_array_equal(rep.predicted, [0, 0, 0, 0, 1])


def test_direction_parallel_gradients():
    g = np.outer(np.arange(1, 7), [1.0, 2.0])
    rep = direction_attack(tap_of(g)).score_against(range(6), [0, 1, 0, 1, 0, 1])
    assert np.all(rep.scores == 1.0)
    assert rep.leak == 0.5


def test_direction_scale_invariant_and_drops_zeros():
    g = RngStream(3).gaussian((30, 4))
    a = direction_attack(tap_of(g)).scores
    np.testing.assert_array_equal(a, direction_attack(tap_of(g * 7.5)).scores)
    g[4] = 0.0
    rep = direction_attack(tap_of(g))
    assert 4 not in rep.sample_ids and rep.extra["dropped_zero"] == 1


def test_direction_errors():
    with pytest.raises(ValueError):
        direction_attack(tap_of(np.zeros((3, 2))))
    with pytest.raises(ValueError):
        direction_attack(tap_of(np.ones((3, 2))), majority_class_hint=2)


def test_direction_reference_subsample():
    g = RngStream(4).gaussian((50, 3))
    rep = direction_attack(tap_of(g), reference_size=10, rng=RngStream(0))
    assert rep.extra["reference_size"] == 10 and rep.scores.size == 50


# spectral

def test_spectral_two_clusters():
    rng = RngStream(5)
    labels = np.array([0] * 30 + [1] * 10)
    z = rng.gaussian((40, 4)) * 0.1
    z[:, 2] += np.where(labels == 1, 5.0, -5.0)
    rep = spectral_attack(tap_of(np.ones((40, 4)), embeddings=z)).score_against(range(40), labels)
    assert rep.leak == 1.0
    np.testing.assert_array_equal(rep.predicted, labels)


def test_spectral_rows_equal():
    with pytest.raises(ValueError):
        spectral_attack(tap_of(np.ones((5, 2)), embeddings=np.ones((5, 2))))


def test_spectral_needs_two_samples():
    with pytest.raises(ValueError):
        spectral_attack(tap_of([[1.0, 2.0]], embeddings=[[1.0, 2.0]]))


def test_spectral_shift_invariant():
    z = RngStream(6).gaussian((20, 3))
    a = spectral_attack(tap_of(z, embeddings=z)).scores
    b = spectral_attack(tap_of(z, embeddings=z + [4.0, -2.0, 9.0])).scores
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_spectral_gradient_source():
    g = RngStream(7).gaussian((20, 3))
    rep = spectral_attack(tap_of(g), source="gradients")
    assert rep.extra["source"] == "gradients"


# attacks never touch the tap

def test_attacks_are_read_only():
    data = gen_synthetic(64, 6, 2, [0.7, 0.3], 4.0, RngStream(0))
    bottom, top = Architecture(4, 8, 8).build(6, 2, 0)
    tap = run_training(bottom, top, data, TrainConfig(epochs=2, batch_size=16)).tap
    before = tap.digest()
    norm_attack(tap)
    direction_attack(tap)
    spectral_attack(tap)
    spectral_attack(tap, source="gradients")
    infer_k_attack(tap, 2, 4, RngStream(0), restarts=2)
    assert tap.digest() == before


# model completion

def _ten_class(separation, n=3000, seed=0):
    data = gen_synthetic(n, 32, 10, [0.1] * 10, separation, RngStream(seed))
    return train_test_split(data, 0.2, RngStream(seed).child("split"))


def _aux(train, per_class=10):
    picks = np.concatenate([np.flatnonzero(train.labels == c)[:per_class] for c in range(train.k)])
    rest = np.setdiff1d(np.arange(len(train)), picks)
    return train.subset(picks), train.subset(rest)


def test_completion_random_bottom_chance_band():
    # featureless data: nothing to decode, so the attack is at chance
    train, _ = _ten_class(0.0)
    aux, rest = _aux(train)
    bottom = bottom_network(32, rng=RngStream(1))
    rep = model_completion_attack(bottom, aux, rest, rng=RngStream(2)).score_against(rest.ids, rest.labels, 10)
    assert 0.1 - 0.05 <= rep.leak <= 0.1 + 0.15


def test_completion_trained_bottom_decodes():
    train, _ = _ten_class(6.0)
    bottom, top = Architecture().build(32, 10, 0)
    run_training(bottom, top, train, TrainConfig(epochs=10, batch_size=64, learning_rate=0.05))
    aux, rest = _aux(train)
    rep = model_completion_attack(bottom, aux, rest, rng=RngStream(2)).score_against(rest.ids, rest.labels, 10)
    assert rep.leak >= 0.8


def test_completion_from_checkpoint_and_width_check(tmp_path):
    train, _ = _ten_class(3.0, n=600)
    aux, rest = _aux(train, 2)
    bottom = bottom_network(32, rng=RngStream(1))
    path = tmp_path / "bottom.slmd"
    save_checkpoint(bottom, path)
    rep = model_completion_attack(str(path), aux, rest, epochs=2)
    assert rep.predicted.shape == (len(rest),)
    with pytest.raises(ValueError):
        model_completion_attack(bottom_network(31, rng=RngStream(0)), aux, rest)
    with pytest.raises(ValueError):
        model_completion_attack(bottom, aux.subset(np.flatnonzero(aux.labels < 5)), rest, k=10)


def test_completion_binary_scores_are_probabilities():
    data = gen_synthetic(300, 6, 2, [0.5, 0.5], 4.0, RngStream(0))
    aux, rest = _aux(data, 5)
    rep = model_completion_attack(bottom_network(6, rng=RngStream(0)), aux, rest, epochs=20)
    rep.score_against(rest.ids, rest.labels, 2)
    assert rep.metric == "leak_auc" and np.all((rep.scores >= 0) & (rep.scores <= 1))


# K inference

def _blob_tap(c, per=30, seed=0):
    rng = RngStream(seed)
    centres = rng.child("c").gaussian((c, 6)) * 20
    g = np.concatenate([ctr + rng.child(i).gaussian((per, 6)) for i, ctr in enumerate(centres)])
    return tap_of(g)


def test_infer_k_ten_blobs():
    guess, scores = infer_k_attack(_blob_tap(10), 2, 20, RngStream(0))
    assert guess == 10
    assert set(scores) <= set(range(2, 21))


def test_infer_k_two_blobs():
    guess, _ = infer_k_attack(_blob_tap(2), 2, 8, RngStream(0))
    assert guess == 2


def test_infer_k_deterministic():
    tap = _blob_tap(4, seed=3)
    assert infer_k_attack(tap, 2, 8, RngStream(1)) == infer_k_attack(tap, 2, 8, RngStream(1))


def test_infer_k_errors():
    with pytest.raises(ValueError):
        infer_k_attack(_blob_tap(2), 2, 1, RngStream(0))
    with pytest.raises(DegenerateClusteringError):
        infer_k_attack(tap_of(np.ones((6, 2))), 2, 4, RngStream(0))


# report serialisation

def test_report_files(tmp_path):
    rep = direction_attack(tap_of([[1.0, 0.0], [1.0, 0.2], [-1.0, 0.0]]))
    rep.score_against([0, 1, 2], [0, 0, 1])
    rep.write_csv(tmp_path / "d.csv")
    rep.write_json(tmp_path / "d.json")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0] == "sample_id,score,predicted_label" and len(lines) == 4
    summary = json.loads((tmp_path / "d.json").read_text())
    assert summary["attack"] == "direction" and summary["leak"] == 1.0 and summary["window"] == "last"


def test_report_validation():
    with pytest.raises(ValueError):
        AttackReport("x", [0, 1], [0.1])
    with pytest.raises(ValueError):
        AttackReport("x", [0], [np.nan])
    rep = AttackReport("x", [0, 1], [0.2, 0.4])
    with pytest.raises(ValueError):
        rep.score_against([0], [1])
    assert rep.score_against([1, 0], [1, 0]).leak == leak_auc([0.2, 0.4], [0, 1])
