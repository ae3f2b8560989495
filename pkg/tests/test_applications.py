"""Transfer, editing, recognition, k-fold evaluation and embedding dumps."""

import inspect

import numpy as np
import pytest
import torch
from sklearn.dummy import DummyClassifier
from sklearn.linear_model import LogisticRegression

from tergan import applications as apps
from tergan._validation import NotTrainedError, ValidationError
from tergan.data import load_images, make_folds, synth_generate
from tergan.trainer import (OptimizerConfig, TrainingData, TrainState, pretrain_expression_encoder,
                            pretrain_identity_encoder, run_adversarial)

from conftest import tiny_spec


@pytest.fixture(scope="module")
def trained():
    m = make_folds(synth_generate(4, 6, 32, seed=3), k=2, seed=0)
    imgs = load_images(m)
    state = TrainState(tiny_spec(n_identities=4), opt_cfg=OptimizerConfig(batch_size=8))
    data = TrainingData.from_images(m, imgs)
    pretrain_expression_encoder(state, data, 5)
    pretrain_identity_encoder(state, data, 5)
    run_adversarial(state, data, 3)
    return state, m, imgs


def test_untrained_state_is_rejected(trained):
    _, _, imgs = trained
    fresh = TrainState(tiny_spec(n_identities=4))
    with pytest.raises(NotTrainedError):
        apps.transfer(fresh, imgs[0], imgs[1])
    with pytest.raises(NotTrainedError):
        apps.edit(fresh, imgs[0], imgs[1])


def test_transfer_contract(trained):
    state, _, imgs = trained
    out = apps.transfer(state, imgs[0], imgs[7])
    assert out.shape == (32, 32, 3) and out.min() >= 0 and out.max() <= 1
    np.testing.assert_array_equal(out, apps.transfer(state, imgs[0], imgs[7]))
    batch = apps.transfer(state, imgs[:3], imgs[3:6])
    assert batch.shape == (3, 32, 32, 3)


def test_edit_is_transfer_with_roles_named(trained):
    state, _, imgs = trained
    np.testing.assert_array_equal(apps.edit(state, imgs[2], imgs[9]), apps.transfer(state, imgs[9], imgs[2]))


def test_transfer_resizes_inputs(trained):
    state, _, imgs = trained
    big = np.kron(imgs[0], np.ones((2, 2, 1))).astype(np.float32)
    assert apps.transfer(state, big, big).shape == (32, 32, 3)


def test_transfer_and_edit_take_no_labels():
    for fn in (apps.transfer, apps.edit):
        params = set(inspect.signature(fn).parameters)
        assert not params & {"label", "labels", "y", "expression", "identity", "y_s", "y_t"}


def test_transfer_rejects_bad_pixels(trained):
    state, _, imgs = trained
    with pytest.raises(ValidationError):
        apps.transfer(state, imgs[0] * 2, imgs[1])
    with pytest.raises(ValidationError):
        apps.transfer(state, imgs[:2], imgs[:3])


def test_recognize_with_constant_stub(trained):
    state, m, imgs = trained
    stub = DummyClassifier(strategy="constant", constant=4).fit(np.zeros((2, 30)), [4, 1])
    assert apps.recognize(state, imgs, stub).tolist() == [4] * len(imgs)


def test_recognize_requires_fitted_classifier(trained):
    state, _, imgs = trained
    with pytest.raises(NotTrainedError):
        apps.recognize(state, imgs, LogisticRegression())


def test_recognize_is_permutation_equivariant(trained):
    state, m, imgs = trained
    probe = apps.make_probe().fit(apps.encode_expressions(state, imgs), m.expressions)
    perm = np.random.default_rng(0).permutation(len(imgs))
    np.testing.assert_array_equal(apps.recognize(state, imgs[perm], probe),
                                  apps.recognize(state, imgs, probe)[perm])


def test_recognize_ignores_identity_encoder(trained):
    state, m, imgs = trained
    probe = apps.make_probe().fit(apps.encode_expressions(state, imgs), m.expressions)
    before = apps.recognize(state, imgs, probe)
    saved = {k: v.clone() for k, v in state.nets.id_encoder.state_dict().items()}
    try:
        with torch.no_grad():
            for p in state.nets.id_encoder.parameters():
                p.copy_(torch.randn_like(p))
        np.testing.assert_array_equal(apps.recognize(state, imgs, probe), before)
    finally:
        state.nets.id_encoder.load_state_dict(saved)


def test_baseline_encoding_uses_frozen_copy(trained):
    state, _, imgs = trained
    live = apps.encode_expressions(state, imgs)
    base = apps.encode_expressions(state, imgs, baseline=True)
    assert live.shape == base.shape == (len(imgs), state.spec.expr_dim)
    assert not np.allclose(live, base)


# -- k-fold evaluation ------------------------------------------------------


def test_eight_folds_of_ten_identities_without_leakage():
    m = make_folds(synth_generate(80, 6, 32), k=8, seed=0)
    emb = np.random.default_rng(0).normal(size=(len(m), 30))
    result = apps.evaluate_fer(emb, m, 8)
    assert len(result.per_fold) == 8
    assert [len(ids) for ids in result.test_identities] == [10] * 8
    all_ids = [i for ids in result.test_identities for i in ids]
    assert sorted(all_ids) == list(range(80))


def test_perfect_embeddings_give_perfect_accuracy():
    m = make_folds(synth_generate(12, 6, 32), k=4, seed=1)
    emb = np.eye(6)[m.expressions]
    result = apps.evaluate_fer(emb, m, 4)
    assert result.mean == 1.0 and result.per_fold == [1.0] * 4
    assert np.array_equal(np.array(result.confusion), np.diag([12] * 6))


def test_random_embeddings_are_at_chance():
    m = make_folds(synth_generate(120, 6, 32), k=8, seed=2)
    emb = np.random.default_rng(5).normal(size=(len(m), 30))
    result = apps.evaluate_fer(emb, m, 8)
    assert len(m) >= 600
    assert abs(result.mean - 1 / 6) <= 0.05


def test_confusion_rows_count_test_samples_and_mean_is_fold_average():
    m = make_folds(synth_generate(10, 6, 32), k=5, seed=3)
    emb = np.random.default_rng(1).normal(size=(len(m), 8))
    result = apps.evaluate_fer(emb, m, 5)
    assert np.array(result.confusion).sum(axis=1).tolist() == np.bincount(m.expressions).tolist()
    assert result.mean == pytest.approx(np.mean(result.per_fold))


def test_fold_count_mismatch_is_rejected():
    m = make_folds(synth_generate(8, 2, 32), k=4, seed=0)
    with pytest.raises(ValidationError, match="k=8"):
        apps.evaluate_fer(np.zeros((len(m), 3)), m, 8)


def test_leakage_is_caught_by_the_harness():
    m = make_folds(synth_generate(8, 2, 32), k=4, seed=0)
    real = m.record_indices

    def leaky(folds=None):
        idx = real(folds)
        return np.union1d(idx, real([0])) if folds is not None and 0 not in folds else idx
    m.record_indices = leaky
    with pytest.raises(AssertionError, match="both train and test"):
        apps.evaluate_fer(np.random.default_rng(0).normal(size=(len(m), 4)), m, 4)


def test_evaluate_from_state(trained):
    state, m, imgs = trained
    result = apps.evaluate_fer(state, m, 2, images=imgs)
    assert len(result.per_fold) == 2 and 0 <= result.mean <= 1


# -- diagnostics and dumps --------------------------------------------------


def test_identity_probe_extremes():
    m = synth_generate(4, 6, 32)
    one_hot_id = np.eye(4)[m.identities] + 0.01 * np.random.default_rng(0).normal(size=(24, 4))
    assert apps.identity_probe(one_hot_id, m, np.arange(24)) == 1.0
    expr_only = np.eye(6)[m.expressions]
    assert apps.identity_probe(expr_only, m, np.arange(24)) <= 0.5


def test_disentanglement_report_on_ideal_embeddings():
    m = make_folds(synth_generate(10, 6, 32), k=5, seed=0)
    emb = np.eye(6)[m.expressions] + 0.01 * np.random.default_rng(0).normal(size=(60, 6))
    r = apps.disentanglement(emb, m, [0])
    assert r.fer == 1.0 and r.silhouette > 0.9 and r.identity_probe <= 0.75


def test_dump_rows_width_and_csv_round_trip(trained, tmp_path):
    state, m, imgs = trained
    dump = apps.dump_embeddings(state, m, images=imgs)
    assert len(dump) == len(m) and dump.vectors.shape[1] == state.spec.expr_dim
    dump.to_csv(tmp_path / "e.csv")
    header = (tmp_path / "e.csv").read_text().splitlines()[0].split(",")
    assert header == ["expression", "identity"] + [f"f{j}" for j in range(30)]
    back = apps.EmbeddingDump.from_csv(tmp_path / "e.csv")
    np.testing.assert_array_equal(back.vectors, dump.vectors.astype(np.float64))
    np.testing.assert_array_equal(back.expression, m.expressions)


def test_projection_is_reproducible(trained, tmp_path):
    state, m, imgs = trained
    a = apps.dump_embeddings(state, m, project=True, images=imgs, seed=3)
    b = apps.dump_embeddings(state, m, project=True, images=imgs, seed=3)
    assert a.coords.shape == (len(m), 2)
    a.to_csv(tmp_path / "a.csv")
    b.to_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_baseline_dump_variant(trained):
    state, m, imgs = trained
    dump = apps.dump_embeddings(state, m, baseline=True, images=imgs)
    assert dump.variant == "baseline"
    np.testing.assert_array_equal(dump.vectors, apps.encode_expressions(state, imgs, baseline=True))


def test_grid_has_header_strips(tmp_path):
    tiles = [[np.full((8, 8, 3), v, np.float32) for v in (0.0, 0.5, 1.0)] for _ in range(2)]
    canvas = apps.save_grid(tmp_path / "g.png", tiles, row_labels=["a", "b"], col_labels=["x", "y", "z"])
    assert canvas.shape == (14 + 16, 56 + 24, 3)
    assert (tmp_path / "g.png").exists()
    bare = apps.save_grid(tmp_path / "h.png", tiles)
    assert bare.shape == (16, 24, 3)
