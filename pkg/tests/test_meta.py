from pathlib import Path

import numpy as np
import pytest

from ataml.autodiff import AdamState, Tensor, backward_through_backward, grad
from ataml.encoders import TcnConfig
from ataml.learner import loss as head_loss
from ataml.meta import (
    ATAML,
    MAML,
    PRETRAIN,
    RANDOM,
    MetaConfig,
    NonFiniteGradient,
    evaluate_query,
    inner_adapt,
    meta_episode_loss,
    meta_step,
    meta_test,
    meta_train,
    pretrain_baseline,
)
from ataml.model import ATT_KEY, HEAD_W, Model, ModelConfig, PartitionedParams
from ataml.tasks import Episode, EpisodeStream, build_mini_corpus, pad_batch, synth_tasks

from oracles import rel_err

D = 6


@pytest.fixture(scope="module")
def data():
    synth = synth_tasks(vocab_size=60, n_classes=10, docs_per_class=10, seed=0, split_counts=(6, 2, 2), doc_len=(6, 9))
    mini = build_mini_corpus(synth.corpus, per_class=10, train_per_class=3, seed=0)
    emb = np.random.default_rng(0).normal(size=(len(synth.corpus.vocab), D))
    return synth, mini, emb


def _model(data, encoder="tcn", attention=True, dropout=0.0):
    _, _, emb = data
    cfg = ModelConfig(encoder=encoder, attention=attention, d_emb=D, tcn=TcnConfig(channels=5, dropout_rate=dropout))
    return Model(cfg, emb)


def _episodes(data, n, seed=0, way=3, shot=1, q=2):
    synth, mini, _ = data
    return EpisodeStream(mini, synth.split.train_classes, way, shot, seed, query_per_class=q).take(n)


def test_inner_step_is_plain_gradient_descent(data):
    model = _model(data)
    params = model.init_params(3, np.random.default_rng(0))
    ep = _episodes(data, 1)[0]
    cfg = MetaConfig(algorithm=ATAML, inner_steps=1, inner_lr=0.1)
    z, _ = model.forward(params.all(), pad_batch(ep.support))
    g = grad(head_loss(z, ep.support_labels), params.task_specific)
    adapted = inner_adapt(model, params, ep, cfg, np.random.default_rng(0), differentiable=False, train=False)
    for k in params.task_names:
        np.testing.assert_allclose(adapted.fast[k].data, params.task_specific[k].data - 0.1 * g[k].data, atol=1e-14)


def test_zero_learning_rate_leaves_weights_unchanged(data):
    model = _model(data)
    params = model.init_params(3, np.random.default_rng(0))
    ep = _episodes(data, 1)[0]
    adapted = inner_adapt(model, params, ep, MetaConfig(algorithm=MAML), None, lr=0.0, train=False)
    for k, v in params.all().items():
        assert adapted.fast[k].data.tobytes() == v.data.tobytes()


def test_ataml_inner_loop_keeps_shared_weights_bitwise(data):
    model = _model(data, dropout=0.5)
    params = model.init_params(3, np.random.default_rng(0))
    before = params.arrays()
    ep = _episodes(data, 1)[0]
    adapted = inner_adapt(model, params, ep, MetaConfig(algorithm=ATAML), np.random.default_rng(1))
    for k in params.shared_names:
        assert adapted.fast[k] is params.shared[k]
        assert adapted.fast[k].data.tobytes() == before[k].tobytes()
    for k in params.task_names:
        assert not np.array_equal(adapted.fast[k].data, before[k])


def test_maml_inner_loop_moves_shared_weights(data):
    model = _model(data)
    params = model.init_params(3, np.random.default_rng(0))
    ep = _episodes(data, 1)[0]
    adapted = inner_adapt(model, params, ep, MetaConfig(algorithm=MAML), None, train=False)
    assert not np.array_equal(adapted.fast["tcn.conv0.w"].data, params.shared["tcn.conv0.w"].data)


def test_frozen_attention_slow_weight_is_untouched(data):
    model = _model(data)
    params = model.init_params(3, np.random.default_rng(0))
    before = params.arrays()
    cfg = MetaConfig(algorithm=ATAML, freeze_attention_slow=True, meta_lr=0.01)
    meta_step(model, params, _episodes(data, 2), cfg, AdamState(), np.random.default_rng(0))
    assert params.task_specific[ATT_KEY].data.tobytes() == before[ATT_KEY].tobytes()
    assert not np.array_equal(params.task_specific[HEAD_W].data, before[HEAD_W])
    assert not np.array_equal(params.shared["tcn.conv0.w"].data, before["tcn.conv0.w"])


@pytest.mark.parametrize("algorithm", [MAML, ATAML])
def test_duplicated_task_doubles_meta_loss(data, algorithm):
    model = _model(data)
    params = model.init_params(3, np.random.default_rng(0))
    ep = _episodes(data, 1)[0]
    cfg = MetaConfig(algorithm=algorithm)
    one, _ = meta_episode_loss(model, params, [ep], cfg, np.random.default_rng(0))
    two, _ = meta_episode_loss(model, params, [ep, ep], cfg, np.random.default_rng(0))
    assert float(two.data) == pytest.approx(2 * float(one.data), rel=1e-12)


def _meta_grad_vs_fd(model, params, eps, cfg):
    def value(arrays):
        p = params.copy()
        p.load_arrays(arrays)
        total, _ = meta_episode_loss(model, p, eps, cfg, None)
        return float(total.data)

    total, _ = meta_episode_loss(model, params, eps, cfg, None)
    analytic = backward_through_backward(total, params.all())
    base = params.arrays()
    rng = np.random.default_rng(5)
    # directional derivative along a random unit direction
    direction = {k: rng.normal(size=v.shape) for k, v in base.items()}
    norm = np.sqrt(sum(np.sum(d * d) for d in direction.values()))
    direction = {k: d / norm for k, d in direction.items()}
    h = 1e-5
    plus = value({k: base[k] + h * direction[k] for k in base})
    minus = value({k: base[k] - h * direction[k] for k in base})
    fd = (plus - minus) / (2 * h)
    an = sum(float(np.sum(analytic[k].data * direction[k])) for k in base)
    return rel_err(np.array([an]), np.array([fd]))


@pytest.mark.parametrize("algorithm", [MAML, ATAML])
def test_second_order_meta_gradient_of_linear_model_matches_finite_differences(data, algorithm):
    model = _model(data, encoder="none")
    params = model.init_params(3, np.random.default_rng(0))
    cfg = MetaConfig(algorithm=algorithm, inner_steps=2, inner_lr=0.5)
    assert _meta_grad_vs_fd(model, params, _episodes(data, 2), cfg) < 1e-3


def test_second_order_meta_gradient_through_tcn_matches_finite_differences(data):
    model = _model(data)
    params = model.init_params(3, np.random.default_rng(1))
    cfg = MetaConfig(algorithm=MAML, inner_steps=2, inner_lr=0.3)
    assert _meta_grad_vs_fd(model, params, _episodes(data, 1), cfg) < 1e-3


def test_first_order_differs_from_second_order(data):
    model = _model(data, encoder="none")
    params = model.init_params(3, np.random.default_rng(0))
    eps = _episodes(data, 1)
    out = []
    for fo in (False, True):
        total, _ = meta_episode_loss(model, params, eps, MetaConfig(algorithm=MAML, first_order=fo, inner_lr=0.5), None)
        out.append(backward_through_backward(total, params.all())[HEAD_W].data)
    assert not np.allclose(out[0], out[1])


def test_non_finite_meta_gradient_names_the_parameter(data):
    model = _model(data)
    params = model.init_params(3, np.random.default_rng(0))
    params.task_specific[ATT_KEY].data[0] = np.nan
    with pytest.raises(NonFiniteGradient, match="non-finite meta-gradient in parameter"):
        meta_step(model, params, _episodes(data, 1), MetaConfig(), AdamState(), np.random.default_rng(0))


def test_meta_step_reports_loss_and_updates_in_place(data):
    model = _model(data, dropout=0.5)
    params = model.init_params(3, np.random.default_rng(0))
    before = params.arrays()
    info = meta_step(model, params, _episodes(data, 2), MetaConfig(meta_lr=0.01), AdamState(), np.random.default_rng(0))
    assert info.loss > 0 and info.grad_norm > 0 and info.tape_nodes > 0
    assert any(not np.array_equal(before[k], v) for k, v in params.arrays().items())


def test_meta_test_with_zero_steps_scores_the_initial_weights(data):
    model = _model(data)
    params = model.init_params(3, np.random.default_rng(0))
    ep = _episodes(data, 1)[0]
    res = meta_test(model, params, ep, MetaConfig(), np.random.default_rng(0), steps=0)
    ref = evaluate_query(model, params.all(), ep)
    assert res.predictions == ref.predictions and res.accuracy == ref.accuracy


def _self_query(ep):
    return Episode(ep.way, ep.shot, ep.support, ep.support, ep.support_labels, ep.support_labels, ep.slot_map, False, "self")


@pytest.mark.parametrize("algorithm", [MAML, ATAML])
def test_meta_test_can_overfit_its_support_set(data, algorithm):
    model = _model(data)
    params = model.init_params(3, np.random.default_rng(0))
    before = params.arrays()
    ep = _self_query(_episodes(data, 1, shot=2)[0])
    res = meta_test(model, params, ep, MetaConfig(algorithm=algorithm, test_lr=0.5), np.random.default_rng(0), steps=200)
    assert res.accuracy == 1.0
    assert res.support_losses[-1] < res.support_losses[0]
    for k, v in params.arrays().items():
        assert v.tobytes() == before[k].tobytes()


def test_meta_test_reinitialises_head_for_a_new_way(data):
    model = _model(data)
    params = model.init_params(5, np.random.default_rng(0))
    ep = _episodes(data, 1, way=3)[0]
    res = meta_test(model, params, ep, MetaConfig(), np.random.default_rng(0), steps=1)
    assert res.way == 3 and max(res.predictions) < 3


def test_pretrain_with_zero_budget_is_identity(data):
    model = _model(data)
    params = model.init_params(3, np.random.default_rng(0))
    before = params.arrays()
    cfg = MetaConfig(algorithm=PRETRAIN)
    _, trainlog = pretrain_baseline(model, params, iter(_episodes(data, 4)), cfg, 0, np.random.default_rng(0))
    assert trainlog.rows == []
    for k, v in params.arrays().items():
        assert v.tobytes() == before[k].tobytes()


def test_pretrain_overfits_a_repeated_task(data):
    model = _model(data)
    params = model.init_params(3, np.random.default_rng(0))
    ep = _episodes(data, 1)[0]
    cfg = MetaConfig(algorithm=PRETRAIN, meta_lr=0.02, meta_batch=1, clip_norm=10.0)
    _, trainlog = meta_train(model, params, iter([ep] * 150), cfg, 150, np.random.default_rng(0))
    assert trainlog.rows[-1][1] < 0.1 * trainlog.rows[0][1]


def test_random_baseline_does_not_train(data):
    model = _model(data)
    params = model.init_params(3, np.random.default_rng(0))
    out, trainlog = meta_train(model, params, iter([]), MetaConfig(algorithm=RANDOM), 10, None)
    assert out is params and trainlog.rows == []


def test_meta_train_validates_and_keeps_best_weights(data):
    model = _model(data)
    params = model.init_params(3, np.random.default_rng(0))
    synth, mini, _ = data
    val = EpisodeStream(mini, synth.split.val_classes, 2, 1, 3, query_per_class=3).take(3)
    cfg = MetaConfig(algorithm=ATAML, val_every=2, patience=4, meta_batch=1, test_steps=3)
    seen = []
    out, trainlog = meta_train(
        model, params, iter(_episodes(data, 40)), cfg, 20, np.random.default_rng(0), val, on_best=lambda it, p: seen.append(it)
    )
    assert trainlog.rows[0][0] == 0 and np.isnan(trainlog.rows[0][1])
    assert trainlog.best_iteration == (seen[-1] if seen else 0)
    if trainlog.stopped_early:
        assert trainlog.rows[-1][0] - trainlog.best_iteration >= cfg.patience


def test_identical_seeds_give_identical_training_logs(data):
    synth, mini, _ = data
    logs = []
    for _ in range(2):
        model = _model(data, dropout=0.5)
        params = model.init_params(3, np.random.default_rng(0))
        val = EpisodeStream(mini, synth.split.val_classes, 2, 1, 3, query_per_class=3).take(2)
        _, trainlog = meta_train(
            model, params, iter(_episodes(data, 20)), MetaConfig(val_every=2, meta_batch=2), 6, np.random.default_rng(4), val
        )
        logs.append([(it, loss, val) for it, loss, val, _ in trainlog.rows])
    assert str(logs[0]) == str(logs[1])


BENCH_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "synth_bench.json"


@pytest.mark.slow
def test_validation_improves_over_first_hundred_iterations():
    from ataml.config import load_config
    from ataml.experiment import setup, train

    cfg = load_config(BENCH_CONFIG, {"meta.iterations": 100, "meta.val_every": 100, "meta.patience": 1000})
    trainlog = train(setup(cfg)).log
    vals = [row[2] for row in trainlog.rows if row[2] == row[2]]
    assert len(vals) == 2 and vals[1] > vals[0]
