"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The benchmark criteria (6, 7 and 9) share one run of the pinned synthetic
benchmark in ``configs/synth_bench.json``; it takes several minutes.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

import ataml.meta as meta_mod
from ataml.autodiff import Tensor, backward_through_backward, grad, ops
from ataml.cli import main
from ataml.config import Variant, load_config
from ataml.encoders import StateSequence, TcnConfig, init_tcn, tcn_forward
from ataml.experiment import evaluate, init_params, run_bench, sample_test_episodes, setup, traces_for, train
from ataml.learner import SOFTMAX
from ataml.learner import loss as head_loss
from ataml.metrics import ConfusionCounts, aggregate, macro_f1, micro_f1
from ataml.model import ATT_KEY

from oracles import PRIMITIVES, brute_force_f1, rel_err, run_primitive

BENCH_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "synth_bench.json"

pytestmark = pytest.mark.slow


# ---------------------------------------------------------------- 1


def test_criterion_1_gradient_oracle_suite(verdict):
    t0 = time.perf_counter()
    errors = {name: run_primitive(name, instances=20) for name in sorted(PRIMITIVES)}
    seconds = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    ok = errors[worst] < 1e-4 and seconds < 60
    detail = f"{len(errors)} primitives x 20 instances, worst {worst} rel err {errors[worst]:.2e} (< 1e-4), {seconds:.1f}s (< 60s)"
    assert verdict(1, ok, detail)


# ---------------------------------------------------------------- 2


def _quadratic_meta_gradient():
    theta = Tensor(0.0, requires_grad=True)
    inner = ops.scale(ops.mul(ops.sub(theta, 1.0), ops.sub(theta, 1.0)), 0.5)
    (g,) = grad(inner, [theta], create_graph=True)
    fast = ops.sub(theta, ops.scale(g, 0.5))
    outer = ops.scale(ops.mul(ops.sub(fast, 2.0), ops.sub(fast, 2.0)), 0.5)
    return float(backward_through_backward(outer, {"theta": theta})["theta"].data)


def _linear_model_meta_gradient_error():
    cfg = load_config(
        BENCH_CONFIG,
        {"model.encoder": "none", "meta.algorithm": "maml", "episodes.query_per_class": 3},
    )
    s = setup(cfg)
    params = s.model.init_params(5, np.random.default_rng(0))
    mc = cfg.meta_config()
    episodes = sample_test_episodes(s, 2, "train")

    def value(arrays):
        p = params.copy()
        p.load_arrays(arrays)
        total, _ = meta_mod.meta_episode_loss(s.model, p, episodes, mc, None)
        return float(total.data)

    total, _ = meta_mod.meta_episode_loss(s.model, params, episodes, mc, None)
    analytic = backward_through_backward(total, params.all())
    base = params.arrays()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(5):
        d = {k: rng.normal(size=v.shape) for k, v in base.items()}
        norm = np.sqrt(sum(np.sum(x * x) for x in d.values()))
        d = {k: x / norm for k, x in d.items()}
        h = 1e-5
        fd = (value({k: base[k] + h * d[k] for k in base}) - value({k: base[k] - h * d[k] for k in base})) / (2 * h)
        an = sum(float(np.sum(analytic[k].data * d[k])) for k in base)
        worst = max(worst, rel_err(np.array([an]), np.array([fd])))
    return worst


def test_criterion_2_second_order_oracle(verdict):
    quad = _quadratic_meta_gradient()
    lin = _linear_model_meta_gradient_error()
    ok = abs(quad + 0.75) < 1e-8 and lin < 1e-3
    detail = f"quadratic meta-gradient {quad:.12f} (|err| {abs(quad + 0.75):.1e} < 1e-8), linear-model FD rel err {lin:.2e} (< 1e-3)"
    assert verdict(2, ok, detail)


# ---------------------------------------------------------------- 3


def test_criterion_3_partition_invariants(verdict, monkeypatch):
    original_adapt = meta_mod.inner_adapt
    original_step = meta_mod.meta_step
    counts = {"adapt": 0, "adapt_violations": 0, "steps": 0, "att_changes": 0}
    frozen_att = {}

    def checked_adapt(model, params, episode, cfg, *args, **kwargs):
        adapt_shared = kwargs.get("adapt_shared")
        adapt_shared = cfg.adapts_shared if adapt_shared is None else adapt_shared
        before = {k: v.data.tobytes() for k, v in params.shared.items()}
        out = original_adapt(model, params, episode, cfg, *args, **kwargs)
        if not adapt_shared:
            counts["adapt"] += 1
            for k, raw in before.items():
                if out.fast[k].data.tobytes() != raw or params.shared[k].data.tobytes() != raw:
                    counts["adapt_violations"] += 1
        return out

    def checked_step(model, params, episodes, cfg, *args, **kwargs):
        info = original_step(model, params, episodes, cfg, *args, **kwargs)
        if cfg.freeze_attention_slow:
            counts["steps"] += 1
            if params.task_specific[ATT_KEY].data.tobytes() != frozen_att["raw"]:
                counts["att_changes"] += 1
        return info

    monkeypatch.setattr(meta_mod, "inner_adapt", checked_adapt)
    monkeypatch.setattr(meta_mod, "meta_step", checked_step)

    overrides = {"meta.iterations": 40, "meta.val_every": 10, "meta.val_episodes": 5, "episodes.test_episodes": 20}
    s = setup(load_config(BENCH_CONFIG, overrides))
    out = train(s)
    evaluate(s, out.params)
    ataml_checks = counts["adapt"]

    frozen = setup(load_config(BENCH_CONFIG, {**overrides, "meta.freeze_attention_slow": True}))
    start = init_params(frozen)
    frozen_att["raw"] = start.task_specific[ATT_KEY].data.tobytes()
    trained = train(frozen).params
    final_same = trained.task_specific[ATT_KEY].data.tobytes() == frozen_att["raw"]

    ok = counts["adapt_violations"] == 0 and ataml_checks > 0 and counts["att_changes"] == 0 and counts["steps"] > 0 and final_same
    detail = (
        f"{counts['adapt']} task-only adaptations with {counts['adapt_violations']} shared-weight changes; "
        f"TCN(-) slow attention changed in {counts['att_changes']} of {counts['steps']} meta-steps"
    )
    assert verdict(3, ok, detail)


# ---------------------------------------------------------------- 4


def test_criterion_4_causality(verdict):
    cfg = TcnConfig()
    rng = np.random.default_rng(0)
    d_in = 8
    params = {k: Tensor(v, requires_grad=True) for k, v in init_tcn(d_in, cfg, rng).items()}
    leaks = 0
    for _ in range(100):
        steps = int(rng.integers(2, 30))
        t = int(rng.integers(0, steps - 1))
        x = Tensor(rng.normal(size=(1, steps, d_in)), requires_grad=True)
        out = tcn_forward(StateSequence(x, np.ones((1, steps), dtype=bool)), params, cfg)
        (g,) = grad(ops.sum(out.states[0, t, :]), [x])
        if np.any(g.data[0, t + 1 :] != 0):
            leaks += 1
    x = Tensor(rng.normal(size=(1, 40, d_in)), requires_grad=True)
    out = tcn_forward(StateSequence(x, np.ones((1, 40), dtype=bool)), params, cfg)
    (g,) = grad(ops.sum(out.states[0, 30, :]), [x])
    support = np.flatnonzero(np.any(g.data[0] != 0, axis=-1))
    span = int(support.max() - support.min() + 1)
    ok = leaks == 0 and span == 13 == cfg.receptive_field()
    assert verdict(4, ok, f"future-gradient leaks on {leaks} of 100 sequences; measured receptive field {span} (expected 13)")


# ---------------------------------------------------------------- 5


def test_criterion_5_metric_oracle(verdict):
    rng = np.random.default_rng(0)
    mismatches = 0
    for _ in range(1000):
        n_labels = int(rng.integers(1, 6))
        n_docs = int(rng.integers(1, 8))
        gold = [set(np.flatnonzero(rng.random(n_labels) < 0.4).tolist()) for _ in range(n_docs)]
        pred = [set(np.flatnonzero(rng.random(n_labels) < 0.4).tolist()) for _ in range(n_docs)]
        c = ConfusionCounts.from_sets(pred, gold, n_labels)
        if (micro_f1(c), macro_f1(c)) != brute_force_f1(pred, gold, n_labels):
            mismatches += 1
    gold = [{0}, {1, 2}, {3}]
    perfect = ConfusionCounts.from_sets(gold, gold, 4)
    perfect_ok = micro_f1(perfect) == 1.0 and macro_f1(perfect) == 1.0
    ln_err = max(
        abs(float(head_loss(Tensor(np.zeros((4, n))), np.arange(4) % n, SOFTMAX).data) - np.log(n)) for n in (2, 5, 10)
    )
    ok = mismatches == 0 and perfect_ok and ln_err < 1e-9
    assert verdict(5, ok, f"{mismatches} of 1000 random sets differ from brute force; perfect = 1.0: {perfect_ok}; ln N err {ln_err:.1e}")


# ---------------------------------------------------------------- benchmark (6, 7, 9)

BENCH_VARIANTS = {
    "ataml": Variant(name="ATAML TCN(A)", algorithm="ataml"),
    "maml": Variant(name="MAML TCN(A)", algorithm="maml"),
    "random": Variant(name="random TCN(A)", algorithm="random"),
    "maml_noatt": Variant(name="MAML TCN", algorithm="maml", attention=False),
    "ataml_emb": Variant(name="ATAML E(A)", algorithm="ataml", encoder="none"),
}


@pytest.fixture(scope="module")
def bench():
    cfg = load_config(BENCH_CONFIG)
    cfg.bench.variants = list(BENCH_VARIANTS.values())
    cfg.bench.ways, cfg.bench.shots = [5], [1]
    cells = {}
    keys = list(BENCH_VARIANTS)
    t0 = time.perf_counter()

    def progress(cell):
        key = keys[len(cells)]
        cells[key] = cell
        cells[key].wall = time.perf_counter() - progress.start
        progress.start = time.perf_counter()

    progress.start = t0
    run_bench(cfg, progress)
    return cells


def _acc(cell):
    vals = [r.accuracy for r in cell.results]
    return aggregate(vals, "accuracy")


def test_criterion_6_ataml_beats_maml_beats_random(bench, verdict):
    a, m, r = (_acc(bench[k]) for k in ("ataml", "maml", "random"))
    seconds = sum(bench[k].wall for k in ("ataml", "maml", "random"))
    n_eps = {len(bench[k].results) for k in ("ataml", "maml", "random")}
    ordering = a.mean > m.mean > r.mean
    over_random = a.mean - r.mean >= 0.15
    # the margin over MAML must clear both intervals (non-overlapping 95% CIs)
    separated = a.mean - a.ci95 > m.mean + m.ci95
    ok = ordering and over_random and separated and seconds < 15 * 60 and n_eps == {100}
    detail = (
        f"accuracy ATAML {100 * a.mean:.1f}+/-{100 * a.ci95:.1f}, MAML {100 * m.mean:.1f}+/-{100 * m.ci95:.1f}, "
        f"random {100 * r.mean:.1f}+/-{100 * r.ci95:.1f}; ordering {ordering}; ATAML-random {100 * (a.mean - r.mean):.1f} pts (>= 15); "
        f"CIs separated {separated}; runtime {seconds:.0f}s (< 900s)"
    )
    assert verdict(6, ok, detail)


def test_criterion_7_ablation_direction(bench, verdict):
    m, m0 = _acc(bench["maml"]), _acc(bench["maml_noatt"])
    a, e = _acc(bench["ataml"]), _acc(bench["ataml_emb"])
    ok = m.mean > m0.mean and a.mean - e.mean >= 0.10
    detail = (
        f"MAML TCN(A) {100 * m.mean:.1f} vs MAML TCN {100 * m0.mean:.1f}; "
        f"ATAML TCN(A) {100 * a.mean:.1f} vs ATAML E(A) {100 * e.mean:.1f} (gap {100 * (a.mean - e.mean):.1f} pts, >= 10)"
    )
    assert verdict(7, ok, detail)


def test_criterion_9_attention_finds_the_phrase(bench, verdict):
    cell = bench["ataml"]
    s = cell.setup
    episodes = sample_test_episodes(s, len(cell.results))
    traces = traces_for(s, episodes, cell.results)
    correct = [t for t in traces if t.label == t.prediction]
    inside = 0
    for t in correct:
        peak = int(np.argmax(np.abs(t.alphas)))
        inside += any(start <= peak < end for start, end in s.phrase_spans[t.meta["doc"]])
    frac = inside / max(len(correct), 1)
    ok = len(correct) > 0 and frac >= 0.8
    assert verdict(9, ok, f"peak |alpha| inside the phrase window for {inside} of {len(correct)} correct documents ({100 * frac:.1f}%, >= 80%)")


# ---------------------------------------------------------------- 8


def test_criterion_8_cli_determinism(verdict, tmp_path, monkeypatch):
    monkeypatch.setenv("ATAML_OUTPUT_ROOT", str(tmp_path))
    short = json.loads(BENCH_CONFIG.read_text())
    short["meta"]["iterations"] = 20
    config = tmp_path / "short.json"
    config.write_text(json.dumps(short))
    bodies = []
    for tag in ("a", "b"):
        run, ev = tmp_path / f"train-{tag}", tmp_path / f"eval-{tag}"
        assert main(["train", "--config", str(config), "--out", str(run)]) == 0
        code = main(["eval", "--config", str(config), "--checkpoint", str(run / "model.ckpt"), "--episodes", "20", "--out", str(ev)])
        assert code == 0
        bodies.append((ev / "results.csv").read_text().splitlines()[1:])
    ok = bodies[0] == bodies[1] and len(bodies[0]) > 1
    assert verdict(8, ok, f"two train+eval runs, {len(bodies[0]) - 1} metric rows, CSV bodies identical: {bodies[0] == bodies[1]}")
