import math

import numpy as np
import pytest
import scipy.sparse as sp

from wsseg.core import LabelMask, TrainConfig, ValidationError, one_hot
from wsseg.data_io import (BudgetSplit, MaskScheme, SyntheticSpec, generate_synthetic, make_rng,
                           sample_masks)
from wsseg.encoder import init_params
from wsseg.graph import AffinityGraph, build_graph
from wsseg.trainer import (Ablation, GradStudyResult, _Trainer, budget_experiment, evaluate,
                           evaluate_logits, grad_study, graph_params, label_amount_sweep, save_run,
                           train)

SMALL = dict(encoder_dims=(8, 8, 16, 16), epochs_stage1=2, epochs_stage2=2, batch_size=3)


def clouds(n_shapes=6, n=64, seed=0):
    return generate_synthetic(SyntheticSpec("barbell", n, n_shapes, 0.0, seed))


def setup(scheme="10%", seed=0, **cfg):
    cs = clouds(seed=seed)
    masks = sample_masks(cs, MaskScheme.parse(scheme), seed)
    return cs, list(zip(cs, masks)), TrainConfig(seed=seed, **{**SMALL, **cfg})


def test_epoch_count_and_stage_one_breakdown():
    _, samples, cfg = setup()
    rec = train(samples, cfg, Ablation.all())
    assert len(rec.losses) == 4
    for r in rec.losses[:2]:
        assert r.mil == r.sia == r.smo == 0.0 and r.total == r.seg
    assert all(r.sia > 0 and r.smo > 0 for r in rec.losses[2:])


def test_zero_learning_rate_keeps_params():
    cs, samples, cfg = setup(lr=0.0)
    init = init_params(0, cs[0].num_features, 3, cfg.encoder_dims)
    rec = train(samples, cfg, Ablation.all(), init=init)
    assert rec.params.equals(init)
    a = evaluate(rec.params, cs, cfg)
    b = evaluate(init, cs, cfg)
    assert a.samp_avg == b.samp_avg


def test_all_flags_off_means_seg_only():
    _, samples, cfg = setup()
    rec = train(samples, cfg, Ablation())
    assert all(r.total == r.seg and r.mil == r.sia == r.smo == 0 for r in rec.losses)


def test_deterministic_and_thread_independent():
    _, samples, cfg = setup(lr=0.05)
    a = train(samples, cfg, Ablation.all(), threads=1)
    b = train(samples, cfg, Ablation.all(), threads=1)
    c = train(samples, cfg, Ablation.all(), threads=4)
    assert np.array_equal(a.params.flat(), b.params.flat())
    assert np.array_equal(a.params.flat(), c.params.flat())
    assert [r.as_row() for r in a.losses] == [r.as_row() for r in c.losses]


def test_seed_changes_result():
    _, samples, cfg = setup()
    a = train(samples, cfg)
    b = train(samples, cfg.replace(seed=1))
    assert not np.array_equal(a.params.flat(), b.params.flat())


def test_initial_seg_loss_near_log_k():
    cs, samples, _ = setup("full")
    cfg = TrainConfig(epochs_stage1=1, epochs_stage2=0)
    seg = train(samples, cfg).losses[0].seg
    assert 0.5 * math.log(3) <= seg <= 1.5 * math.log(3)


def test_cached_graph_equals_rebuild():
    _, samples, cfg = setup()
    tr = _Trainer(samples, cfg, Ablation.all())
    for i, (c, m) in enumerate(samples):
        cached = tr.graph(i)
        assert tr.graph(i) is cached
        fresh = build_graph(c, graph_params(cfg), m)
        assert (cached.laplacian != fresh.laplacian).nnz == 0
        assert cached.has_negative


def test_zero_mask_samples_only_feed_extra_branches():
    cs, samples, cfg = setup()
    samples[0] = (cs[0], LabelMask.empty(cs[0].n))
    tr = _Trainer(samples, cfg, Ablation.all())
    params = init_params(0, cs[0].num_features, 3, cfg.encoder_dims)
    _, parts = tr.sample_step(params, 0, 3, True, 5, 3, 2)
    seg, mil, sia, smo = parts
    assert seg == 0.0 and mil == 0.0 and sia > 0 and smo > 0
    _, parts = tr.sample_step(params, 0, 0, False, 5, 3, 2)
    assert parts == (0.0, 0.0, 0.0, 0.0)


def test_no_labels_rejected():
    cs = clouds(2)
    with pytest.raises(ValidationError):
        train([(c, LabelMask.empty(c.n)) for c in cs], TrainConfig(**SMALL))
    with pytest.raises(ValidationError):
        train([], TrainConfig(**SMALL))


# ---------------------------------------------------------------- evaluation

def test_propagation_on_empty_graphs_equals_argmax():
    cs = clouds(3)
    rng = np.random.default_rng(0)
    logits = [rng.normal(size=(c.n, 3)) for c in cs]
    cfg = TrainConfig()
    plain = evaluate_logits(logits, cs, cfg, False)
    prop = evaluate_logits(logits, cs, cfg, True, graphs=[AffinityGraph.empty(c.n) for c in cs])
    for a, b in zip(plain.predictions, prop.predictions):
        assert np.array_equal(a, b)


def test_perfect_logits_score_one():
    cs = clouds(3)
    logits = [10.0 * one_hot(c.labels, 3) for c in cs]
    cliques = []
    for c in cs:
        same = (c.labels[:, None] == c.labels[None, :]).astype(float)
        np.fill_diagonal(same, 0.0)
        cliques.append(AffinityGraph(sp.csr_matrix(same)))
    cfg = TrainConfig()
    assert evaluate_logits(logits, cs, cfg, False).samp_avg == 1.0
    assert evaluate_logits(logits, cs, cfg, True, graphs=cliques).samp_avg == 1.0


@pytest.mark.parametrize("seed", range(3))
def test_propagation_fixes_salt_and_pepper(seed):
    cs = generate_synthetic(SyntheticSpec("barbell", 256, 4, 0.0, seed))
    rng = np.random.default_rng(seed)
    logits = []
    for c in cs:
        z = one_hot(c.labels, 3)
        flip = rng.choice(c.n, size=int(0.05 * c.n), replace=False)
        z[flip] = one_hot((c.labels[flip] + rng.integers(1, 3, flip.size)) % 3, 3)
        logits.append(z)
    cfg = TrainConfig()
    plain = evaluate_logits(logits, cs, cfg, False).samp_avg
    assert evaluate_logits(logits, cs, cfg, True).samp_avg > plain


def test_evaluate_with_and_without_propagation_runs():
    cs, samples, cfg = setup()
    rec = train(samples, cfg)
    for prop in (False, True):
        ev = evaluate(rec.params, cs, cfg, prop)
        assert 0.0 <= ev.samp_avg <= 1.0 and len(ev.predictions) == len(cs)
        assert set(ev.metrics()) >= {"cat_avg", "samp_avg", "per_class", "overall_accuracy"}


# ---------------------------------------------------------------- gradient study

def test_grad_study_full_mask_has_zero_variance():
    cs = clouds(2, n=32)
    params = init_params(0, cs[0].num_features, 3, (8, 8, 16, 16))
    r = grad_study(cs, params, [4, 16, 64], draws_per_n=5, seed=0, bootstrap=0)
    assert isinstance(r, GradStudyResult)
    assert r.variances[-1] == 0.0 and r.variances[0] > r.variances[1] > 0
    assert r.population == 64
    single = grad_study(cs[:1], params, [8, 32], draws_per_n=3, seed=0, bootstrap=0)
    assert single.variances[-1] == 0.0


def test_grad_study_rejects_bad_grids():
    cs = clouds(1, n=32)
    params = init_params(0, cs[0].num_features, 3, (8, 8, 16, 16))
    with pytest.raises(ValidationError):
        grad_study(cs, params, [8, 33])
    with pytest.raises(ValidationError):
        grad_study(cs, params, [8, 8])
    with pytest.raises(ValidationError):
        grad_study(cs, params, [8], draws_per_n=1)


def test_grad_study_more_draws_shrink_standard_error():
    cs = clouds(4, n=64)
    params = init_params(0, cs[0].num_features, 3, (8, 8, 16, 16))
    grid = [8, 16, 32, 64]
    few = grad_study(cs, params, grid, draws_per_n=30, seed=1)
    many = grad_study(cs, params, grid, draws_per_n=120, seed=1)
    assert many.slope_se < few.slope_se


# ---------------------------------------------------------------- experiments

def test_budget_rejects_inconsistent_split():
    cs = clouds()
    with pytest.raises(ValidationError):
        budget_experiment(cs, cs, 0.1, [BudgetSplit(0.5, 0.5)], TrainConfig(**SMALL))


def test_budget_rows():
    cs = clouds()
    rows = budget_experiment(cs, cs, 0.5, [BudgetSplit(0.5, 1.0), BudgetSplit(1.0, 0.5)],
                             TrainConfig(**SMALL))
    assert [r["sample_fraction"] for r in rows] == [0.5, 1.0]
    assert rows[0]["labelled_points"] == 3 * 64
    assert rows[1]["labelled_points"] == 6 * 32


def test_full_budget_equals_full_supervision():
    cs = clouds()
    cfg = TrainConfig(**SMALL)
    row = budget_experiment(cs, cs, 1.0, [BudgetSplit(1.0, 1.0)], cfg)[0]
    rec = train([(c, LabelMask.full(c.n)) for c in cs], cfg)
    assert row["samp_avg"] == evaluate(rec.params, cs, cfg).samp_avg


def test_sweep_rows_and_validation():
    cs = clouds()
    rows = label_amount_sweep(cs, cs, [0.1, 1.0], TrainConfig(**SMALL))
    assert [r["fraction"] for r in rows] == [0.1, 1.0]
    with pytest.raises(ValidationError):
        label_amount_sweep(cs, cs, [0.0], TrainConfig(**SMALL))


def test_save_run_layout(tmp_path):
    cs, samples, cfg = setup()
    rec = train(samples, cfg, Ablation(mil=True))
    rec.evaluation = evaluate(rec.params, cs, cfg)
    out = save_run(rec, tmp_path / "run")
    assert (out / "manifest.txt").read_text().split() == [
        "config.txt", "losses.csv", "checkpoint.txt", "metrics.json"]
    lines = (out / "losses.csv").read_text().splitlines()
    assert lines[0] == "epoch,seg,mil,sia,smo,total" and len(lines) == 5
    text = (out / "config.txt").read_text()
    assert "mil = True" in text and "siamese = False" in text
    assert TrainConfig.from_text("\n".join(l for l in text.splitlines()
                                           if l.split("=")[0].strip() not in
                                           ("mil", "siamese", "smooth"))) == cfg


def test_make_rng_streams_differ():
    assert make_rng(0, 1).integers(1 << 30) != make_rng(0, 2).integers(1 << 30)
