import csv
import json
import math

import numpy as np
import pytest

from flownet import dtignn as D
from flownet import pipeline as P
from flownet.errors import ConfigurationError, DimensionError, NumericError
from flownet.roadnet import BOUNDARY, Intersection, Movement, RoadNetwork, RoadSegment, build_grid_network
from flownet.signals import CLEARANCE
from flownet.simflow import DemandSpec, FlowPack, apply_mask, simulate, to_flowpack

GRID = build_grid_network(2, 2)


def toy_net():
    segs = (RoadSegment(0, BOUNDARY, 0), RoadSegment(1, BOUNDARY, 0), RoadSegment(2, 0, BOUNDARY),
            RoadSegment(3, 0, BOUNDARY))
    moves = (Movement(0, 0, 2, "straight"), Movement(1, 1, 3, "straight"))
    return RoadNetwork(segs, (Intersection(0, moves),))


def toy_pack(t=60, mask=None):
    vols = np.tile(np.array([[1.0, 2.0, 0.5], [0.5, 1.0, 1.5], [2.0, 0.5, 1.0], [1.0, 1.0, 1.0]]), (t, 1, 1))
    m = np.ones((4, 3)) if mask is None else mask
    return FlowPack(vols, np.full((t, 1), CLEARANCE), m)


def grid_pack(steps=120, hidden=(1,), seed=3):
    states, log = simulate(GRID, demand=DemandSpec(240, seed=seed), steps=steps)
    return to_flowpack(states, log, apply_mask(GRID, hidden))


def test_split_bounds_and_window_counts():
    assert P.split_bounds(360) == {"train": (0, 216), "val": (216, 288), "test": (288, 360)}
    pack = toy_pack(360)
    data = P.make_windows(pack, toy_net(), t=30, t_prime=1)
    assert [len(data[s]) for s in P.SPLITS] == [186, 42, 42]
    # enumerate: every window lies inside its split
    for name, (lo, hi) in P.split_bounds(360).items():
        ds = data[name]
        assert ds.starts.min() == lo and ds.starts.max() + 31 == hi
        np.testing.assert_array_equal(np.diff(ds.starts), 1)


def test_single_window_boundary():
    data = P.make_windows(toy_pack(31), toy_net(), ratios=(1, 0, 0))
    assert len(data["train"]) == 1 and len(data["val"]) == len(data["test"]) == 0
    with pytest.raises(ConfigurationError):
        P.make_windows(toy_pack(31), toy_net())
    with pytest.raises(ConfigurationError):
        P.make_windows(toy_pack(30), toy_net(), ratios=(1, 0, 0))
    with pytest.raises(ConfigurationError):
        P.make_windows(toy_pack(100), toy_net(), t=1)
    with pytest.raises(DimensionError):
        P.make_windows(toy_pack(100), GRID)


def test_masked_inputs_are_zero():
    pack = grid_pack(hidden=(0, 3))
    data = P.make_windows(pack, GRID, t=10)
    hidden = pack.mask[:, 0] == 0
    for name in P.SPLITS:
        b = data[name].batch(np.arange(len(data[name])))
        assert not b["obs"][:, :, hidden].any()
        np.testing.assert_array_equal(b["obs"][:, :, ~hidden], b["truth"][:, :, ~hidden])
        assert b["phase_feats"].shape[-1] == 8
        assert b["future"].shape == (len(data[name]), 1, GRID.n, 3)


def test_phase_features_follow_downstream_intersection():
    phases = np.array([[0, 1, 2, CLEARANCE]])
    feats = P.phase_features(GRID, phases)[0]
    for s in GRID.segments:
        if s.to_node == BOUNDARY or s.to_node == 3:
            assert not feats[s.id].any()
        else:
            assert feats[s.id].argmax() == phases[0, s.to_node] and feats[s.id].sum() == 1
    with pytest.raises(DimensionError):
        P.phase_features(GRID, np.zeros((2, 3), dtype=int))


def test_mape_cases():
    assert P.mape([0.0], [0.0]) == 0.0
    assert P.mape([0.0], [5.0]) == 1.0
    assert P.mape([4.0], [3.0]) == 0.25
    np.testing.assert_array_equal(P.mape_terms([0, 0, 2], [0, 1, 3]), [0, 1, 0.5])


def test_metric_hand_arithmetic():
    x, xh = [2.0, 4.0], [1.0, 2.0]
    assert P.mae(x, xh) == 1.5
    assert P.rmse(x, xh) == pytest.approx(math.sqrt(2.5), abs=1e-15)
    assert P.mape(x, xh) == 0.5
    assert P.mae(x, x) == 0.0 and P.rmse(x, x) == 0.0


def test_metric_report_split_by_mask():
    rng = np.random.default_rng(0)
    truth, pred = rng.random((5, 1, GRID.n, 3)), rng.random((5, 1, GRID.n, 3))
    m = apply_mask(GRID, [2])
    rep = P.metric_report(truth, pred, m, GRID)
    seen = m.astype(bool)
    assert rep.observed["mae"] == pytest.approx(np.abs(truth - pred)[..., seen].mean())
    assert rep.unobserved["mae"] == pytest.approx(np.abs(truth - pred)[..., ~seen].mean())
    assert len(rep.per_segment) == GRID.n and set(rep.per_intersection) == {0, 1, 2, 3}
    assert rep.windows == 5
    for v in (rep.mae, rep.rmse, rep.mape):
        assert v >= 0 and math.isfinite(v)
    with pytest.raises(DimensionError):
        P.metric_report(truth, pred[:4], m)


def test_train_config_validation():
    for bad in (dict(batch_size=0), dict(epochs=0), dict(learning_rate=0), dict(ablation="x"),
                dict(contrastive="y"), dict(seed=-1), dict(temperature=0)):
        with pytest.raises(ConfigurationError):
            P.TrainConfig(**bad)
    cfg = P.TrainConfig(epochs=3, contrastive="L_N")
    assert P.TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_one_epoch_toy_writes_checkpoint(tmp_path):
    net = toy_net()
    data = P.make_windows(toy_pack(60), net, t=5)
    cfg = D.ModelConfig(n=4, t_window=5)
    res = P.train(cfg, data, P.TrainConfig(epochs=1, batch_size=8), net)
    assert len(res.history) == 1 and res.best_epoch == 1
    path = tmp_path / "ck.json"
    P.save_checkpoint(res.model, path)
    back = P.load_checkpoint(path)
    assert back.cfg == cfg and back.scale == res.model.scale
    np.testing.assert_array_equal(P.predict(back, data["test"]), P.predict(res.model, data["test"]))
    json.loads(res.history_json())


def test_toy_loss_halves_in_fifty_epochs():
    net = toy_net()
    data = P.make_windows(toy_pack(60), net, t=5)
    res = P.train(D.ModelConfig(n=4, t_window=5), data, P.TrainConfig(epochs=50, batch_size=8, learning_rate=0.01),
                  net)
    losses = [h["train_loss"] for h in res.history]
    assert losses[-1] <= 0.5 * losses[0]


def test_training_is_deterministic():
    pack = grid_pack()
    data = P.make_windows(pack, GRID, t=5)
    cfg = D.ModelConfig(n=GRID.n, t_window=5)
    tc = P.TrainConfig(epochs=2, seed=4)
    a, b = P.train(cfg, data, tc, GRID), P.train(cfg, data, tc, GRID)
    assert a.history == b.history
    for k in a.model.params:
        np.testing.assert_array_equal(a.model.params[k].data, b.model.params[k].data)


def test_loss_matches_single_source():
    pack = grid_pack()
    data = P.make_windows(pack, GRID, t=5)
    cfg = D.ModelConfig(n=GRID.n, t_window=5)
    model = P.Model(cfg, D.init_params(cfg, 1), scale=7.0)
    b = data["train"].batch(np.arange(4))
    got = P.batch_loss(model, b, pack.mask, np.random.default_rng(0)).item()
    seeds = np.random.default_rng(0).random((4, GRID.n, 3)) / 7.0
    out = D.forward_with_imputation(model.params, cfg, b["obs"] / 7.0, b["phase_feats"], b["adj"], pack.mask,
                                    "full", seeds)
    want = D.loss_prediction(out.history, out.final, b["truth"][:, 1:] / 7.0, b["future"][:, 0] / 7.0, pack.mask)
    assert got == want.item()


def test_evaluate_is_pure():
    pack = grid_pack()
    data = P.make_windows(pack, GRID, t=5)
    cfg = D.ModelConfig(n=GRID.n, t_window=5)
    model = P.Model(cfg, D.init_params(cfg, 2), scale=5.0)
    a, b = P.evaluate(model, data["test"], GRID), P.evaluate(model, data["test"], GRID)
    assert a.to_dict() == b.to_dict()
    with pytest.raises(DimensionError):
        P.evaluate(P.Model(D.ModelConfig(n=4, t_window=5), D.init_params(D.ModelConfig(n=4, t_window=5))),
                   data["test"])


def test_multi_step_prediction_shape():
    pack = grid_pack()
    data = P.make_windows(pack, GRID, t=5, t_prime=3)
    cfg = D.ModelConfig(n=GRID.n, t_window=5)
    model = P.Model(cfg, D.init_params(cfg, 2), scale=5.0)
    pred = P.predict(model, data["val"])
    assert pred.shape == (len(data["val"]), 3, GRID.n, 3)
    rep = P.evaluate(model, data["val"])
    assert rep.windows == len(data["val"]) * 3


def test_variants_and_gcn_train():
    pack = grid_pack()
    data = P.make_windows(pack, GRID, t=4)
    for variant in D.VARIANTS:
        res = P.train(D.ModelConfig(n=GRID.n, t_window=4), data, P.TrainConfig(epochs=1, ablation=variant), GRID)
        assert res.model.variant == variant
    res = P.train(D.ModelConfig(n=GRID.n, t_window=4, base="gcn"), data, P.TrainConfig(epochs=1), GRID)
    assert res.model.a_static is not None
    with pytest.raises(ConfigurationError):
        P.train(D.ModelConfig(n=GRID.n, t_window=4, base="gcn"), data, P.TrainConfig(epochs=1))


def test_contrastive_objective_trains():
    pack = grid_pack()
    data = P.make_windows(pack, GRID, t=4)
    for mode in ("L_N", "L_N_minus_N"):
        res = P.train(D.ModelConfig(n=GRID.n, t_window=4), data, P.TrainConfig(epochs=1, contrastive=mode), GRID)
        assert math.isfinite(res.history[0]["train_loss"])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises_with_checkpoint():
    pack = grid_pack()
    pack.volumes[40:, 0, 0] = 1e300
    data = P.make_windows(pack, GRID, t=4)
    with pytest.raises(NumericError) as info:
        P.train(D.ModelConfig(n=GRID.n, t_window=4), data, P.TrainConfig(epochs=2, normalize=False), GRID)
    assert info.value.checkpoint is not None and "V_s" in info.value.checkpoint


def test_sweep_and_csv(tmp_path):
    pack = grid_pack(hidden=())
    cfg = D.ModelConfig(n=GRID.n, t_window=4)
    tc = P.TrainConfig(epochs=1)
    rows = P.sparsity_sweep(pack, GRID, [0, 4], cfg, tc, seeds=(0,))
    assert [r["sparsity_pct"] for r in rows] == [0.0, 100.0]
    # count 0 is the plain run on the fully observed data
    _, rep = P.run_one(pack, GRID, cfg, tc)
    assert rows[0]["mae"] == rep.mae
    path = tmp_path / "res.csv"
    P.write_results_csv(rows, path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        assert tuple(reader.fieldnames) == P.RESULT_COLUMNS
        assert len(list(reader)) == 2
    with pytest.raises(ConfigurationError):
        P.sparsity_sweep(pack, GRID, [5], cfg, tc)


def test_ablation_rows_and_median():
    pack = grid_pack(hidden=(2, 3))
    rows = P.ablation_study(pack, GRID, D.ModelConfig(n=GRID.n, t_window=4), P.TrainConfig(epochs=1), seeds=(0, 1))
    assert {r["variant"] for r in rows} == set(D.VARIANTS)
    assert all(r["sparsity_pct"] == 50.0 for r in rows)
    med = P.median_by(rows, "variant")
    for v in D.VARIANTS:
        assert med[v] == float(np.median([r["mae"] for r in rows if r["variant"] == v]))


def test_model_estimator_pads_short_history():
    pack = grid_pack()
    data = P.make_windows(pack, GRID, t=5)
    res = P.train(D.ModelConfig(n=GRID.n, t_window=5), data, P.TrainConfig(epochs=1), GRID)
    est = P.ModelEstimator(res.model, GRID)
    m = pack.mask
    for h in (0, 2, 9):
        out = est(pack.volumes[:h] * m, pack.phases[:h], m)
        assert out.shape == (GRID.n, 3) and (out >= 0).all()
