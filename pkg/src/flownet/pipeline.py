"""Windowed datasets, training, evaluation and the sweep harnesses.

A dataset is one simulated run: volumes ``T x N x 3``, the phase index of every
intersection at every step, and the observability mask. Splits are contiguous
blocks of time (6:2:2 by default); windows of width ``T + T'`` slide with
stride 1 inside a split and never cross into the next one.

Inputs to the model are the observed volumes (zero where unobserved) plus an
8-channel one-hot of the phase at each segment's downstream intersection.
Volumes are divided by a scale fitted on the observed training volumes before
they reach the model, and predictions are scaled back for every metric.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import dtignn
from . import tensorad as ad
from .errors import ConfigurationError, DimensionError, NumericError
from .roadnet import RoadNetwork, normalize_adjacency, phase_adjacency, static_adjacency
from .signals import CLEARANCE, N_PHASES, phase_from_index
from .simflow import F_CHANNELS, FlowPack, apply_mask, sample_unobserved

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
RESULT_COLUMNS = ("dataset", "variant", "seed", "sparsity_pct", "mae", "rmse", "mape", "epoch_best")


# ---------------------------------------------------------------- windows

def phase_features(net: RoadNetwork, phases: np.ndarray) -> np.ndarray:
    """``T x N x 8``: one-hot phase of each segment's downstream intersection (zeros for exits and clearance)."""
    phases = np.asarray(phases, dtype=int)
    if phases.ndim != 2 or phases.shape[1] != len(net.intersections):
        raise DimensionError(f"phases must be T x {len(net.intersections)}, got {phases.shape}")
    down = net.downstream_intersection
    feats = np.zeros((phases.shape[0], net.n, N_PHASES))
    has = down >= 0
    idx = phases[:, down[has]]  # T x (segments with a downstream intersection)
    on = idx != CLEARANCE
    t_idx, s_idx = np.nonzero(on)
    feats[t_idx, np.flatnonzero(has)[s_idx], idx[on]] = 1.0
    return feats


def adjacency_series(net: RoadNetwork, phases: np.ndarray) -> np.ndarray:
    """Phase-activated adjacency for every step, built once per distinct phase row."""
    phases = np.asarray(phases, dtype=int)
    out = np.empty((phases.shape[0], net.n, net.n))
    cache: dict[tuple, np.ndarray] = {}
    for t, row in enumerate(phases):
        key = tuple(row)
        if key not in cache:
            cache[key] = phase_adjacency(net, [phase_from_index(int(i), x.n_movements)
                                               for i, x in zip(row, net.intersections)])
        out[t] = cache[key]
    return out


def split_bounds(total: int, ratios: Sequence[float] = (6, 2, 2)) -> dict[str, tuple[int, int]]:
    """Contiguous ``[start, stop)`` step ranges per split."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or sum(ratios) <= 0:
        raise ConfigurationError("ratios must be three non-negative numbers with a positive sum")
    r = np.asarray(ratios, dtype=float) / float(sum(ratios))
    a = int(round(total * r[0]))
    b = int(round(total * (r[0] + r[1])))
    return {"train": (0, a), "val": (a, b), "test": (b, total)}


@dataclass
class WindowedDataset:
    """Windows of one split. Arrays cover the whole run; windows index into them."""

    split: str
    starts: np.ndarray
    volumes: np.ndarray        # T_total x N x 3, full ground truth
    mask: np.ndarray           # N x 3
    phase_feats: np.ndarray    # T_total x N x 8
    adjacency: np.ndarray      # T_total x N x N
    t: int = 30
    t_prime: int = 1

    def __len__(self) -> int:
        return len(self.starts)

    @property
    def n(self) -> int:
        return self.volumes.shape[1]

    def batch(self, idx) -> dict[str, np.ndarray]:
        """Stacked arrays for the windows at positions ``idx`` of this split."""
        s = self.starts[np.asarray(idx, dtype=int)]
        hist = s[:, None] + np.arange(self.t)[None, :]
        fut = s[:, None] + self.t + np.arange(self.t_prime)[None, :]
        vols = self.volumes[hist]
        return {
            "obs": vols * self.mask,
            "truth": vols,
            "phase_feats": self.phase_feats[hist],
            "adj": self.adjacency[hist],
            "future": self.volumes[fut],
            "future_phase_feats": self.phase_feats[fut],
            "future_adj": self.adjacency[fut],
        }


def make_windows(pack: FlowPack, net: RoadNetwork, t: int = 30, t_prime: int = 1,
                 ratios: Sequence[float] = (6, 2, 2)) -> dict[str, WindowedDataset]:
    if t < 2 or t_prime < 1:
        raise ConfigurationError("need t >= 2 and t_prime >= 1")
    if pack.n != net.n:
        raise DimensionError(f"flowpack has {pack.n} segments, network has {net.n}")
    width = t + t_prime
    if pack.t < width:
        raise ConfigurationError(f"series of {pack.t} steps is shorter than one window ({width})")
    bounds = split_bounds(pack.t, ratios)
    a0, a1 = bounds["train"]
    if a1 - a0 < width:
        raise ConfigurationError(f"train split holds {a1 - a0} steps, fewer than one window ({width})")
    feats = phase_features(net, pack.phases)
    adj = adjacency_series(net, pack.phases)
    out = {}
    for name, (lo, hi) in bounds.items():
        starts = np.arange(lo, max(lo, hi - width + 1))
        out[name] = WindowedDataset(name, starts, pack.volumes, pack.mask, feats, adj, t, t_prime)
    return out


# ---------------------------------------------------------------- metrics

def mae(x, xhat) -> float:
    x, xhat = np.asarray(x, dtype=float), np.asarray(xhat, dtype=float)
    return float(np.abs(x - xhat).mean()) if x.size else 0.0


def rmse(x, xhat) -> float:
    x, xhat = np.asarray(x, dtype=float), np.asarray(xhat, dtype=float)
    return float(np.sqrt(((x - xhat) ** 2).mean())) if x.size else 0.0


def mape_terms(x, xhat) -> np.ndarray:
    """Per-entry percentage error with the zero-truth convention (1 if the prediction differs, else 0)."""
    x, xhat = np.asarray(x, dtype=float), np.asarray(xhat, dtype=float)
    err = np.abs(x - xhat)
    nz = x != 0
    out = np.where(err != 0, 1.0, 0.0)
    out[nz] = err[nz] / np.abs(x[nz])
    return out


def mape(x, xhat) -> float:
    terms = mape_terms(x, xhat)
    return float(terms.mean()) if terms.size else 0.0


@dataclass
class MetricReport:
    mae: float
    rmse: float
    mape: float
    observed: dict = field(default_factory=dict)
    unobserved: dict = field(default_factory=dict)
    per_segment: list = field(default_factory=list)
    per_intersection: dict = field(default_factory=dict)
    windows: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _metric_triplet(x, xhat) -> dict:
    return {"mae": mae(x, xhat), "rmse": rmse(x, xhat), "mape": mape(x, xhat)}


def metric_report(truth: np.ndarray, pred: np.ndarray, mask: np.ndarray, net: RoadNetwork | None = None) -> MetricReport:
    """Metrics over every entry, plus observed-only and unobserved-only variants.

    ``truth`` and ``pred`` are ``(..., N, 3)``; ``mask`` is ``N x 3``.
    """
    truth, pred = np.asarray(truth, dtype=float), np.asarray(pred, dtype=float)
    if truth.shape != pred.shape:
        raise DimensionError(f"truth {truth.shape} vs prediction {pred.shape}")
    m = np.broadcast_to(np.asarray(mask, dtype=bool), truth.shape)
    allm = _metric_triplet(truth, pred)
    per_seg = np.abs(truth - pred).reshape(-1, truth.shape[-2], truth.shape[-1]).mean(axis=(0, 2))
    per_inter = {}
    if net is not None:
        for x in net.intersections:
            per_inter[int(x.id)] = float(per_seg[list(x.incoming)].mean())
    n_windows = int(np.prod(truth.shape[:-2])) if truth.ndim > 2 else 1
    return MetricReport(allm["mae"], allm["rmse"], allm["mape"],
                        _metric_triplet(truth[m], pred[m]), _metric_triplet(truth[~m], pred[~m]),
                        per_seg.tolist(), per_inter, n_windows)


# ---------------------------------------------------------------- training

@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 100
    learning_rate: float = 0.001
    seed: int = 0
    ablation: str = "full"
    normalize: bool = True
    contrastive: str | None = None
    temperature: float = 0.5
    corruption: float = 0.1

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigurationError("batch_size and epochs must be positive")
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.seed < 0:
            raise ConfigurationError("seed must be non-negative")
        if self.ablation not in dtignn.VARIANTS:
            raise ConfigurationError(f"ablation must be one of {dtignn.VARIANTS}")
        if self.contrastive not in (None, "L_N", "L_N_minus_N"):
            raise ConfigurationError("contrastive must be L_N, L_N_minus_N or null")
        if not self.temperature > 0 or not 0 <= self.corruption < 1:
            raise ConfigurationError("temperature must be positive and corruption in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> TrainConfig:
        return cls(**{k: doc[k] for k in cls.__dataclass_fields__ if k in doc})


@dataclass
class Model:
    """Trained parameters with everything needed to run them on raw volumes."""

    cfg: dtignn.ModelConfig
    params: dict
    scale: float = 1.0
    variant: str = "full"
    a_static: np.ndarray | None = None
    seed: int = 0

    @property
    def n(self) -> int:
        return self.cfg.n


@dataclass
class TrainResult:
    model: Model
    history: list
    best_epoch: int
    best_val_mae: float

    def history_json(self) -> str:
        return json.dumps({"best_epoch": self.best_epoch, "best_val_mae": self.best_val_mae,
                           "epochs": self.history}, indent=1)


def fit_scale(ds: WindowedDataset, normalize: bool = True) -> float:
    if not normalize:
        return 1.0
    lo = int(ds.starts.min()) if len(ds) else 0
    hi = int(ds.starts.max()) + ds.t + ds.t_prime if len(ds) else 0
    seen = ds.volumes[lo:hi] * ds.mask
    top = float(seen.max()) if seen.size else 0.0
    return top if top > 0 else 1.0


def _model_inputs(model: Model, b: dict, rng: np.random.Generator | None):
    s = model.scale
    size = (b["obs"].shape[0], model.cfg.n, F_CHANNELS)
    # first-step fill-ins are uniform [0, 1) vehicles, whatever the scale
    seed_values = rng.random(size) / s if rng is not None else np.zeros(size)
    return b["obs"] / s, b["phase_feats"], b["adj"], seed_values


def batch_loss(model: Model, b: dict, mask: np.ndarray, rng: np.random.Generator,
               tcfg: TrainConfig | None = None) -> ad.Tensor:
    """Training objective on one batch, in scaled units."""
    obs, feats, adj, seed_values = _model_inputs(model, b, rng)
    res = dtignn.forward_with_imputation(model.params, model.cfg, obs, feats, adj, mask,
                                         model.variant, seed_values, model.a_static)
    truth = b["truth"] / model.scale
    loss = dtignn.loss_prediction(res.history, res.final, truth[:, 1:], b["future"][:, 0] / model.scale, mask)
    if tcfg is not None and tcfg.contrastive is not None:
        u = dtignn.corrupt(res.final, dtignn.rng_for(int(rng.integers(2**31)), "view-u"), tcfg.corruption)
        v = dtignn.corrupt(res.final, dtignn.rng_for(int(rng.integers(2**31)), "view-v"), tcfg.corruption)
        loss = dtignn.loss_contrastive(u, v, tcfg.contrastive, tcfg.temperature, loss, observed=mask[:, 0] > 0)
    return loss


def predict(model: Model, ds: WindowedDataset, batch_size: int = 64) -> np.ndarray:
    """``(windows, T', N, 3)`` predictions in raw units; later steps roll the window forward."""
    rng = dtignn.rng_for(model.seed, "eval-impute")
    out = np.empty((len(ds), ds.t_prime, ds.n, F_CHANNELS))
    for lo in range(0, len(ds), batch_size):
        idx = np.arange(lo, min(lo + batch_size, len(ds)))
        b = ds.batch(idx)
        for k in range(ds.t_prime):
            obs, feats, adj, seed_values = _model_inputs(model, b, rng)
            res = dtignn.forward_with_imputation(model.params, model.cfg, obs, feats, adj, ds.mask,
                                                 model.variant, seed_values, model.a_static)
            pred = res.final.data * model.scale
            out[idx, k] = pred
            if k + 1 < ds.t_prime:
                # unknown future: the prediction stands in for every entry of the new step
                b = dict(b)
                b["obs"] = np.concatenate([b["obs"][:, 1:], pred[:, None] * ds.mask], axis=1)
                b["phase_feats"] = np.concatenate([b["phase_feats"][:, 1:], b["future_phase_feats"][:, k:k + 1]], 1)
                b["adj"] = np.concatenate([b["adj"][:, 1:], b["future_adj"][:, k:k + 1]], 1)
    return out


def evaluate(model: Model, ds: WindowedDataset, net: RoadNetwork | None = None) -> MetricReport:
    """Metrics of the next-step predictions of every window in ``ds`` against full ground truth."""
    if ds.n != model.cfg.n:
        raise DimensionError(f"model expects {model.cfg.n} segments, data has {ds.n}")
    if len(ds) == 0:
        raise ConfigurationError(f"{ds.split} split has no windows")
    pred = predict(model, ds)
    truth = ds.volumes[ds.starts[:, None] + ds.t + np.arange(ds.t_prime)[None, :]]
    return metric_report(truth, pred, ds.mask, net)


def _snapshot(params: dict) -> dict:
    return {k: ad.Tensor(v.data.copy(), requires_grad=True) for k, v in params.items()}


def train(model_cfg: dtignn.ModelConfig, data: dict[str, WindowedDataset], tcfg: TrainConfig,
          net: RoadNetwork | None = None) -> TrainResult:
    """Adam on the masked loss; keeps the parameters with the best observed validation MAE."""
    tr, va = data["train"], data["val"]
    if len(tr) == 0:
        raise ConfigurationError("train split has no windows")
    if tr.t != model_cfg.t_window or tr.n != model_cfg.n:
        raise DimensionError(f"windows have T={tr.t}, N={tr.n}; config says T={model_cfg.t_window}, N={model_cfg.n}")
    a_static = None
    if model_cfg.base == "gcn":
        if net is None:
            raise ConfigurationError("the GCN base needs the road network")
        a_static = normalize_adjacency(static_adjacency(net))
    if not tr.mask.any():
        log.warning("every segment is unobserved: the masked loss is identically zero")
    params = dtignn.init_params(model_cfg, tcfg.seed)
    model = Model(model_cfg, params, fit_scale(tr, tcfg.normalize), tcfg.ablation, a_static, tcfg.seed)
    opt = ad.Adam(list(params.values()), learning_rate=tcfg.learning_rate)
    shuffle = dtignn.rng_for(tcfg.seed, "shuffle")
    impute = dtignn.rng_for(tcfg.seed, "impute")
    best = (math.inf, 0, _snapshot(params))
    history = []
    observed = tr.mask.astype(bool)
    for epoch in range(1, tcfg.epochs + 1):
        order = shuffle.permutation(len(tr))
        losses = []
        for lo in range(0, len(order), tcfg.batch_size):
            b = tr.batch(order[lo:lo + tcfg.batch_size])
            try:
                loss = batch_loss(model, b, tr.mask, impute, tcfg)
                ad.backward(loss)
            except NumericError as exc:
                raise NumericError(f"training diverged in epoch {epoch}: {exc}", checkpoint=best[2]) from exc
            if not np.isfinite(loss.data):
                raise NumericError(f"training diverged in epoch {epoch}", checkpoint=best[2])
            for p in params.values():
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
            opt.step()
            losses.append(loss.item())
        val_mae = math.nan
        if len(va):
            pred = predict(model, va)
            truth = va.volumes[va.starts[:, None] + va.t + np.arange(va.t_prime)[None, :]]
            m = np.broadcast_to(observed, truth.shape)
            val_mae = mae(truth[m], pred[m]) if m.any() else 0.0
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_mae": val_mae})
        score = val_mae if len(va) else history[-1]["train_loss"]
        if score < best[0]:
            best = (score, epoch, _snapshot(params))
        log.info("epoch %d loss %.5f val_mae %.5f", epoch, history[-1]["train_loss"], val_mae)
    model = Model(model_cfg, best[2], model.scale, tcfg.ablation, a_static, tcfg.seed)
    return TrainResult(model, history, best[1], float(best[0]))


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(model: Model, path: str | Path, tcfg: TrainConfig | None = None) -> None:
    extra = {"scale": model.scale, "variant": model.variant, "seed": model.seed}
    if tcfg is not None:
        extra["train"] = tcfg.to_dict()
    dtignn.save_model(model.cfg, model.params, path, extra)


def load_checkpoint(path: str | Path, net: RoadNetwork | None = None) -> Model:
    cfg, params, doc = dtignn.load_model(path)
    a_static = None
    if cfg.base == "gcn":
        if net is None:
            raise ConfigurationError("the GCN base needs the road network")
        a_static = normalize_adjacency(static_adjacency(net))
    return Model(cfg, params, float(doc.get("scale", 1.0)), doc.get("variant", "full"), a_static,
                 int(doc.get("seed", 0)))


# ---------------------------------------------------------------- sweeps

def remask(pack: FlowPack, net: RoadNetwork, unobserved) -> FlowPack:
    return FlowPack(pack.volumes, pack.phases, apply_mask(net, unobserved), pack.interval_s)


def run_one(pack: FlowPack, net: RoadNetwork, model_cfg: dtignn.ModelConfig, tcfg: TrainConfig,
            t_prime: int = 1, ratios=(6, 2, 2)) -> tuple[TrainResult, MetricReport]:
    data = make_windows(pack, net, model_cfg.t_window, t_prime, ratios)
    res = train(model_cfg, data, tcfg, net)
    return res, evaluate(res.model, data["test"], net)


def _row(dataset, variant, seed, pct, rep: MetricReport, epoch_best) -> dict:
    return {"dataset": dataset, "variant": variant, "seed": seed, "sparsity_pct": pct,
            "mae": rep.mae, "rmse": rep.rmse, "mape": rep.mape, "epoch_best": epoch_best}


def sparsity_sweep(pack: FlowPack, net: RoadNetwork, counts: Sequence[int], model_cfg: dtignn.ModelConfig,
                   tcfg: TrainConfig, seeds: Sequence[int] = (0,), dataset: str = "synthetic") -> list[dict]:
    """Re-mask, retrain and test for each count of unobserved intersections and each seed."""
    total = len(net.intersections)
    rows = []
    for count in counts:
        if not 0 <= count <= total:
            raise ConfigurationError(f"cannot mask {count} of {total} intersections")
        for seed in seeds:
            hidden = sample_unobserved(net, count, seed)
            if count == total:
                log.warning("all intersections masked: training loss is identically zero")
            res, rep = run_one(remask(pack, net, hidden), net, model_cfg, _with(tcfg, seed=seed))
            rows.append(_row(dataset, tcfg.ablation, seed, 100.0 * count / total, rep, res.best_epoch))
    return rows


def ablation_study(pack: FlowPack, net: RoadNetwork, model_cfg: dtignn.ModelConfig, tcfg: TrainConfig,
                   seeds: Sequence[int] = (0,), variants: Sequence[str] = dtignn.VARIANTS,
                   dataset: str = "synthetic") -> list[dict]:
    # an intersection counts as unobserved when every segment touching it is
    hidden = [x.id for x in net.intersections if not pack.mask[list(x.incoming) + list(x.outgoing)].any()]
    pct = 100.0 * len(hidden) / len(net.intersections)
    rows = []
    for variant in variants:
        for seed in seeds:
            res, rep = run_one(pack, net, model_cfg, _with(tcfg, seed=seed, ablation=variant))
            rows.append(_row(dataset, variant, seed, pct, rep, res.best_epoch))
    return rows


def _with(tcfg: TrainConfig, **changes) -> TrainConfig:
    doc = tcfg.to_dict()
    doc.update(changes)
    return TrainConfig(**doc)


def write_results_csv(rows: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.10g}" if isinstance(r[k], float) else r[k]) for k in RESULT_COLUMNS})


def median_by(rows: Sequence[dict], key: str, metric: str = "mae") -> dict:
    groups: dict = {}
    for r in rows:
        groups.setdefault(r[key], []).append(r[metric])
    return {k: float(np.median(v)) for k, v in groups.items()}


# ---------------------------------------------------------------- case-study estimator

class ModelEstimator:
    """Closed-loop state estimator backed by a trained model.

    Called with the masked history seen so far (``h x N x 3``), the phase
    indices applied during those steps and the mask; returns the model's
    estimate of the state that follows. Histories shorter than the window are
    padded at the front with empty, all-red steps.
    """

    def __init__(self, model: Model, net: RoadNetwork):
        if model.cfg.n != net.n:
            raise DimensionError(f"model expects {model.cfg.n} segments, network has {net.n}")
        self.model, self.net = model, net
        self.n = net.n
        self._cache: dict[tuple, np.ndarray] = {}
        self._rng = dtignn.rng_for(model.seed, "case-study")

    def _adj(self, row) -> np.ndarray:
        key = tuple(int(i) for i in row)
        if key not in self._cache:
            self._cache[key] = adjacency_series(self.net, np.asarray([key]))[0]
        return self._cache[key]

    def __call__(self, obs_hist, phase_hist, mask) -> np.ndarray:
        t = self.model.cfg.t_window
        obs_hist = np.asarray(obs_hist, dtype=float)[-t:]
        phase_hist = np.asarray(phase_hist, dtype=int)[-t:]
        pad = t - len(obs_hist)
        if pad:
            obs_hist = np.concatenate([np.zeros((pad, self.n, F_CHANNELS)), obs_hist.reshape(-1, self.n, F_CHANNELS)])
            phase_hist = np.concatenate([np.full((pad, len(self.net.intersections)), CLEARANCE, dtype=int),
                                         phase_hist.reshape(-1, len(self.net.intersections))])
        feats = phase_features(self.net, phase_hist)
        adj = np.stack([self._adj(r) for r in phase_hist])
        m = self.model
        res = dtignn.forward_with_imputation(
            m.params, m.cfg, obs_hist[None] / m.scale, feats[None], adj[None], np.asarray(mask, dtype=float),
            m.variant, self._rng.random((1, self.n, F_CHANNELS)) / m.scale, m.a_static)
        return res.final.data[0] * m.scale
