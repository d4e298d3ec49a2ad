"""Transition-aware graph model with iterative imputation.

Layout conventions: a window is time-major, ``(B, T, N, F)``; batch first,
then history step, segment, channel. The first three channels of ``F`` are the
left/straight/right volumes and the rest are phase indicators of the segment's
downstream intersection.

One prediction step runs

* a base module (GAT or GCN style) over the whole window, giving a row-softmax
  attention ``Att`` (N x N);
* the transition layer ``Z = (A_t * Att)^T X_t`` with ``A_t`` the
  phase-activated adjacency of that step;
* the output layer ``ReLU(sigmoid(Z + X_t) W_L + b_L)``.

``forward_with_imputation`` repeats that for every step of the window and
writes the predictions back into the unobserved entries before moving on.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensorad as ad
from .errors import ConfigurationError, DimensionError
from .tensorad import Tensor

VARIANTS = ("full", "no_imputation", "no_transition_no_imputation")
BASES = ("gat", "gcn")
VOLUME_CHANNELS = 3


@dataclass(frozen=True)
class ModelConfig:
    n: int
    f_in: int = 11
    f_out: int = 3
    t_window: int = 30
    base: str = "gat"
    gcn_layers: int = 1
    cheb_order: int = 3
    chebyshev: bool = False
    hidden: int = 64  # kept for config compatibility; every layer here is F x F
    output_init: str = "residual"

    def __post_init__(self):
        if self.n < 1:
            raise ConfigurationError("n must be positive")
        if self.t_window < 2:
            raise ConfigurationError("t_window must be >= 2")
        if self.f_out != VOLUME_CHANNELS:
            raise ConfigurationError("f_out must be 3")
        if self.f_in < self.f_out:
            raise ConfigurationError("f_in must include the 3 volume channels")
        if self.base not in BASES:
            raise ConfigurationError(f"base must be one of {BASES}")
        if self.output_init not in ("glorot", "residual"):
            raise ConfigurationError("output_init must be glorot or residual")
        for name in ("gcn_layers", "cheb_order", "hidden"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> ModelConfig:
        known = {k: doc[k] for k in cls.__dataclass_fields__ if k in doc}
        try:
            return cls(**known)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from exc


def rng_for(seed: int, name: str) -> np.random.Generator:
    """Independent named substream of one root seed."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def _glorot(rng, shape, fan_in, fan_out):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def _alignment_params(rng, prefix: str, n: int, f: int, t: int) -> dict[str, np.ndarray]:
    return {
        f"V_{prefix}": _glorot(rng, (n, n), n, n),
        f"b_{prefix}": np.zeros((n, n)),
        f"W_{prefix}1": _glorot(rng, (t,), t, 1),
        f"W_{prefix}2": _glorot(rng, (f, t), f, t),
        f"W_{prefix}3": _glorot(rng, (f,), f, 1),
    }


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Fresh parameters.

    Weights are Glorot-uniform and biases zero. ``output_init="residual"``
    starts the output layer at ``W_L = 4 I``, ``b_L = -2`` instead, so that
    ``ReLU(4 sigmoid(z) - 2)`` is close to ``z`` for small ``z`` and the
    untrained model roughly passes ``Z + X_t`` through.
    """
    rng = rng_for(seed, "init")
    n, f, t = cfg.n, cfg.f_in, cfg.t_window
    raw: dict[str, np.ndarray] = {}
    if cfg.base == "gat":
        raw.update(_alignment_params(rng, "s", n, f, t))
    else:
        k = cfg.cheb_order if cfg.chebyshev else 1
        for layer in range(cfg.gcn_layers):
            for j in range(k):
                raw[f"W_gcn{layer}_{j}"] = _glorot(rng, (f, f), f, f)
        raw.update(_alignment_params(rng, "q", n, f, t))
    if cfg.output_init == "residual":
        raw["W_L"] = 4.0 * np.eye(cfg.f_out)
        raw["b_L"] = np.full(cfg.f_out, -2.0)
    else:
        raw["W_L"] = _glorot(rng, (cfg.f_out, cfg.f_out), cfg.f_out, cfg.f_out)
        raw["b_L"] = np.zeros(cfg.f_out)
    return {k: Tensor(v, requires_grad=True) for k, v in raw.items()}


def check_params(cfg: ModelConfig, params: dict[str, Tensor]) -> None:
    expected = {k: v.shape for k, v in init_params(cfg, 0).items()}
    if set(expected) != set(params):
        raise DimensionError(f"parameter names {sorted(params)} do not match config {sorted(expected)}")
    for k, shape in expected.items():
        if params[k].shape != shape:
            raise DimensionError(f"parameter {k} has shape {params[k].shape}, expected {shape}")


# ---------------------------------------------------------------- base modules

def _as_batch(x) -> tuple[Tensor, bool]:
    x = ad.as_tensor(x)
    if x.ndim == 3:
        return x.reshape(1, *x.shape), True
    if x.ndim != 4:
        raise DimensionError(f"window must be (T, N, F) or (B, T, N, F), got {x.shape}")
    return x, False


class _Alignment:
    """``row_softmax(V . sigmoid((X W1) W2 (W3 X)^T + b))`` kept as per-step terms.

    ``X W1`` is a weighted sum over steps and ``W3 X`` is computed step by
    step, so replacing one step's features only touches that step's terms.
    """

    def __init__(self, params: dict[str, Tensor], prefix: str, feats: list[Tensor]):
        self.v, self.b = params[f"V_{prefix}"], params[f"b_{prefix}"]
        self.w1, self.w2, self.w3 = params[f"W_{prefix}1"], params[f"W_{prefix}2"], params[f"W_{prefix}3"]
        t = len(feats)
        _, n, f = feats[0].shape
        if (self.w1.shape != (t,) or self.w2.shape != (f, t) or self.w3.shape != (f,)
                or self.v.shape != (n, n)):
            raise DimensionError(
                f"window (T={t}, N={n}, F={f}) does not match attention parameters "
                f"W1{self.w1.shape} W2{self.w2.shape} W3{self.w3.shape} V{self.v.shape}")
        self.feats = list(feats)
        self.weighted = ad.einsum("btnf,t->bnf", ad.stack(feats, axis=1), self.w1)
        self.proj = [ad.einsum("bnf,f->bn", h, self.w3) for h in feats]

    def replace(self, j: int, h: Tensor) -> None:
        self.weighted = self.weighted + (h - self.feats[j]) * self.w1[j]
        self.proj[j] = ad.einsum("bnf,f->bn", h, self.w3)
        self.feats[j] = h

    def attention(self) -> Tensor:
        lhs = ad.einsum("bnf,ft->bnt", self.weighted, self.w2)
        rhs = ad.stack(self.proj, axis=-1)
        s = ad.matmul(self.v, ad.sigmoid(ad.matmul(lhs, ad.transpose(rhs, (0, 2, 1))) + self.b))
        return ad.softmax_rows(s)


class _GCNStack:
    """Per-step GCN over ``A_hat`` (already normalized); each step is filtered independently."""

    def __init__(self, params: dict[str, Tensor], cfg: ModelConfig, a_static,
                 activation: Callable[[Tensor], Tensor] = ad.sigmoid):
        self.params, self.cfg, self.activation = params, cfg, activation
        self.a_hat = ad.as_tensor(a_static)
        if self.a_hat.shape != (cfg.n, cfg.n):
            raise DimensionError(f"adjacency {self.a_hat.shape} does not match N={cfg.n}")

    def __call__(self, h: Tensor) -> Tensor:
        cfg = self.cfg
        if h.shape[-2] != self.a_hat.shape[0]:
            raise DimensionError(f"adjacency {self.a_hat.shape} does not match N={h.shape[-2]}")
        k = cfg.cheb_order if cfg.chebyshev else 1
        for layer in range(cfg.gcn_layers):
            if cfg.chebyshev:
                # scaled Laplacian with the largest eigenvalue taken as 2
                lap = -1.0 * self.a_hat
                terms = [h]
                if k > 1:
                    terms.append(ad.einsum("nm,bmf->bnf", lap, h))
                while len(terms) < k:
                    terms.append(2.0 * ad.einsum("nm,bmf->bnf", lap, terms[-1]) - terms[-2])
            else:
                terms = [ad.einsum("nm,bmf->bnf", self.a_hat, h)]
            acc = None
            for j, term in enumerate(terms):
                part = ad.einsum("bnf,fg->bng", term, self.params[f"W_gcn{layer}_{j}"])
                acc = part if acc is None else acc + part
            h = self.activation(acc)
        return h


def _steps(x: Tensor) -> list[Tensor]:
    return [x[:, j] for j in range(x.shape[1])]


def base_gat_attention(x, params: dict[str, Tensor]) -> Tensor:
    """Attention over segments from a ``(B, T, N, F)`` (or unbatched) window."""
    xb, single = _as_batch(x)
    att = _Alignment(params, "s", _steps(xb)).attention()
    return att.reshape(*att.shape[1:]) if single else att


def base_gcn_attention(x, a_static, params: dict[str, Tensor], cfg: ModelConfig,
                       activation: Callable[[Tensor], Tensor] = ad.sigmoid) -> Tensor:
    """GCN stack ``H = act(A_hat X W)`` per step, then the alignment attention on ``H``.

    With ``cfg.chebyshev`` each layer sums Chebyshev terms ``T_k(-A_hat) X W_k``
    for ``k < cheb_order``.
    """
    xb, single = _as_batch(x)
    gcn = _GCNStack(params, cfg, a_static, activation)
    att = _Alignment(params, "q", [gcn(h) for h in _steps(xb)]).attention()
    return att.reshape(*att.shape[1:]) if single else att


class _WindowAttention:
    """Attention of the configured base module over a window whose steps get replaced."""

    def __init__(self, params, cfg: ModelConfig, steps: list[Tensor], a_static=None):
        if cfg.base == "gcn":
            if a_static is None:
                raise ConfigurationError("the GCN base needs the normalized static adjacency")
            self.filt = _GCNStack(params, cfg, a_static)
            self.align = _Alignment(params, "q", [self.filt(h) for h in steps])
        else:
            self.filt = None
            self.align = _Alignment(params, "s", steps)

    def replace(self, j: int, h: Tensor) -> None:
        self.align.replace(j, self.filt(h) if self.filt is not None else h)

    def attention(self) -> Tensor:
        return self.align.attention()


# ---------------------------------------------------------------- transition and output

def neural_transition(x_t, att, a_t) -> Tensor:
    """``(A_t * Att)^T X_t``: volume each segment receives from its upstreams."""
    x_t, att, a_t = ad.as_tensor(x_t), ad.as_tensor(att), ad.as_tensor(a_t)
    if att.shape[-1] != att.shape[-2] or att.shape[-1] != x_t.shape[-2] or a_t.shape[-2:] != att.shape[-2:]:
        raise DimensionError(f"transition: X_t {x_t.shape}, Att {att.shape}, A_t {a_t.shape}")
    gamma = a_t * att
    if gamma.ndim == 2:
        return ad.matmul(gamma.T, x_t)
    return ad.matmul(ad.transpose(gamma, (0, 2, 1)), x_t)


def output_layer(z, x_t, params: dict[str, Tensor]) -> Tensor:
    z, x_t = ad.as_tensor(z), ad.as_tensor(x_t)
    if z.shape != x_t.shape:
        raise DimensionError(f"output layer: Z {z.shape} vs X_t {x_t.shape}")
    return ad.relu(ad.matmul(ad.sigmoid(z + x_t), params["W_L"]) + params["b_L"])


# ---------------------------------------------------------------- imputation forward

@dataclass
class ForwardResult:
    history: Tensor            # (B, T-1, N, 3): predictions for window steps 1..T-1
    final: Tensor              # (B, N, 3): prediction for the step after the window
    merged: list = field(default_factory=list)   # T tensors (B, N, 3): merged states per step


def forward_with_imputation(params: dict[str, Tensor], cfg: ModelConfig, obs, phase_feats, adj, mask,
                            variant: str = "full", seed_values=None, a_static=None) -> ForwardResult:
    """Predict every step of the window and the one after it.

    ``obs`` is ``(B, T, N, 3)`` with unobserved entries zero, ``phase_feats``
    ``(B, T, N, f_in - 3)``, ``adj`` the per-step phase-activated adjacency
    ``(B, T, N, N)`` and ``mask`` the ``(N, 3)`` observability mask.

    ``full`` seeds step 0's unobserved entries with ``seed_values`` (uniform
    [0, 1) when built by the pipeline) and merges each step's prediction into
    the next step's unobserved entries. ``no_imputation`` leaves them at zero.
    ``no_transition_no_imputation`` also replaces the transition layer by the
    plain aggregation ``Att X_t``.
    """
    if variant not in VARIANTS:
        raise ConfigurationError(f"unknown variant {variant!r}")
    obs = np.asarray(obs, dtype=float)
    phase_feats = np.asarray(phase_feats, dtype=float)
    adj = np.asarray(adj, dtype=float)
    m = np.asarray(mask, dtype=float)
    if obs.ndim != 4 or obs.shape[-1] != VOLUME_CHANNELS:
        raise DimensionError(f"observations must be (B, T, N, 3), got {obs.shape}")
    b, t, n, _ = obs.shape
    if (n, t) != (cfg.n, cfg.t_window):
        raise DimensionError(f"window has N={n}, T={t}; model expects N={cfg.n}, T={cfg.t_window}")
    if m.shape != (n, VOLUME_CHANNELS):
        raise ConfigurationError(f"mask must be ({n}, 3), got {m.shape}")
    if phase_feats.shape != (b, t, n, cfg.f_in - VOLUME_CHANNELS):
        raise DimensionError(f"phase features must be {(b, t, n, cfg.f_in - VOLUME_CHANNELS)}, got {phase_feats.shape}")
    if adj.shape != (b, t, n, n):
        raise DimensionError(f"adjacency must be {(b, t, n, n)}, got {adj.shape}")

    impute = variant == "full"
    transition = variant != "no_transition_no_imputation"
    hidden = 1.0 - m
    steps: list[Tensor] = [ad.as_tensor(obs[:, j]) for j in range(t)]
    if impute:
        seed = np.zeros((b, n, VOLUME_CHANNELS)) if seed_values is None else np.asarray(seed_values, dtype=float)
        if seed.shape != (b, n, VOLUME_CHANNELS):
            raise DimensionError(f"seed values must be {(b, n, VOLUME_CHANNELS)}, got {seed.shape}")
        steps[0] = ad.as_tensor(obs[:, 0] * m + seed * hidden)
    phase_t = [ad.as_tensor(phase_feats[:, j]) for j in range(t)]
    window = _WindowAttention(params, cfg, [ad.concat([x, fp], axis=-1) for x, fp in zip(steps, phase_t)],
                              a_static)
    preds: list[Tensor] = []
    for tau in range(t):
        att = window.attention() if impute or tau == 0 else att
        x_t = steps[tau]
        if transition:
            z = neural_transition(x_t, att, adj[:, tau])
        else:
            z = ad.matmul(att, x_t)
        pred = output_layer(z, x_t, params)
        preds.append(pred)
        if impute and tau + 1 < t:
            steps[tau + 1] = obs[:, tau + 1] * m + pred * hidden
            window.replace(tau + 1, ad.concat([steps[tau + 1], phase_t[tau + 1]], axis=-1))
    history = ad.stack(preds[:-1], axis=1)
    return ForwardResult(history, preds[-1], steps)


# ---------------------------------------------------------------- losses

def loss_prediction(history, final, history_targets, final_targets, mask) -> Tensor:
    """Masked L2 over the window's own steps plus the masked L2 of the next-step prediction.

    Each term averages the per-segment norm of the 3-channel residual over all
    segments (observed or not) and steps, then over the batch.
    """
    return ad.masked_l2(history, history_targets, mask) + ad.masked_l2(final, final_targets, mask)


def corrupt(x, rng: np.random.Generator, p: float = 0.1) -> Tensor:
    """Zero each output entry independently with probability ``p``."""
    x = ad.as_tensor(x)
    keep = (rng.random(x.shape) >= p).astype(float)
    return x * keep


def loss_contrastive(u, v, mode: str, temperature: float, base_loss=0.0, observed=None) -> Tensor:
    """``base_loss`` minus the symmetric agreement objective between two output views.

    ``u`` and ``v`` are ``(N, F)`` (or batched ``(B, N, F)``) outputs. With
    ``mode="L_N"`` the per-node objective is the log-softmax of the positive
    cosine ``cos(u_i, v_i) / tau`` against ``cos(u_i, v_k) / tau`` for the
    other nodes ``k``; ``"L_N_minus_N"`` keeps only ``cos(u_i, v_i) / tau``.
    ``observed`` (bool per node) restricts positives and negatives to
    observable nodes.
    """
    if mode not in ("L_N", "L_N_minus_N"):
        raise ConfigurationError(f"unknown contrastive mode {mode!r}")
    if not temperature > 0:
        raise ConfigurationError("temperature must be positive")
    u, v = ad.as_tensor(u), ad.as_tensor(v)
    if u.shape != v.shape:
        raise DimensionError(f"views differ in shape: {u.shape} vs {v.shape}")
    if observed is not None:
        idx = np.flatnonzero(np.asarray(observed, dtype=bool))
        if idx.size == 0:
            return ad.as_tensor(base_loss) + 0.0
        u = ad.take(u, (Ellipsis, idx, slice(None)))
        v = ad.take(v, (Ellipsis, idx, slice(None)))
    n = u.shape[-2]
    eye = np.eye(n)
    objective = None
    for a, b in ((u, v), (v, u)):
        sim = ad.cosine_matrix(a, b) * (1.0 / temperature)
        pos = ad.tsum(sim * eye, axis=-1)
        term = pos if mode == "L_N_minus_N" else pos - ad.logsumexp(sim, axis=-1)
        objective = term if objective is None else objective + term
    return ad.as_tensor(base_loss) - ad.mean(objective) * 0.5


# ---------------------------------------------------------------- checkpoints

def save_model(cfg: ModelConfig, params: dict[str, Tensor], path: str | Path, extra: dict | None = None) -> None:
    """Parameters to ``path`` and the config snapshot to ``path`` with a ``.config.json`` suffix."""
    path = Path(path)
    ad.save_params(params, path)
    doc = {"model": cfg.to_dict(), **(extra or {})}
    config_path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def config_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".config.json")


def load_model(path: str | Path) -> tuple[ModelConfig, dict[str, Tensor], dict]:
    path = Path(path)
    doc = json.loads(config_path(path).read_text())
    cfg = ModelConfig.from_dict(doc["model"])
    params = ad.load_params(path)
    check_params(cfg, params)
    return cfg, params, doc
