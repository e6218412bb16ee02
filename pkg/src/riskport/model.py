"""Spatio-temporal scoring model.

Each asset's indicator window is encoded by a shared single-layer LSTM.
The per-asset embeddings are then spatially mixed: one shared softmax
attention distribution over assets (scores from a learned vector, no
query-asset dependence) is blended with a data-driven mixing matrix
(correlation by default) through a learned nonnegative gate beta.
Two independent two-layer ReLU heads map the mixed embedding to a
portfolio logit and a return forecast per asset; portfolio weights are
the softmax of the logits across assets.
"""

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError

CHECKPOINT_FORMAT = "riskport.checkpoint/1"
N_FEATURES = 8

_PARAM_NAMES = (
    "lstm_wx", "lstm_wh", "lstm_b",
    "attn_w", "beta_raw",
    "p_w1", "p_b1", "p_w2", "p_b2",
    "r_w1", "r_b1", "r_w2", "r_b2",
)


@dataclass
class ModelConfig:
    hidden: int = 64
    window: int = 20
    mixing: str = "correlation"  # or "covariance"

    def __post_init__(self):
        if self.hidden < 1:
            raise ConfigError("hidden size must be positive")
        if self.window < 2:
            raise ConfigError("window must be >= 2")
        if self.mixing not in ("correlation", "covariance"):
            raise ConfigError(f"unknown mixing mode {self.mixing!r}")


class ModelParams:
    """Learnable weights. Matrices init uniform(-1/sqrt(d), 1/sqrt(d));
    biases zero except the LSTM forget gate (+1); beta starts at 1."""

    def __init__(self, hidden: int, n_features: int = N_FEATURES, seed: int = 0):
        self.hidden = hidden
        self.n_features = n_features
        rng = np.random.default_rng(seed)
        bound = 1.0 / np.sqrt(hidden)

        def u(*shape):
            return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)

        d = hidden
        self.lstm_wx = u(n_features, 4 * d)
        self.lstm_wh = u(d, 4 * d)
        b = np.zeros(4 * d)
        b[d:2 * d] = 1.0  # forget gate
        self.lstm_b = Tensor(b, requires_grad=True)
        self.attn_w = u(d)
        self.beta_raw = Tensor(np.log(np.e - 1.0), requires_grad=True)  # softplus -> 1
        self.p_w1 = u(d, d)
        self.p_b1 = Tensor(np.zeros(d), requires_grad=True)
        self.p_w2 = u(d, 1)
        self.p_b2 = Tensor(np.zeros(1), requires_grad=True)
        self.r_w1 = u(d, d)
        self.r_b1 = Tensor(np.zeros(d), requires_grad=True)
        self.r_w2 = u(d, 1)
        self.r_b2 = Tensor(np.zeros(1), requires_grad=True)

    def named(self):
        return [(name, getattr(self, name)) for name in _PARAM_NAMES]

    def tensors(self):
        return [getattr(self, name) for name in _PARAM_NAMES]

    def state(self) -> dict:
        return {name: getattr(self, name).data.copy() for name in _PARAM_NAMES}

    def load_state(self, state: dict) -> None:
        for name in _PARAM_NAMES:
            tensor = getattr(self, name)
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != tensor.data.shape:
                raise DataError(
                    f"parameter {name}: shape {arr.shape} != expected {tensor.data.shape}"
                )
            tensor.data = arr.copy()

    def copy(self) -> "ModelParams":
        clone = ModelParams(self.hidden, self.n_features, seed=0)
        clone.load_state(self.state())
        return clone


@dataclass
class ModelOutput:
    logits: Tensor      # (T, N)
    weights: Tensor     # (T, N) rows on the simplex
    predicted: Tensor   # (T, N)


def encode_temporal(windows, params: ModelParams) -> Tensor:
    """Run the shared LSTM over (B, window, features); final hidden state."""
    x = windows if isinstance(windows, Tensor) else Tensor(windows)
    if x.ndim != 3 or x.shape[2] != params.n_features:
        raise ValueError(f"windows must be (B, w, {params.n_features}), got {x.shape}")
    b_sz, w_len, _ = x.shape
    d = params.hidden
    h = Tensor(np.zeros((b_sz, d)))
    c = Tensor(np.zeros((b_sz, d)))
    for k in range(w_len):
        step = x[:, k, :]
        z = step @ params.lstm_wx + h @ params.lstm_wh + params.lstm_b
        gi = ad.sigmoid(z[:, :d])
        gf = ad.sigmoid(z[:, d:2 * d])
        gc = ad.tanh(z[:, 2 * d:3 * d])
        go = ad.sigmoid(z[:, 3 * d:])
        c = gf * c + gi * gc
        h = go * ad.tanh(c)
    return h


def encode_spatial(h, mixing, params: ModelParams) -> Tensor:
    """Blend shared attention with matrix mixing; accepts (N,d) or (T,N,d)."""
    ht = h if isinstance(h, Tensor) else Tensor(h)
    single = ht.ndim == 2
    if single:
        ht = ht.reshape((1,) + ht.shape)
    t_len, n, d = ht.shape
    mix = np.asarray(mixing, dtype=np.float64)
    if single and mix.ndim == 2:
        mix = mix[None, :, :]
    if mix.shape != (t_len, n, n):
        raise ValueError(f"mixing must be {(t_len, n, n)}, got {mix.shape}")

    scores = (ht.reshape((t_len * n, d)) @ params.attn_w).reshape((t_len, n))
    alpha = ad.softmax(scores, axis=-1)
    pooled = alpha.reshape((t_len, 1, n)) @ ht          # (T, 1, d), shared across assets
    beta = ad.softplus(params.beta_raw)
    gate = beta + 1.0
    mixed = Tensor(mix) @ ht                            # (T, N, d)
    hhat = pooled / gate + (beta / gate) * mixed
    if single:
        hhat = hhat.reshape((n, d))
    return hhat


def _head(flat: Tensor, w1, b1, w2, b2) -> Tensor:
    return ad.relu(flat @ w1 + b1) @ w2 + b2


def forward(windows: np.ndarray, mixing: np.ndarray, params: ModelParams) -> ModelOutput:
    """Score a batch: windows (T, N, w, F), mixing (T, N, N)."""
    win = np.asarray(windows, dtype=np.float64)
    if win.ndim != 4:
        raise ValueError(f"windows must be 4-D (T, N, w, F), got {win.shape}")
    t_len, n, w_len, f = win.shape
    h = encode_temporal(win.reshape(t_len * n, w_len, f), params)
    hhat = encode_spatial(h.reshape((t_len, n, params.hidden)), mixing, params)
    flat = hhat.reshape((t_len * n, params.hidden))
    logits = _head(flat, params.p_w1, params.p_b1, params.p_w2, params.p_b2).reshape((t_len, n))
    weights = ad.softmax(logits, axis=-1)
    predicted = _head(flat, params.r_w1, params.r_b1, params.r_w2, params.r_b2).reshape((t_len, n))
    return ModelOutput(logits=logits, weights=weights, predicted=predicted)


def save_checkpoint(params: ModelParams, path) -> None:
    records = []
    for name, tensor in params.named():
        records.append({
            "name": name,
            "shape": list(tensor.data.shape),
            "values": tensor.data.ravel().tolist(),
        })
    blob = {
        "format": CHECKPOINT_FORMAT,
        "hidden": params.hidden,
        "n_features": params.n_features,
        "params": records,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(blob, fh)


def load_checkpoint(path) -> ModelParams:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            blob = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot open checkpoint {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: malformed checkpoint: {exc}") from exc
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path}: unrecognized checkpoint format {blob.get('format')!r}")
    params = ModelParams(hidden=int(blob["hidden"]), n_features=int(blob["n_features"]), seed=0)
    state = {
        rec["name"]: np.asarray(rec["values"], dtype=np.float64).reshape(rec["shape"])
        for rec in blob["params"]
    }
    missing = [n for n in _PARAM_NAMES if n not in state]
    if missing:
        raise DataError(f"{path}: checkpoint missing parameters {missing}")
    params.load_state(state)
    return params
