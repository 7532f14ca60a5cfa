"""Risk and age model training on image embeddings.

The survival risk head is trained with a pairwise logistic ranking
loss: every pair of one subject who died and one who was observed
longer contributes log(1 + exp(-(r_short - r_long))), plus a smoothness
penalty on squared differences between risks of adjacent subjects in
time order. The age head is plain L1 regression. Both use an
Adam-style optimizer with decoupled weight decay and are bit-for-bit
deterministic for a given seed: data order, initialization, and every
update are pure numpy driven by named substreams.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import AnalysisError, DataError, NoComparablePairsError
from .metrics import harrell_c
from .rng import substream

# Oversampling factors per age range. The anchors are: no oversampling
# below 50, factor 2 at 50, the top factor 20 for the oldest subjects;
# intermediate 5-year ranges ramp through 3, 5, 8, 12, 16. The table is
# plain data and callers may pass their own.
DEFAULT_FACTOR_TABLE = (
    (0.0, 50.0, 1),
    (50.0, 55.0, 2),
    (55.0, 60.0, 3),
    (60.0, 65.0, 5),
    (65.0, 70.0, 8),
    (70.0, 75.0, 12),
    (75.0, 80.0, 16),
    (80.0, 116.0, 20),  # closed at 116, the oldest supported age
)

MODEL_FORMAT = "visage-linear-head/1"


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 32
    epochs: int = 10
    smooth_lambda: float = 1e-4
    seed: int = 0
    validation_fraction: float = 0.05
    pair_loss: str = "logistic"  # or "hinge"
    hidden: int | None = None
    shuffle: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0 or self.beta1 <= 0 or self.beta2 <= 0:
            raise DataError("rates and betas must be positive")
        if not (self.beta1 < 1 and self.beta2 < 1):
            raise DataError("betas must be below 1")
        if self.weight_decay < 0 or self.smooth_lambda < 0:
            raise DataError("decay terms must be non-negative")
        if self.batch_size <= 0 or self.epochs < 0:
            raise DataError("batch_size must be positive and epochs non-negative")
        if not (0.0 < self.validation_fraction < 1.0):
            raise DataError("validation_fraction must lie in (0, 1)")
        if self.pair_loss not in ("logistic", "hinge"):
            raise DataError(f"unknown pair loss {self.pair_loss!r}")


@dataclass
class RiskModel:
    """A linear head, optionally behind one tanh hidden layer."""

    weights: np.ndarray          # (d,) linear, (h,) as output layer when hidden
    bias: float
    hidden_w: np.ndarray | None = None  # (h, d)
    hidden_b: np.ndarray | None = None  # (h,)

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if self.hidden_w is None:
            return X @ self.weights + self.bias
        h = np.tanh(X @ self.hidden_w.T + self.hidden_b)
        return h @ self.weights + self.bias

    def copy(self) -> "RiskModel":
        return RiskModel(
            self.weights.copy(),
            float(self.bias),
            None if self.hidden_w is None else self.hidden_w.copy(),
            None if self.hidden_b is None else self.hidden_b.copy(),
        )


@dataclass(frozen=True)
class RankLoss:
    loss: float
    grad: np.ndarray
    n_pairs: int
    pair_loss: float
    smooth_loss: float

    @property
    def no_pairs(self) -> bool:
        return self.n_pairs == 0


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    train_c: float
    val_c: float
    skipped_batches: int = 0


@dataclass(frozen=True)
class AgeEpochStats:
    epoch: int
    train_mae: float
    val_mae: float


@dataclass(frozen=True)
class TrainResult:
    model: RiskModel
    trace: tuple
    checkpoints: tuple
    train_indices: tuple[int, ...]
    val_indices: tuple[int, ...]


def _softplus(x: np.ndarray) -> np.ndarray:
    # log(1 + exp(x)) without overflow for large |x|
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def pairwise_rank_loss(
    risks, times, events, smooth_lambda: float = 0.0, form: str = "logistic"
) -> RankLoss:
    """Ranking loss over all comparable pairs plus a smoothness term.

    A pair is one subject with an event and one observed strictly
    longer; subjects with equal times never pair. The pair term is the
    mean of log(1 + exp(-(r_event - r_longer))) over pairs ("hinge"
    swaps in max(0, 1 - margin)). The smoothness term is
    ``smooth_lambda`` times the sum of squared differences between
    risks adjacent in time-sorted order. When a batch holds no
    comparable pair the pair term is skipped and the result is flagged
    through ``n_pairs == 0``.
    """
    r = np.asarray(risks, dtype=float)
    t = np.asarray(times, dtype=float)
    e = np.asarray(events, dtype=bool)
    if not (r.shape == t.shape == e.shape) or r.ndim != 1:
        raise DataError("risks, times, events must be 1-d and aligned")
    if form not in ("logistic", "hinge"):
        raise DataError(f"unknown pair loss {form!r}")
    n = r.size
    grad = np.zeros(n)

    pair_mask = e[:, None] & (t[:, None] < t[None, :])
    n_pairs = int(pair_mask.sum())
    pair_loss = 0.0
    if n_pairs:
        margin = r[:, None] - r[None, :]  # r_event - r_longer
        if form == "logistic":
            losses = _softplus(-margin)
            slope = -1.0 / (1.0 + np.exp(margin))  # d loss / d margin
        else:
            losses = np.maximum(0.0, 1.0 - margin)
            slope = np.where(margin < 1.0, -1.0, 0.0)
        losses = np.where(pair_mask, losses, 0.0)
        slope = np.where(pair_mask, slope, 0.0)
        pair_loss = float(losses.sum() / n_pairs)
        grad += slope.sum(axis=1) / n_pairs
        grad -= slope.sum(axis=0) / n_pairs

    smooth_loss = 0.0
    if smooth_lambda > 0 and n > 1:
        order = np.lexsort((np.arange(n), t))
        diffs = r[order][1:] - r[order][:-1]
        smooth_loss = float(smooth_lambda * np.sum(diffs**2))
        contrib = np.zeros(n)
        np.add.at(contrib, order[1:], 2.0 * smooth_lambda * diffs)
        np.add.at(contrib, order[:-1], -2.0 * smooth_lambda * diffs)
        grad += contrib

    return RankLoss(pair_loss + smooth_loss, grad, n_pairs, pair_loss, smooth_loss)


class _AdamW:
    """Adam with decoupled weight decay; decay skips bias parameters."""

    def __init__(self, params: dict[str, np.ndarray], config: TrainConfig):
        self.params = params
        self.config = config
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        c = self.config
        self.t += 1
        for key, g in grads.items():
            p = self.params[key]
            self.m[key] = c.beta1 * self.m[key] + (1 - c.beta1) * g
            self.v[key] = c.beta2 * self.v[key] + (1 - c.beta2) * g * g
            m_hat = self.m[key] / (1 - c.beta1**self.t)
            v_hat = self.v[key] / (1 - c.beta2**self.t)
            update = m_hat / (np.sqrt(v_hat) + 1e-8)
            if not key.endswith("b"):
                update = update + c.weight_decay * p
            self.params[key] = p - c.learning_rate * update


def _init_model(dim: int, config: TrainConfig) -> tuple[RiskModel, dict[str, np.ndarray]]:
    rng = substream(config.seed, "trainer/init")
    if config.hidden:
        h = config.hidden
        params = {
            "hidden_w": rng.normal(0.0, 1e-2, (h, dim)),
            "hidden_b": np.zeros(h),
            "w": rng.normal(0.0, 1e-4, h),
            "b": np.zeros(1),
        }
    else:
        params = {"w": rng.normal(0.0, 1e-4, dim), "b": np.zeros(1)}
    return _params_to_model(params), params


def _params_to_model(params: dict[str, np.ndarray]) -> RiskModel:
    return RiskModel(
        weights=params["w"].copy(),
        bias=float(params["b"][0]),
        hidden_w=params["hidden_w"].copy() if "hidden_w" in params else None,
        hidden_b=params["hidden_b"].copy() if "hidden_b" in params else None,
    )


def _forward(params: dict[str, np.ndarray], X: np.ndarray):
    if "hidden_w" in params:
        h = np.tanh(X @ params["hidden_w"].T + params["hidden_b"])
        return h @ params["w"] + params["b"][0], h
    return X @ params["w"] + params["b"][0], None


def _backward(params, X, hidden, grad_r) -> dict[str, np.ndarray]:
    grads: dict[str, np.ndarray] = {}
    if hidden is None:
        grads["w"] = X.T @ grad_r
        grads["b"] = np.array([grad_r.sum()])
    else:
        grads["w"] = hidden.T @ grad_r
        grads["b"] = np.array([grad_r.sum()])
        d_pre = (grad_r[:, None] * params["w"]) * (1.0 - hidden**2)
        grads["hidden_w"] = d_pre.T @ X
        grads["hidden_b"] = d_pre.sum(axis=0)
    return grads


def _split(n: int, config: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    perm = substream(config.seed, "trainer/split").permutation(n)
    n_val = int(round(config.validation_fraction * n))
    n_val = max(1, n_val)
    if n_val >= n:
        raise DataError("validation split leaves no training data")
    return perm[: n - n_val], perm[n - n_val :]


def _epoch_batches(train_idx: np.ndarray, config: TrainConfig, shuffle_rng) -> list[np.ndarray]:
    order = (
        train_idx[shuffle_rng.permutation(train_idx.size)]
        if config.shuffle
        else train_idx
    )
    return [
        order[i : i + config.batch_size]
        for i in range(0, order.size, config.batch_size)
    ]


def _safe_c(risks, t, e) -> float:
    try:
        return harrell_c(risks, t, e).c_index
    except NoComparablePairsError:
        return float("nan")


def train_risk_model(embeddings, times, events, config: TrainConfig | None = None) -> TrainResult:
    """Fit the ranking risk head.

    The validation set is the trailing ``validation_fraction`` of the
    seed-shuffled subject order. One checkpoint is kept per epoch, and
    the trace records full train/validation loss and concordance at
    each epoch's end. With ``epochs=0`` the initial model is returned
    with an empty trace. Requires at least two events overall.
    """
    config = config or TrainConfig()
    X = np.asarray(embeddings, dtype=float)
    t = np.asarray(times, dtype=float)
    e = np.asarray(events, dtype=bool)
    if X.ndim != 2 or X.shape[0] != t.size or t.shape != e.shape:
        raise DataError("embeddings must be (n, d) aligned with times and events")
    if int(e.sum()) < 2:
        raise AnalysisError("need at least two events to form training pairs")

    train_idx, val_idx = _split(X.shape[0], config)
    model, params = _init_model(X.shape[1], config)
    optimizer = _AdamW(params, config)
    shuffle_rng = substream(config.seed, "trainer/shuffle")

    trace: list[EpochStats] = []
    checkpoints: list[RiskModel] = []
    for epoch in range(1, config.epochs + 1):
        skipped = 0
        for batch in _epoch_batches(train_idx, config, shuffle_rng):
            risks, hidden = _forward(params, X[batch])
            result = pairwise_rank_loss(
                risks, t[batch], e[batch], config.smooth_lambda, config.pair_loss
            )
            if result.no_pairs:
                skipped += 1
                if not np.any(result.grad):
                    continue
            optimizer.step(_backward(params, X[batch], hidden, result.grad))

        model = _params_to_model(params)
        r_train, _ = _forward(params, X[train_idx])
        r_val, _ = _forward(params, X[val_idx])
        train_eval = pairwise_rank_loss(
            r_train, t[train_idx], e[train_idx], config.smooth_lambda, config.pair_loss
        )
        val_eval = pairwise_rank_loss(
            r_val, t[val_idx], e[val_idx], config.smooth_lambda, config.pair_loss
        )
        trace.append(
            EpochStats(
                epoch,
                train_eval.loss,
                val_eval.loss,
                _safe_c(r_train, t[train_idx], e[train_idx]),
                _safe_c(r_val, t[val_idx], e[val_idx]),
                skipped,
            )
        )
        checkpoints.append(model.copy())

    return TrainResult(
        model,
        tuple(trace),
        tuple(checkpoints),
        tuple(int(i) for i in train_idx),
        tuple(int(i) for i in val_idx),
    )


def train_age_model(embeddings, ages, config: TrainConfig | None = None) -> TrainResult:
    """Fit the age regression head with mean absolute error loss.

    The L1 subgradient is zero at exact equality. Trace rows carry
    train and validation MAE per epoch.
    """
    config = config or TrainConfig()
    X = np.asarray(embeddings, dtype=float)
    y = np.asarray(ages, dtype=float)
    if X.ndim != 2 or X.shape[0] != y.size:
        raise DataError("embeddings must be (n, d) aligned with ages")

    train_idx, val_idx = _split(X.shape[0], config)
    model, params = _init_model(X.shape[1], config)
    optimizer = _AdamW(params, config)
    shuffle_rng = substream(config.seed, "trainer/shuffle")

    trace: list[AgeEpochStats] = []
    checkpoints: list[RiskModel] = []
    for epoch in range(1, config.epochs + 1):
        for batch in _epoch_batches(train_idx, config, shuffle_rng):
            pred, hidden = _forward(params, X[batch])
            residual = pred - y[batch]
            grad_r = np.sign(residual) / batch.size
            optimizer.step(_backward(params, X[batch], hidden, grad_r))

        model = _params_to_model(params)
        r_train, _ = _forward(params, X[train_idx])
        r_val, _ = _forward(params, X[val_idx])
        trace.append(
            AgeEpochStats(
                epoch,
                float(np.mean(np.abs(r_train - y[train_idx]))),
                float(np.mean(np.abs(r_val - y[val_idx]))),
            )
        )
        checkpoints.append(model.copy())

    return TrainResult(
        model,
        tuple(trace),
        tuple(checkpoints),
        tuple(int(i) for i in train_idx),
        tuple(int(i) for i in val_idx),
    )


def balance_by_factors(ages, table=DEFAULT_FACTOR_TABLE, seed: int = 0) -> np.ndarray:
    """Oversample by fixed per-age-range replication factors.

    Every subject appears ``factor`` times for its age range; the
    replicated index sequence is then shuffled deterministically by the
    seed. Ages outside the table's coverage raise DataError.
    """
    a = np.asarray(ages, dtype=float)
    if a.ndim != 1 or a.size == 0:
        raise DataError("ages must be a non-empty 1-d array")
    bands = [(float(lo), float(hi), int(f)) for lo, hi, f in table]
    if any(f < 1 for _, _, f in bands):
        raise DataError("factors must be >= 1")
    factors = np.zeros(a.size, dtype=int)
    assigned = np.zeros(a.size, dtype=bool)
    last_hi = bands[-1][1]
    for lo, hi, f in bands:
        inside = (a >= lo) & ((a < hi) | ((hi == last_hi) & (a == hi)))
        factors[inside & ~assigned] = f
        assigned |= inside
    if not assigned.all():
        bad = float(a[~assigned][0])
        raise DataError(f"age {bad:g} outside factor table coverage")
    replicated = np.repeat(np.arange(a.size), factors)
    rng = substream(seed, "balance/factors")
    return replicated[rng.permutation(replicated.size)]


def factor_for_age(age: float, table=DEFAULT_FACTOR_TABLE) -> int:
    """The replication factor a single age would receive."""
    return int(balance_by_factors(np.array([float(age)]), table, seed=0).size)


def balance_bins(
    ages, bin_width: float = 5.0, target: int = 200, seed: int = 0
) -> np.ndarray:
    """Resample so every occupied age bin holds exactly ``target``.

    Overfull bins are subsampled without replacement; underfull bins
    keep every original member once and pad with uniform draws (with
    replacement). Bins with no members are skipped. The combined index
    sequence is shuffled deterministically by the seed.
    """
    a = np.asarray(ages, dtype=float)
    if a.ndim != 1 or a.size == 0:
        raise DataError("ages must be a non-empty 1-d array")
    if bin_width <= 0 or target <= 0:
        raise DataError("bin_width and target must be positive")
    if np.any(a < 0):
        raise DataError("ages must be >= 0")
    rng = substream(seed, "balance/bins")
    bin_index = np.floor(a / bin_width).astype(int)
    pieces = []
    for b in np.unique(bin_index):
        members = np.nonzero(bin_index == b)[0]
        if members.size > target:
            pieces.append(rng.choice(members, size=target, replace=False))
        elif members.size < target:
            fill = rng.choice(members, size=target - members.size, replace=True)
            pieces.append(np.concatenate([members, fill]))
        else:
            pieces.append(members)
    out = np.concatenate(pieces)
    return out[rng.permutation(out.size)]


def save_model(model: RiskModel, path, *, kind: str, config: TrainConfig) -> None:
    """Write a model as a one-line JSON header plus little-endian
    float32 weights (hidden layer first when present)."""
    parts = []
    if model.hidden_w is not None:
        parts.extend([model.hidden_w.ravel(), model.hidden_b])
        dim = model.hidden_w.shape[1]
        hidden = model.hidden_w.shape[0]
    else:
        dim = model.weights.size
        hidden = None
    parts.extend([model.weights, np.array([model.bias])])
    flat = np.concatenate(parts).astype("<f4")
    header = {
        "format": MODEL_FORMAT,
        "kind": kind,
        "dim": int(dim),
        "hidden": hidden,
        "dtype": "<f4",
        "n_weights": int(flat.size),
        "seed": config.seed,
        "config": {
            k: getattr(config, k)
            for k in (
                "learning_rate",
                "weight_decay",
                "beta1",
                "beta2",
                "batch_size",
                "epochs",
                "smooth_lambda",
                "validation_fraction",
                "pair_loss",
                "shuffle",
            )
        },
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(flat.tobytes())


def load_model(path) -> tuple[RiskModel, dict]:
    """Read a model written by :func:`save_model`."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        blob = fh.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise DataError(f"bad model header: {err}") from None
    if header.get("format") != MODEL_FORMAT:
        raise DataError(f"unsupported model format {header.get('format')!r}")
    flat = np.frombuffer(blob, dtype="<f4").astype(float)
    if flat.size != header["n_weights"]:
        raise DataError("model payload does not match its header")
    dim = header["dim"]
    hidden = header["hidden"]
    if hidden:
        hw = flat[: hidden * dim].reshape(hidden, dim)
        hb = flat[hidden * dim : hidden * dim + hidden]
        w = flat[hidden * dim + hidden : hidden * dim + 2 * hidden]
        b = float(flat[-1])
        model = RiskModel(w, b, hw, hb)
    else:
        model = RiskModel(flat[:dim], float(flat[dim]))
    return model, header
