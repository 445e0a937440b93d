"""A small fully-connected network with pluggable normalization layers.

Blocks are ``dense -> [norm] -> [relu]``, followed by a dense output layer and
softmax cross-entropy.  Everything is column-major in the sense of the rest of
the package: a batch is ``features x samples``.
"""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import baselines, swbn
from .baselines import BnState, IterNormState
from .criteria import Criterion
from .data import Dataset, batches, make_rng
from .matrixcore import ShapeError, correlation, mean_abs_offdiag
from .swbn import BackwardMode, SwbnState

log = logging.getLogger(__name__)

NORM_KINDS = ("none", "bn", "swbn-kl", "swbn-fro", "iternorm")


class TrainingDivergence(RuntimeError):
    def __init__(self, epoch: int, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step


# -- dense / activation / loss ------------------------------------------------

@dataclass
class DenseLayer:
    weights: np.ndarray
    bias: np.ndarray
    vel_w: np.ndarray = None
    vel_b: np.ndarray = None
    grad_w: np.ndarray = None
    grad_b: np.ndarray = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(f"inconsistent dense shapes {self.weights.shape} / {self.bias.shape}")
        if self.vel_w is None:
            self.vel_w = np.zeros_like(self.weights)
        if self.vel_b is None:
            self.vel_b = np.zeros_like(self.bias)
        self.grad_w = np.zeros_like(self.weights)
        self.grad_b = np.zeros_like(self.bias)

    @classmethod
    def init(cls, fan_in: int, fan_out: int, rng: np.random.Generator) -> "DenseLayer":
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        return cls(rng.uniform(-bound, bound, size=(fan_out, fan_in)), np.zeros(fan_out))


def dense_forward(x: np.ndarray, layer: DenseLayer) -> np.ndarray:
    if x.shape[0] != layer.weights.shape[1]:
        raise ShapeError(f"input has {x.shape[0]} features, layer expects {layer.weights.shape[1]}")
    return layer.weights @ x + layer.bias[:, None]


def dense_backward(grad_y: np.ndarray, x: np.ndarray,
                   layer: DenseLayer) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(grad_x, grad_w, grad_b)`` for ``y = W x + b``; ``x`` is the forward input."""
    if grad_y.shape != (layer.weights.shape[0], x.shape[1]):
        raise ShapeError(f"grad_y shape {grad_y.shape} does not match layer output")
    return layer.weights.T @ grad_y, grad_y @ x.T, grad_y.sum(axis=1)


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(grad_y: np.ndarray, x: np.ndarray) -> np.ndarray:
    return grad_y * (x > 0)


def softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. ``logits`` (C x n)."""
    labels = np.asarray(labels)
    classes, n = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"{labels.shape} labels for {n} samples")
    if n and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"label out of range for {classes} classes")
    shifted = logits - logits.max(axis=0, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=0))
    log_probs = shifted - log_norm
    cols = np.arange(n)
    loss = -float(log_probs[labels, cols].mean())
    grad = np.exp(log_probs)
    grad[labels, cols] -= 1.0
    grad /= n
    return loss, grad


def sgd_momentum_step(params, grads, velocities, lr: float, momentum: float) -> None:
    """In place: ``v <- momentum * v + g``; ``p <- p - lr * v``."""
    for p, g, v in zip(params, grads, velocities):
        v *= momentum
        v += g
        p -= lr * v


# -- normalization layers -----------------------------------------------------

class NormLayer:
    """Shared surface: ``forward_train``, ``backward``, ``predict``, ``whitened``."""

    kind = "none"
    state = None

    def __init__(self):
        self.cache = None
        self.vel_gamma = np.zeros(self.state.d)
        self.vel_beta = np.zeros(self.state.d)
        self.grad_gamma = np.zeros(self.state.d)
        self.grad_beta = np.zeros(self.state.d)

    def params(self):
        return [(self.state.gamma, self.grad_gamma, self.vel_gamma),
                (self.state.beta, self.grad_beta, self.vel_beta)]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "state": self.state.to_dict()}


class SwbnNorm(NormLayer):
    def __init__(self, state: SwbnState, mode: BackwardMode = BackwardMode.FAITHFUL):
        self.state = state
        self.mode = BackwardMode.parse(mode)
        self.kind = f"swbn-{state.criterion.value}"
        super().__init__()

    def forward_train(self, x):
        out, self.cache = swbn.forward_train(x, self.state)
        return out

    def backward(self, g):
        gx, self.grad_gamma[:], self.grad_beta[:] = swbn.backward(g, self.cache, self.state, self.mode)
        return gx

    def predict(self, x):
        return swbn.forward_predict(x, self.state)

    def whitened(self, x):
        return swbn.whiten_predict(x, self.state)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "mode": self.mode.value, "state": self.state.to_dict()}


class BnNorm(NormLayer):
    kind = "bn"

    def __init__(self, state: BnState):
        self.state = state
        super().__init__()

    def forward_train(self, x):
        out, self.cache = baselines.bn_forward_train(x, self.state)
        return out

    def backward(self, g):
        gx, self.grad_gamma[:], self.grad_beta[:] = baselines.bn_backward(g, self.cache, self.state)
        return gx

    def predict(self, x):
        return baselines.bn_predict(x, self.state)

    def whitened(self, x):
        return baselines.bn_whiten_predict(x, self.state)


class IterNormNorm(NormLayer):
    kind = "iternorm"

    def __init__(self, state: IterNormState):
        self.state = state
        super().__init__()

    def forward_train(self, x):
        out, self.cache = baselines.iternorm_forward_train(x, self.state)
        return out

    def backward(self, g):
        gx, self.grad_gamma[:], self.grad_beta[:] = baselines.iternorm_backward(g, self.cache, self.state)
        return gx

    def predict(self, x):
        return baselines.iternorm_predict(x, self.state)

    def whitened(self, x):
        return baselines.iternorm_whiten_predict(x, self.state)


def make_norm(kind: str, d: int, alpha: float = swbn.DEFAULT_ALPHA, eta: float = swbn.DEFAULT_ETA,
              eps: float = swbn.DEFAULT_EPS, iternorm_t: int = 5,
              backward_mode: BackwardMode | str = BackwardMode.FAITHFUL) -> NormLayer | None:
    if kind == "none":
        return None
    if kind == "bn":
        return BnNorm(BnState.fresh(d, eta=eta, eps=eps))
    if kind in ("swbn-kl", "swbn-fro"):
        state = SwbnState.fresh(d, Criterion.parse(kind.split("-")[1]), alpha=alpha, eta=eta, eps=eps)
        return SwbnNorm(state, backward_mode)
    if kind == "iternorm":
        return IterNormNorm(IterNormState.fresh(d, T=iternorm_t, eta=eta, eps=eps))
    raise ValueError(f"unknown norm kind {kind!r}; expected one of {NORM_KINDS}")


def norm_from_dict(payload: dict) -> NormLayer | None:
    if payload is None:
        return None
    kind = payload["kind"]
    if kind.startswith("swbn"):
        return SwbnNorm(SwbnState.from_dict(payload["state"]), payload.get("mode", "faithful"))
    if kind == "bn":
        return BnNorm(BnState.from_dict(payload["state"]))
    if kind == "iternorm":
        return IterNormNorm(IterNormState.from_dict(payload["state"]))
    raise ValueError(f"unknown norm kind {kind!r} in checkpoint")


# -- model ---------------------------------------------------------------------

@dataclass
class LayerSpec:
    out_dim: int
    norm: str = "none"
    activation: str = "relu"

    def __post_init__(self):
        if self.norm not in NORM_KINDS:
            raise ValueError(f"unknown norm kind {self.norm!r}")
        if self.activation not in ("relu", "none"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.out_dim < 1:
            raise ValueError("layer width must be positive")


@dataclass
class ModelSpec:
    in_dim: int
    hidden: list[LayerSpec]
    classes: int

    def __post_init__(self):
        self.hidden = [h if isinstance(h, LayerSpec) else LayerSpec(**h) for h in self.hidden]
        if self.in_dim < 1 or self.classes < 2:
            raise ValueError("need in_dim >= 1 and at least two classes")

    @classmethod
    def mlp(cls, in_dim: int, widths, classes: int, norm: str = "none") -> "ModelSpec":
        return cls(in_dim, [LayerSpec(w, norm, "relu") for w in widths], classes)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    lr_halving_period: int = 20
    seed: int = 0
    swbn_alpha: float = swbn.DEFAULT_ALPHA
    backward_mode: str = "faithful"
    eta: float = swbn.DEFAULT_ETA
    eps: float = swbn.DEFAULT_EPS
    iternorm_t: int = 5
    shuffle: bool = True
    record_time: bool = False

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and lr > 0 are required")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.lr_halving_period < 1:
            raise ValueError("lr_halving_period must be >= 1")
        BackwardMode.parse(self.backward_mode)

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``; halves every period."""
        return self.lr * 0.5 ** ((epoch - 1) // self.lr_halving_period)


@dataclass
class Block:
    dense: DenseLayer
    norm: NormLayer | None
    activation: str
    cache: dict = field(default_factory=dict)


class Model:
    def __init__(self, spec: ModelSpec, blocks: list[Block], output: DenseLayer):
        self.spec = spec
        self.blocks = blocks
        self.output = output
        self._out_input = None

    @classmethod
    def build(cls, spec: ModelSpec, seed: int, **norm_kwargs) -> "Model":
        rng = make_rng(seed, 10)
        blocks = []
        fan_in = spec.in_dim
        for layer in spec.hidden:
            dense = DenseLayer.init(fan_in, layer.out_dim, rng)
            blocks.append(Block(dense, make_norm(layer.norm, layer.out_dim, **norm_kwargs), layer.activation))
            fan_in = layer.out_dim
        return cls(spec, blocks, DenseLayer.init(fan_in, spec.classes, rng))

    @property
    def norms(self) -> list[NormLayer]:
        return [b.norm for b in self.blocks if b.norm is not None]

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        for b in self.blocks:
            b.cache["x"] = x
            x = dense_forward(x, b.dense)
            if b.norm is not None:
                x = b.norm.forward_train(x) if train else b.norm.predict(x)
            if b.activation == "relu":
                b.cache["pre_act"] = x
                x = relu_forward(x)
        self._out_input = x
        return dense_forward(x, self.output)

    def backward(self, grad_logits: np.ndarray) -> np.ndarray:
        """Fill every layer's gradient buffers; returns the input gradient."""
        g, self.output.grad_w[:], self.output.grad_b[:] = dense_backward(grad_logits, self._out_input, self.output)
        for b in reversed(self.blocks):
            if b.activation == "relu":
                g = relu_backward(g, b.cache["pre_act"])
            if b.norm is not None:
                g = b.norm.backward(g)
            g, b.dense.grad_w[:], b.dense.grad_b[:] = dense_backward(g, b.cache["x"], b.dense)
        return g

    def params(self):
        """``(param, grad, velocity)`` triples in a fixed order."""
        out = []
        for b in self.blocks:
            out.append((b.dense.weights, b.dense.grad_w, b.dense.vel_w))
            # a bias in front of a norm layer is cancelled by its centering; keep it frozen at 0
            if b.norm is None:
                out.append((b.dense.bias, b.dense.grad_b, b.dense.vel_b))
            else:
                out += b.norm.params()
        out += [(self.output.weights, self.output.grad_w, self.output.vel_w),
                (self.output.bias, self.output.grad_b, self.output.vel_b)]
        return out

    def last_norm_features(self, x: np.ndarray) -> np.ndarray | None:
        """Inference-mode output of the last norm layer before scale and shift."""
        last = max((i for i, b in enumerate(self.blocks) if b.norm is not None), default=None)
        if last is None:
            return None
        for i, b in enumerate(self.blocks):
            x = dense_forward(x, b.dense)
            if i == last:
                return b.norm.whitened(x)
            if b.norm is not None:
                x = b.norm.predict(x)
            if b.activation == "relu":
                x = relu_forward(x)
        return None

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "blocks": [{"weights": b.dense.weights.tolist(), "bias": b.dense.bias.tolist(),
                        "norm": None if b.norm is None else b.norm.to_dict()} for b in self.blocks],
            "output": {"weights": self.output.weights.tolist(), "bias": self.output.bias.tolist()},
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "Model":
        spec = ModelSpec(**payload["spec"])
        blocks = [Block(DenseLayer(np.array(b["weights"]), np.array(b["bias"])),
                        norm_from_dict(b["norm"]), layer.activation)
                  for b, layer in zip(payload["blocks"], spec.hidden)]
        out = payload["output"]
        return cls(spec, blocks, DenseLayer(np.array(out["weights"]), np.array(out["bias"])))


def build_model(spec: ModelSpec, cfg: TrainConfig) -> Model:
    return Model.build(spec, cfg.seed, alpha=cfg.swbn_alpha, eta=cfg.eta, eps=cfg.eps,
                       iternorm_t=cfg.iternorm_t, backward_mode=cfg.backward_mode)


# -- training ------------------------------------------------------------------

METRICS_COLUMNS = ("epoch", "split", "loss", "accuracy", "mean_abs_offdiag_lastnorm", "elapsed_ms", "seed")


@dataclass
class MetricsRow:
    epoch: int
    split: str
    loss: float
    accuracy: float
    mean_abs_offdiag_lastnorm: float | None
    elapsed_ms: float | None
    seed: int

    def csv_fields(self) -> list[str]:
        def num(v):
            return "" if v is None else "%.17g" % v
        return [str(self.epoch), self.split, num(self.loss), num(self.accuracy),
                num(self.mean_abs_offdiag_lastnorm), num(self.elapsed_ms), str(self.seed)]


def write_metrics_csv(path, rows: list[MetricsRow]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(METRICS_COLUMNS) + "\n")
        for r in rows:
            fh.write(",".join(r.csv_fields()) + "\n")


def read_metrics_csv(path) -> list[MetricsRow]:
    rows = []
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if tuple(header) != METRICS_COLUMNS:
            raise ValueError(f"unexpected metrics header {header}")
        for line in fh:
            f = line.rstrip("\n").split(",")
            opt = [None if v == "" else float(v) for v in f[4:6]]
            rows.append(MetricsRow(int(f[0]), f[1], float(f[2]), float(f[3]), opt[0], opt[1], int(f[6])))
    return rows


def evaluate(model: Model, dataset: Dataset, chunk: int = 4096) -> tuple[float, float, float | None]:
    """Inference-mode ``(mean loss, accuracy, mean |offdiag| of last norm correlation)``."""
    n = len(dataset)
    total_loss = 0.0
    correct = 0
    feats = []
    for start in range(0, n, chunk):
        x = dataset.features[:, start:start + chunk]
        y = dataset.labels[start:start + chunk]
        logits = model.forward(x, train=False)
        loss, _ = softmax_xent(logits, y)
        total_loss += loss * len(y)
        correct += int((logits.argmax(axis=0) == y).sum())
        if model.norms:
            feats.append(model.last_norm_features(x))
    offdiag = None
    if feats:
        f = np.concatenate(feats, axis=1)
        if f.shape[0] >= 2:
            offdiag = mean_abs_offdiag(correlation(f))
    return total_loss / n, correct / n, offdiag


def train(model: Model | ModelSpec, train_set: Dataset, test_set: Dataset,
          cfg: TrainConfig) -> list[MetricsRow]:
    """Mini-batch SGD with momentum; one train and one test row per epoch.

    Epoch 0 rows describe the untouched model.  ``elapsed_ms`` is only filled
    when ``cfg.record_time`` is set so that default runs are byte-reproducible.
    """
    if isinstance(model, ModelSpec):
        model = build_model(model, cfg)
    params = model.params()
    p_list = [p for p, _, _ in params]
    g_list = [g for _, g, _ in params]
    v_list = [v for _, _, v in params]

    t0 = time.perf_counter()

    def rows_for(epoch):
        out = []
        for ds in (train_set, test_set):
            loss, acc, offdiag = evaluate(model, ds)
            elapsed = (time.perf_counter() - t0) * 1e3 if cfg.record_time else None
            out.append(MetricsRow(epoch, ds.split, loss, acc, offdiag, elapsed, cfg.seed))
        return out

    rows = rows_for(0)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr_at(epoch)
        for batch in batches(train_set, cfg.batch_size, cfg.seed, epoch, cfg.shuffle):
            if batch.x.shape[1] < 2:
                log.warning("dropping final batch of size 1 at epoch %d", epoch)
                continue
            logits = model.forward(batch.x, train=True)
            loss, grad = softmax_xent(logits, batch.y)
            if not math.isfinite(loss):
                raise TrainingDivergence(epoch, step, loss)
            model.backward(grad)
            sgd_momentum_step(p_list, g_list, v_list, lr, cfg.momentum)
            step += 1
        rows += rows_for(epoch)
        for r in rows[-2:]:
            if not math.isfinite(r.loss):
                raise TrainingDivergence(epoch, step, r.loss)
    return rows


# -- gradient checking ---------------------------------------------------------

def fd_gradcheck(model: Model, x: np.ndarray, labels: np.ndarray, step: float = 1e-5) -> float:
    """Max relative error between backprop and central differences.

    Runs on a copy with every SWBN layer in exact-backward mode and ``alpha``
    pinned to 0 so the training-mode forward is a fixed function.  Covers all
    parameters and the input.
    """
    model = copy.deepcopy(model)
    for norm in model.norms:
        if isinstance(norm, SwbnNorm):
            norm.mode = BackwardMode.EXACT
            norm.state.alpha = 0.0
    x = np.array(x, dtype=np.float64)

    def loss_at():
        return softmax_xent(model.forward(x, train=True), labels)[0]

    _, grad_logits = softmax_xent(model.forward(x, train=True), labels)
    grad_x = model.backward(grad_logits)
    targets = [(p, g.copy()) for p, g, _ in model.params()] + [(x, grad_x)]

    worst = 0.0
    for arr, analytic in targets:
        flat = arr.reshape(-1)
        a_flat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_at()
            flat[i] = orig - step
            down = loss_at()
            flat[i] = orig
            numeric = (up - down) / (2 * step)
            err = abs(a_flat[i] - numeric) / max(1e-8, abs(numeric))
            worst = max(worst, err)
    return worst
