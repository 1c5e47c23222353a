"""A small fully-connected regression network with manual backprop.

Hidden layers use ReLU, the output layer is affine. Training is plain
mini-batch SGD on the mean absolute error, with the subgradient of ``|x|``
at zero taken as 0.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import TrainingDiverged, ValidationError


@dataclass
class MlpModel:
    """Layer weights ``W[i]`` of shape ``(fan_in, fan_out)`` and biases ``b[i]``."""

    weights: list
    biases: list

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValidationError("model needs at least one layer and matching weights/biases")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValidationError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and w.shape[0] != self.weights[i - 1].shape[1]:
                raise ValidationError(f"layer {i}: fan_in {w.shape[0]} != previous fan_out")

    @property
    def layer_sizes(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def dtype(self):
        return self.weights[0].dtype

    @property
    def n_params(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self):
        return MlpModel([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def astype(self, dtype):
        return MlpModel([w.astype(dtype) for w in self.weights], [b.astype(dtype) for b in self.biases])

    def parameters(self):
        """Weights and biases interleaved: ``[W0, b0, W1, b1, ...]``."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


def init(layer_sizes, seed, dtype=np.float32):
    """He-normal weights (variance 2/fan_in) and zero biases."""
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2 or min(sizes) < 1:
        raise ValidationError(f"invalid layer sizes {layer_sizes}")
    rng = np.random.default_rng(seed)
    weights = [(rng.standard_normal((a, b)) * np.sqrt(2.0 / a)).astype(dtype)
               for a, b in zip(sizes[:-1], sizes[1:])]
    biases = [np.zeros(b, dtype=dtype) for b in sizes[1:]]
    return MlpModel(weights, biases)


def _activations(model, X):
    """Inputs to every layer plus the final output."""
    acts = [X]
    h = X
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        h = h @ w + b
        if i < last:
            np.maximum(h, 0, out=h)
        acts.append(h)
    return acts


def forward(model, x):
    """Network output for one input vector or a batch of rows."""
    x = np.asarray(x)
    if x.shape[-1] != model.layer_sizes[0]:
        raise ValidationError(f"input width {x.shape[-1]} != model input size {model.layer_sizes[0]}")
    single = x.ndim == 1
    out = _activations(model, np.atleast_2d(x).astype(model.dtype, copy=False))[-1]
    return out[0] if single else out


def l1_loss(pred, target):
    """Mean absolute difference over all components."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValidationError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return float(np.mean(np.abs(pred.astype(np.float64) - target)))


def _backward(model, acts, grad_out):
    """Parameter gradients given dLoss/dOutput for the batch."""
    gw = [None] * len(model.weights)
    gb = [None] * len(model.weights)
    g = grad_out
    for i in range(len(model.weights) - 1, -1, -1):
        gw[i] = acts[i].T @ g
        gb[i] = g.sum(axis=0)
        if i:
            g = g @ model.weights[i].T
            g *= acts[i] > 0
    return gw, gb


def _l1_grad(pred, target):
    return np.sign(pred - target) / pred.size


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 500
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValidationError("learning_rate must be >= 0")
        if self.batch_size < 1 or self.patience < 1 or self.max_epochs < 1:
            raise ValidationError("batch_size, patience and max_epochs must be >= 1")


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = 0

    @property
    def best_val_loss(self):
        return self.val_loss[self.best_epoch - 1] if self.best_epoch else float("nan")

    @property
    def epochs(self):
        return len(self.train_loss)


def train(model, inputs, targets, cfg, validation=None, log=None):
    """Mini-batch SGD on the L1 loss with early stopping.

    ``validation`` is an optional ``(inputs, targets)`` pair; without it the
    epoch training loss drives early stopping. The model with the lowest
    validation loss is returned together with the per-epoch history. The
    input model is not modified.
    """
    dtype = model.dtype
    X = np.ascontiguousarray(inputs, dtype=dtype)
    Y = np.ascontiguousarray(targets, dtype=dtype)
    if Y.ndim == 1:
        Y = Y[:, None]
    sizes = model.layer_sizes
    if X.ndim != 2 or X.shape[1] != sizes[0] or Y.shape[1] != sizes[-1] or X.shape[0] != Y.shape[0]:
        raise ValidationError(
            f"data shapes {X.shape} -> {Y.shape} do not fit model sizes {sizes}")
    if validation is not None:
        Xv = np.ascontiguousarray(validation[0], dtype=dtype)
        Yv = np.ascontiguousarray(validation[1], dtype=dtype).reshape(Xv.shape[0], -1)
    rng = np.random.default_rng(cfg.seed)
    lr = dtype.type(cfg.learning_rate)
    net = model.copy()
    best = net.copy()
    hist = TrainHistory()
    best_loss = np.inf
    stale = 0
    n = X.shape[0]
    bs = cfg.batch_size
    for epoch in range(1, cfg.max_epochs + 1):
        perm = rng.permutation(n)
        total = 0.0
        for s in range(0, n, bs):
            sel = perm[s:s + bs]
            xb, yb = X[sel], Y[sel]
            acts = _activations(net, xb)
            diff = acts[-1] - yb
            total += float(np.abs(diff).sum(dtype=np.float64))
            gw, gb = _backward(net, acts, np.sign(diff) / dtype.type(diff.size))
            for w, b, dw, db in zip(net.weights, net.biases, gw, gb):
                w -= lr * dw
                b -= lr * db
        tr = total / Y.size
        va = l1_loss(forward(net, Xv), Yv) if validation is not None else tr
        if not (np.isfinite(tr) and np.isfinite(va)):
            raise TrainingDiverged(epoch)
        hist.train_loss.append(tr)
        hist.val_loss.append(va)
        if log is not None:
            log(epoch, tr, va)
        if va < best_loss:
            best_loss = va
            best = net.copy()
            hist.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return best, hist


def _pattern(model, x, target):
    acts = _activations(model, x[None, :])
    return tuple((a > 0).tobytes() for a in acts[1:-1]) + (np.sign(acts[-1][0] - target).tobytes(),)


def grad_check(model, x, target, epsilon=1e-5):
    """Max relative error between backprop and central finite differences.

    Works on a float64 copy of ``model``. Parameters whose ±epsilon
    perturbation flips a ReLU or the sign of an output residual (a kink of
    the loss) are skipped, as are all parameters when a residual is exactly
    zero.
    """
    net = model.astype(np.float64)
    x = np.asarray(x, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    acts = _activations(net, x[None, :])
    resid = acts[-1][0] - target
    if np.any(resid == 0):
        return 0.0
    gw, gb = _backward(net, acts, _l1_grad(acts[-1], target[None, :]))
    base = _pattern(net, x, target)
    worst = 0.0
    for param, grad in zip(net.parameters(), [g for pair in zip(gw, gb) for g in pair]):
        flat = param.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up_pat = _pattern(net, x, target)
            up = l1_loss(forward(net, x), target)
            flat[i] = orig - epsilon
            dn_pat = _pattern(net, x, target)
            dn = l1_loss(forward(net, x), target)
            flat[i] = orig
            if up_pat != base or dn_pat != base:
                continue
            num = (up - dn) / (2 * epsilon)
            ana = gflat[i]
            scale = max(abs(num), abs(ana))
            if scale == 0.0:
                continue
            worst = max(worst, abs(num - ana) / scale)
    return worst


MODEL_MAGIC = b"KNNDMLP\x00"
MODEL_VERSION = 1


def save_model(model, path, meta=None, arrays=None):
    """Write layer sizes and float32 parameters, plus caller metadata."""
    from .binio import write_container

    payload = {}
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        payload[f"W{i}"] = w.astype("<f4")
        payload[f"b{i}"] = b.astype("<f4")
    for k, v in (arrays or {}).items():
        payload[f"x_{k}"] = v
    full_meta = {"layer_sizes": model.layer_sizes, "extra": meta or {}}
    write_container(path, MODEL_MAGIC, MODEL_VERSION, full_meta, payload)


def load_model(path):
    """Inverse of :func:`save_model`; returns ``(model, meta, arrays)``."""
    from .binio import read_container

    meta, arrs = read_container(path, MODEL_MAGIC, MODEL_VERSION)
    n_layers = len(meta["layer_sizes"]) - 1
    model = MlpModel([arrs[f"W{i}"] for i in range(n_layers)], [arrs[f"b{i}"] for i in range(n_layers)])
    extra = {k[2:]: v for k, v in arrs.items() if k.startswith("x_")}
    return model, meta["extra"], extra
