"""ConvNet baseline and dynamic-routing CapsNet on top of :mod:`capsadv.tensor`.

Both models take images of shape (B, H, W) in [0, 1] and return logits
``Z(x)`` of shape (B, 10). For the ConvNet ``F = softmax(Z)``; for the
CapsNet ``F`` is the vector of class-capsule lengths and
``Z = arctanh(2 F - 1)`` after clamping ``F`` away from 0 and 1.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

log = logging.getLogger(__name__)

NUM_CLASSES = 10
M_PLUS = 0.9
M_MINUS = 0.1
LAMBDA_DOWN = 0.5
RECON_WEIGHT = 0.0005
LOGIT_CLAMP = 1e-6


class TrainingDiverged(RuntimeError):
    pass


class UntrainedModelError(RuntimeError):
    pass


# capsule primitives ------------------------------------------------------------

def squash(s, axis: int = -1):
    """Scale each capsule vector to length |s|^2 / (1 + |s|^2), keeping its direction.

    Accepts a Tensor (graph-building) or a plain array.
    """
    if isinstance(s, Tensor):
        n = T.norm(s, axis=axis, keepdims=True)
        return s * (n / (1.0 + n * n))
    s = np.asarray(s, dtype=np.float64)
    n = np.sqrt(np.sum(s * s, axis=axis, keepdims=True))
    return s * (n / (1.0 + n * n))


def dynamic_routing(u_hat: Tensor, iterations: int = 3, trace: list | None = None) -> Tensor:
    """Route predictions ``u_hat`` (B, I, J, D) to J output capsules (B, J, D).

    If ``trace`` is a list, the coupling coefficients (B, I, J) used in each
    iteration are appended to it.
    """
    if iterations < 1:
        raise ValueError("routing needs at least one iteration")
    u_hat = u_hat if isinstance(u_hat, Tensor) else Tensor(u_hat)
    B, I, J, D = u_hat.shape
    # (B, J, I, D) so the weighted sums and agreements become batched matmuls
    u_t = T.transpose(u_hat, (0, 2, 1, 3))
    b = Tensor(np.zeros((B, J, 1, I)))
    v = None
    for it in range(iterations):
        c = T.softmax(b, axis=1)
        if trace is not None:
            trace.append(c.data.reshape(B, J, I).transpose(0, 2, 1).copy())
        v = squash(T.reshape(c @ u_t, (B, J, D)))
        if it < iterations - 1:
            agreement = u_t @ T.reshape(v, (B, J, D, 1))
            b = b + T.reshape(agreement, (B, J, 1, I))
    return v


def capsule_logits(lengths, eps: float = LOGIT_CLAMP):
    """Map capsule lengths in [0, 1] to logits via arctanh(2F - 1)."""
    if isinstance(lengths, Tensor):
        return T.arctanh(2.0 * T.clamp(lengths, eps, 1.0 - eps) - 1.0)
    return np.arctanh(2.0 * np.clip(lengths, eps, 1.0 - eps) - 1.0)


def margin_loss(lengths, labels, m_plus=M_PLUS, m_minus=M_MINUS, lam=LAMBDA_DOWN):
    """Per-sample margin loss summed over classes, averaged over the batch.

    ``lengths`` is (B, K) or (K,); ``labels`` is an int or an int array of length B.
    """
    lengths = lengths if isinstance(lengths, Tensor) else Tensor(lengths)
    single = lengths.ndim == 1
    if single:
        lengths = T.reshape(lengths, (1, -1))
    labels = np.atleast_1d(np.asarray(labels))
    K = lengths.shape[1]
    if labels.shape[0] != lengths.shape[0] or not np.issubdtype(labels.dtype, np.integer) \
            or labels.min() < 0 or labels.max() >= K:
        raise ValueError(f"invalid label(s) {labels.tolist()} for {K} classes")
    onehot = np.zeros(lengths.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    up = T.relu(m_plus - lengths) ** 2
    down = T.relu(lengths - m_minus) ** 2
    per = T.tsum(onehot * up + lam * (1.0 - onehot) * down, axis=1)
    return T.mean(per)


def reconstruction_loss(x, recon, weight: float = RECON_WEIGHT):
    """``weight`` times the summed squared pixel error, averaged over the batch."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    recon = recon if isinstance(recon, Tensor) else Tensor(recon)
    if x.ndim == 2:
        x, recon = T.reshape(x, (1, -1)), T.reshape(recon, (1, -1))
    diff = T.reshape(recon, (recon.shape[0], -1)) - T.reshape(x, (x.shape[0], -1))
    return weight * T.mean(T.tsum(diff * diff, axis=1))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    labels = np.atleast_1d(np.asarray(labels))
    lp = T.log_softmax(logits, axis=1)
    return -T.mean(lp[np.arange(len(labels)), labels])


# initialisation ----------------------------------------------------------------

def truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


# base classifier -----------------------------------------------------------------

class Classifier:
    """Common contract: logits Z(x), probabilities F(x), labels C(x).

    ``forward`` builds a differentiable graph for an input Tensor; the numpy
    helpers run in evaluation mode on (B, H, W) or (H, W) arrays.
    """

    kind = "base"
    eval_batch = 250

    def __init__(self, hyper: dict, seed: int = 0):
        self.hyper = dict(hyper)
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.trained = False
        self._init(np.random.default_rng(seed))

    def _init(self, rng):
        raise NotImplementedError

    # graph-building passes
    def forward(self, x: Tensor, train: bool = False, rng=None, params=None) -> Tensor:
        """Return logits Z for x of shape (B, H, W)."""
        return self._forward(x, train, rng, params)[0]

    def _forward(self, x, train, rng, params):
        raise NotImplementedError

    def probs_from_logits(self, z: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def classification_loss(self, x: Tensor, labels, params=None) -> Tensor:
        """Training loss without regularisers, evaluated in inference mode."""
        raise NotImplementedError

    def training_loss(self, x: Tensor, labels, rng, params) -> tuple[Tensor, Tensor]:
        raise NotImplementedError

    # numpy conveniences
    def logits(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 2
        if single:
            x = x[None]
        out = [self.forward(Tensor(x[i:i + self.eval_batch])).data
               for i in range(0, len(x), self.eval_batch)]
        z = np.concatenate(out, axis=0) if out else np.zeros((0, NUM_CLASSES))
        return z[0] if single else z

    def probs(self, x) -> np.ndarray:
        return self.probs_from_logits(self.logits(x))

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.logits(x), axis=-1)

    def accuracy(self, images, labels) -> float:
        return float(np.mean(self.predict(images) == np.asarray(labels)))

    def input_gradient(self, x, objective) -> tuple[np.ndarray, np.ndarray]:
        """Return (logits, d objective(Z)/dx) for a batch; ``objective`` maps Z to a scalar Tensor."""
        xt = Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
        z = self.forward(xt)
        objective(z).backward()
        return z.data, xt.grad

    def logit_jacobian(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Logits (B, K) and their input gradients (B, K, H, W)."""
        x = np.asarray(x, dtype=np.float64)
        xt = Tensor(x, requires_grad=True)
        z = self.forward(xt)
        K = z.shape[1]
        jac = np.empty((x.shape[0], K) + x.shape[1:])
        for k in range(K):
            xt.grad = None
            T.tsum(z[:, k]).backward(retain_graph=k < K - 1)
            jac[:, k] = xt.grad
        return z.data, jac

    def require_trained(self):
        if not self.trained:
            raise UntrainedModelError(f"{self.kind} model has not been trained or loaded")


def _bn(h: Tensor, prefix: str, p: dict, buffers: dict, train: bool, momentum=0.1, eps=1e-5) -> Tensor:
    shape = (1, -1, 1, 1) if h.ndim == 4 else (1, -1)
    axes = (0, 2, 3) if h.ndim == 4 else (0,)
    gamma = T.reshape(p[prefix + ".gamma"], shape)
    beta = T.reshape(p[prefix + ".beta"], shape)
    if train:
        mu = T.mean(h, axis=axes, keepdims=True)
        centred = h - mu
        var = T.mean(centred * centred, axis=axes, keepdims=True)
        xhat = centred / T.sqrt(var + eps)
        rm, rv = buffers[prefix + ".mean"], buffers[prefix + ".var"]
        rm *= 1 - momentum
        rm += momentum * mu.data.reshape(-1)
        rv *= 1 - momentum
        rv += momentum * var.data.reshape(-1)
    else:
        rm = buffers[prefix + ".mean"].reshape(shape)
        rv = buffers[prefix + ".var"].reshape(shape)
        xhat = (h - rm) / np.sqrt(rv + eps)
    return xhat * gamma + beta


# ConvNet -------------------------------------------------------------------------

@dataclass
class ConvNetConfig:
    channels: tuple = (32, 64)
    kernel: int = 5
    hidden: int = 128
    dropout: float = 0.5
    image_size: int = 28


class ConvNet(Classifier):
    """2 x (conv + batch-norm + relu + 2x2 max-pool), dense + dropout, dense 10."""

    kind = "convnet"

    def __init__(self, config: ConvNetConfig | None = None, seed: int = 0):
        self.config = config or ConvNetConfig()
        super().__init__(asdict(self.config), seed)

    def _init(self, rng):
        cfg = self.config
        c_in, size = 1, cfg.image_size
        for i, c in enumerate(cfg.channels, 1):
            self.params[f"conv{i}.w"] = truncated_normal(rng, (c, c_in, cfg.kernel, cfg.kernel), 0.05)
            self.params[f"conv{i}.b"] = np.zeros(c)
            self.params[f"bn{i}.gamma"] = np.ones(c)
            self.params[f"bn{i}.beta"] = np.zeros(c)
            self.buffers[f"bn{i}.mean"] = np.zeros(c)
            self.buffers[f"bn{i}.var"] = np.ones(c)
            c_in, size = c, (size - cfg.kernel + 1) // 2
        flat = c_in * size * size
        self.params["fc1.w"] = truncated_normal(rng, (flat, cfg.hidden), np.sqrt(2.0 / flat))
        self.params["fc1.b"] = np.zeros(cfg.hidden)
        self.params["fc2.w"] = truncated_normal(rng, (cfg.hidden, NUM_CLASSES), np.sqrt(1.0 / cfg.hidden))
        self.params["fc2.b"] = np.zeros(NUM_CLASSES)

    def _forward(self, x, train, rng, params):
        p = params if params is not None else {k: Tensor(v) for k, v in self.params.items()}
        B = x.shape[0]
        h = T.reshape(x, (B, 1) + x.shape[1:])
        for i in range(1, len(self.config.channels) + 1):
            h = T.conv2d(h, p[f"conv{i}.w"]) + T.reshape(p[f"conv{i}.b"], (1, -1, 1, 1))
            h = _bn(h, f"bn{i}", p, self.buffers, train)
            h = T.maxpool2d(T.relu(h), 2)
        h = T.reshape(h, (B, -1))
        h = T.relu(h @ p["fc1.w"] + p["fc1.b"])
        if train and self.config.dropout > 0:
            keep = 1.0 - self.config.dropout
            h = h * ((rng.random(h.shape) < keep) / keep)
        return h @ p["fc2.w"] + p["fc2.b"], None

    def probs_from_logits(self, z):
        z = np.asarray(z)
        e = np.exp(z - z.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)

    def classification_loss(self, x, labels, params=None):
        return cross_entropy(self.forward(x, params=params), labels)

    def training_loss(self, x, labels, rng, params):
        z, _ = self._forward(x, True, rng, params)
        return cross_entropy(z, labels), z


# CapsNet -------------------------------------------------------------------------

@dataclass
class CapsNetConfig:
    """``conv_channels``/``conv_kernels`` describe the plain conv stem."""

    conv_channels: tuple = (64,)
    conv_kernels: tuple = (9,)
    primary_channels: int = 32
    primary_dim: int = 8
    primary_kernel: int = 9
    primary_stride: int = 2
    class_dim: int = 16
    routing_iterations: int = 3
    none_of_the_above: bool = False
    decoder_hidden: tuple = (512, 1024)
    recon_weight: float = RECON_WEIGHT
    image_size: int = 28

    @classmethod
    def mnist(cls, **kw):
        return cls(**kw)

    @classmethod
    def fashion(cls, **kw):
        return cls(conv_channels=(32, 32), conv_kernels=(3, 3), **kw)

    @classmethod
    def desk(cls, **kw):
        """Reduced primary-capsule width so attacks stay affordable on one CPU core."""
        base = dict(primary_channels=8, decoder_hidden=(256, 512))
        base.update(kw)
        return cls(**base)


class CapsNet(Classifier):
    kind = "capsnet"

    def __init__(self, config: CapsNetConfig | None = None, seed: int = 0):
        self.config = config or CapsNetConfig()
        self.last_routing: list = []
        super().__init__(asdict(self.config), seed)

    @property
    def grid(self) -> int:
        cfg = self.config
        size = cfg.image_size
        for k in cfg.conv_kernels:
            size = size - k + 1
        return (size - cfg.primary_kernel) // cfg.primary_stride + 1

    @property
    def n_primary(self) -> int:
        return self.config.primary_channels * self.grid ** 2

    @property
    def n_out(self) -> int:
        return NUM_CLASSES + int(self.config.none_of_the_above)

    def _init(self, rng):
        cfg = self.config
        c_in = 1
        for i, (c, k) in enumerate(zip(cfg.conv_channels, cfg.conv_kernels), 1):
            self.params[f"conv{i}.w"] = truncated_normal(rng, (c, c_in, k, k), 0.05)
            self.params[f"conv{i}.b"] = np.zeros(c)
            c_in = c
        pc = cfg.primary_channels * cfg.primary_dim
        self.params["primary.w"] = truncated_normal(rng, (pc, c_in, cfg.primary_kernel, cfg.primary_kernel), 0.05)
        self.params["primary.b"] = np.zeros(pc)
        self.params["caps.w"] = truncated_normal(
            rng, (self.n_primary, cfg.primary_dim, self.n_out * cfg.class_dim), 0.05)
        dims = (cfg.class_dim,) + tuple(cfg.decoder_hidden) + (cfg.image_size ** 2,)
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]), 1):
            self.params[f"dec{i}.w"] = truncated_normal(rng, (a, b), np.sqrt(2.0 / a))
            self.params[f"dec{i}.b"] = np.zeros(b)

    def class_capsules(self, x: Tensor, params=None, trace=None) -> Tensor:
        """Class capsules (B, J, class_dim) for images (B, H, W)."""
        cfg = self.config
        p = params if params is not None else {k: Tensor(v) for k, v in self.params.items()}
        B = x.shape[0]
        h = T.reshape(x, (B, 1) + x.shape[1:])
        for i in range(1, len(cfg.conv_channels) + 1):
            h = T.relu(T.conv2d(h, p[f"conv{i}.w"]) + T.reshape(p[f"conv{i}.b"], (1, -1, 1, 1)))
        h = T.conv2d(h, p["primary.w"], stride=cfg.primary_stride) + T.reshape(p["primary.b"], (1, -1, 1, 1))
        g = self.grid
        # (B, caps, dim, g, g) -> (B, caps*g*g, dim)
        u = T.reshape(h, (B, cfg.primary_channels, cfg.primary_dim, g, g))
        u = T.reshape(T.transpose(u, (0, 1, 3, 4, 2)), (B, self.n_primary, cfg.primary_dim))
        u = squash(u)
        # per-input-capsule transforms as one batched matmul over I
        u_hat = T.transpose(u, (1, 0, 2)) @ p["caps.w"]
        u_hat = T.reshape(u_hat, (self.n_primary, B, self.n_out, cfg.class_dim))
        u_hat = T.transpose(u_hat, (1, 0, 2, 3))
        return dynamic_routing(u_hat, cfg.routing_iterations, trace)

    def _forward(self, x, train, rng, params):
        trace = [] if not train else None
        v = self.class_capsules(x, params, trace)
        if trace is not None:
            self.last_routing = trace
        lengths = T.norm(v, axis=-1)
        if self.config.none_of_the_above:
            lengths = lengths[:, :NUM_CLASSES]
        return capsule_logits(lengths), (v, lengths)

    def capsule_lengths(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return np.concatenate([self._forward(Tensor(x[i:i + self.eval_batch]), False, None, None)[1][1].data
                               for i in range(0, len(x), self.eval_batch)])

    def probs_from_logits(self, z):
        return (np.tanh(np.asarray(z)) + 1.0) / 2.0

    def decode(self, capsule: Tensor, params=None) -> Tensor:
        p = params if params is not None else {k: Tensor(v) for k, v in self.params.items()}
        n_layers = len(self.config.decoder_hidden) + 1
        h = capsule
        for i in range(1, n_layers + 1):
            h = h @ p[f"dec{i}.w"] + p[f"dec{i}.b"]
            h = T.relu(h) if i < n_layers else T.sigmoid(h)
        return h

    def classification_loss(self, x, labels, params=None):
        _, (_, lengths) = self._forward(x, False, None, params)
        return margin_loss(lengths, labels)

    def training_loss(self, x, labels, rng, params):
        z, (v, lengths) = self._forward(x, True, rng, params)
        labels = np.asarray(labels)
        B = x.shape[0]
        true_caps = v[np.arange(B), labels]
        recon = self.decode(true_caps, params)
        loss = margin_loss(lengths, labels) + reconstruction_loss(
            T.reshape(x, (B, -1)), recon, self.config.recon_weight)
        return loss, z


# training --------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 15
    batch_size: int = 128
    lr: float = 1e-3
    seed: int = 0
    eval_every_epoch: bool = True


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    train_accuracy: list = field(default_factory=list)
    test_accuracy: list = field(default_factory=list)


def train(model: Classifier, train_set, config: TrainConfig, test_set=None, progress=None) -> TrainHistory:
    """Mini-batch Adam training. Returns per-epoch loss and accuracies."""
    images, labels = train_set.images, train_set.labels
    if len(images) == 0:
        raise ValueError("empty training set")
    if config.epochs < 1:
        raise ValueError("epochs must be >= 1")
    rng = np.random.default_rng(config.seed)
    state = T.AdamState(lr=config.lr)
    history = TrainHistory()
    n = len(images)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total, correct = 0.0, 0
        for bi, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            ptens = {k: Tensor(v, requires_grad=True) for k, v in model.params.items()}
            loss, z = model.training_loss(Tensor(images[idx]), labels[idx], rng, ptens)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(f"{model.kind}: non-finite loss {loss.item()} at epoch {epoch}, batch {bi}")
            loss.backward()
            grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in ptens.items()}
            T.adam_step(model.params, grads, state)
            total += loss.item() * len(idx)
            correct += int(np.sum(np.argmax(z.data, axis=1) == labels[idx]))
        history.train_loss.append(total / n)
        history.train_accuracy.append(correct / n)
        if test_set is not None and config.eval_every_epoch:
            history.test_accuracy.append(model.accuracy(test_set.images, test_set.labels))
        msg = (f"{model.kind} epoch {epoch + 1}/{config.epochs} loss={history.train_loss[-1]:.4f} "
               f"train_acc={history.train_accuracy[-1]:.4f}"
               + (f" test_acc={history.test_accuracy[-1]:.4f}" if history.test_accuracy else ""))
        log.info(msg)
        if progress is not None:
            progress(msg)
    model.trained = True
    return history


# checkpoints ----------------------------------------------------------------------

MAGIC = b"CFML1"


def _model_from_header(header: dict) -> Classifier:
    kind, hyper = header["kind"], header["hyper"]
    hyper = {k: tuple(v) if isinstance(v, list) else v for k, v in hyper.items()}
    if kind == "convnet":
        return ConvNet(ConvNetConfig(**hyper))
    if kind == "capsnet":
        return CapsNet(CapsNetConfig(**hyper))
    raise ValueError(f"unknown model kind {kind!r}")


def save_checkpoint(model: Classifier, path) -> None:
    """Write the binary checkpoint; see docs in README for the layout."""
    header = json.dumps({"kind": model.kind, "hyper": model.hyper, "trained": model.trained},
                        sort_keys=True).encode()
    blocks = sorted(("param/" + k, v) for k, v in model.params.items())
    blocks += sorted(("buffer/" + k, v) for k, v in model.buffers.items())
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(blocks)))
        for name, arr in blocks:
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> Classifier:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:5] != MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {buf[:5]!r}")
    pos = 5

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise ValueError(f"{path}: truncated checkpoint at byte {pos}")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    (hlen,) = take("<I")
    header = json.loads(buf[pos:pos + hlen].decode())
    pos += hlen
    model = _model_from_header(header)
    (count,) = take("<I")
    for _ in range(count):
        (nlen,) = take("<H")
        name = buf[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I")
        n = int(np.prod(shape)) if ndim else 1
        if pos + 8 * n > len(buf):
            raise ValueError(f"{path}: truncated block {name!r} at byte {pos}")
        arr = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
        group, key = name.split("/", 1)
        target = model.params if group == "param" else model.buffers
        if key not in target or target[key].shape != arr.shape:
            raise ValueError(f"{path}: unexpected block {name!r} with shape {shape}")
        target[key] = arr
    model.trained = bool(header.get("trained", False))
    return model


def build_model(kind: str, dataset: str = "mnist", preset: str = "desk", seed: int = 0) -> Classifier:
    if kind == "convnet":
        return ConvNet(ConvNetConfig(), seed=seed)
    if kind == "capsnet":
        if dataset == "fashion":
            cfg = CapsNetConfig.fashion(**(dict(primary_channels=8, decoder_hidden=(256, 512))
                                         if preset == "desk" else {}))
        else:
            cfg = CapsNetConfig.desk() if preset == "desk" else CapsNetConfig.mnist()
        return CapsNet(cfg, seed=seed)
    raise ValueError(f"unknown model kind {kind!r}")


class AffineModel(Classifier):
    """Z(x) = A vec(x) + b; used as an analytic oracle for the gradient attacks."""

    kind = "affine"

    def __init__(self, A, b, image_shape):
        self.image_shape = tuple(image_shape)
        A, b = np.asarray(A, dtype=np.float64), np.asarray(b, dtype=np.float64)
        super().__init__({"image_shape": list(self.image_shape), "classes": int(A.shape[0])})
        self.params = {"A": A, "b": b}
        self.trained = True

    def _init(self, rng):
        pass

    def _forward(self, x, train, rng, params):
        p = params if params is not None else {k: Tensor(v) for k, v in self.params.items()}
        flat = T.reshape(x, (x.shape[0], -1))
        return flat @ T.transpose(p["A"]) + p["b"], None

    def probs_from_logits(self, z):
        z = np.asarray(z)
        e = np.exp(z - z.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)

    def classification_loss(self, x, labels, params=None):
        return cross_entropy(self.forward(x, params=params), labels)
