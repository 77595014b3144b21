"""Multi-layer perceptron with leaky-ReLU activations, trained by AdaMax.

The network computes ``N(x) = s_out(W_L s(... s(W_1 x + b_1) ...) + b_L)``
with ``W_l`` of shape ``(d_l, d_{l-1})``. Inputs may be single vectors or
batches stored row-wise.
"""

import json
import logging
import struct
from dataclasses import asdict, dataclass, replace

import numpy as np

from .errors import DatasetError, TrainingDivergedError

log = logging.getLogger(__name__)

DEFAULT_SLOPE = 0.01
BUNDLE_MAGIC = b"PODNET-NET"
BUNDLE_VERSION = 1

OBSERVATION = "observation"
SIMULATION = "simulation"


def leaky_relu(z, slope):
    return np.where(z > 0, z, slope * z)


def leaky_relu_grad(z, slope):
    # the subgradient at 0 is taken from the negative side
    return np.where(z > 0, 1.0, slope).astype(z.dtype, copy=False)


@dataclass(eq=False)
class Normalizer:
    """Per-feature standardization statistics."""

    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray

    @classmethod
    def fit(cls, X, Y):
        def stats(A):
            mu = A.mean(axis=0)
            sd = A.std(axis=0)
            return mu, np.where(sd > 1e-12 * np.maximum(1.0, np.abs(mu)), sd, 1.0)
        xm, xs = stats(np.asarray(X, float))
        ym, ys = stats(np.asarray(Y, float))
        return cls(xm, xs, ym, ys)

    def to_json(self):
        return {k: np.asarray(v, float).tolist() for k, v in asdict(self).items()}

    @classmethod
    def from_json(cls, d):
        return cls(**{k: np.asarray(v, float) for k, v in d.items()})


@dataclass(eq=False)
class Network:
    dims: list
    weights: list
    biases: list
    hidden_slope: float = DEFAULT_SLOPE
    output_activation: str = "linear"
    normalizer: Normalizer = None
    seed: int = None

    @property
    def n_layers(self):
        return len(self.weights)

    @property
    def n_params(self):
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    @property
    def params(self):
        """Flat list ``[W_1, b_1, ..., W_L, b_L]`` sharing storage with the net."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def with_params(self, params):
        return replace(self, weights=list(params[0::2]), biases=list(params[1::2]))

    def copy(self):
        return replace(self, weights=[W.copy() for W in self.weights],
                       biases=[b.copy() for b in self.biases])


def init_network(dims, seed=None, hidden_slope=DEFAULT_SLOPE, output_activation="linear",
                 dtype=np.float64):
    """He-uniform weights scaled for leaky ReLU, zero biases."""
    dims = [int(d) for d in dims]
    if len(dims) < 2 or min(dims) < 1:
        raise ValueError(f"invalid layer dims {dims}")
    if output_activation not in ("linear", "leaky_relu"):
        raise ValueError(f"unknown output activation {output_activation!r}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / ((1.0 + hidden_slope ** 2) * fan_in))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)).astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    return Network(dims, weights, biases, hidden_slope, output_activation, None, seed)


def _forward_trace(net, X):
    zs, acts = [], [X]
    a = X
    L = net.n_layers
    for l, (W, b) in enumerate(zip(net.weights, net.biases)):
        z = a @ W.T + b
        zs.append(z)
        if l < L - 1 or net.output_activation == "leaky_relu":
            a = leaky_relu(z, net.hidden_slope)
        else:
            a = z
        acts.append(a)
    return zs, acts


def forward(net, x):
    """Raw network output for a vector or a row-wise batch."""
    x = np.asarray(x, dtype=net.weights[0].dtype)
    if x.shape[-1] != net.dims[0]:
        raise ValueError(f"input has {x.shape[-1]} features, network expects {net.dims[0]}")
    single = x.ndim == 1
    _, acts = _forward_trace(net, np.atleast_2d(x))
    out = acts[-1]
    return out[0] if single else out


def predict(net, x):
    """Network output in physical units, applying stored normalization."""
    nz = net.normalizer
    if nz is None:
        return forward(net, x)
    x = (np.asarray(x, float) - nz.x_mean) / nz.x_std
    y = forward(net, x)
    return np.asarray(y, float) * nz.y_std + nz.y_mean


# -- losses and gradients --------------------------------------------------

@dataclass(eq=False)
class Dataset:
    """Training pairs with provenance tags."""

    X: np.ndarray
    Y: np.ndarray
    provenance: np.ndarray = None
    run_id: np.ndarray = None
    step: np.ndarray = None

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, float))
        self.Y = np.atleast_2d(np.asarray(self.Y, float))
        if self.X.shape[0] != self.Y.shape[0]:
            raise DatasetError(f"{self.X.shape[0]} inputs but {self.Y.shape[0]} targets")
        if self.provenance is not None:
            self.provenance = np.asarray(self.provenance, dtype=object)
            if self.provenance.shape != (len(self),):
                raise DatasetError("one provenance tag per pair required")

    def __len__(self):
        return self.X.shape[0]

    def subset(self, idx):
        pick = lambda a: None if a is None else a[idx]
        return Dataset(self.X[idx], self.Y[idx], pick(self.provenance),
                       pick(self.run_id), pick(self.step))


def sample_weights(dataset, w1=None, w2=None):
    """Per-pair loss weights: ``1/N`` each, or ``w1`` for observation pairs and ``w2`` for simulation pairs."""
    N = len(dataset)
    if N == 0:
        raise DatasetError("empty dataset")
    if w1 is None:
        return np.full(N, 1.0 / N)
    if dataset.provenance is None:
        raise DatasetError("weighted loss needs provenance tags")
    obs = dataset.provenance == OBSERVATION
    sim = dataset.provenance == SIMULATION
    if not np.all(obs | sim):
        raise DatasetError("provenance tags must be 'observation' or 'simulation'")
    return np.where(obs, float(w1), float(w2))


def _residual_sq(net, dataset):
    r = dataset.Y - predict(net, dataset.X)
    return np.sum(r * r, axis=1)


def loss_standard(net, dataset):
    """Mean squared residual norm over the dataset."""
    if len(dataset) == 0:
        raise DatasetError("empty dataset")
    return float(np.mean(_residual_sq(net, dataset)))


def loss_weighted(net, dataset, w1, w2):
    """``w1 * sum_obs ||r||^2 + w2 * sum_sim ||r||^2``."""
    if not w1 > w2 > 0:
        raise ValueError(f"weighted loss requires w1 > w2 > 0, got {w1}, {w2}")
    return float(sample_weights(dataset, w1, w2) @ _residual_sq(net, dataset))


def gradient(net, X, Y, weights=None):
    """Loss ``sum_j w_j ||y_j - N(x_j)||^2`` and its gradient.

    Works on the raw network (no normalization). ``weights`` defaults to
    ``1/B`` for a batch of ``B`` rows. Returns ``(loss, grads)`` with grads
    ordered like :attr:`Network.params`.
    """
    X = np.atleast_2d(np.asarray(X, dtype=net.weights[0].dtype))
    Y = np.atleast_2d(np.asarray(Y, dtype=net.weights[0].dtype))
    B = X.shape[0]
    if B == 0:
        raise DatasetError("empty batch")
    w = np.full(B, 1.0 / B) if weights is None else np.asarray(weights)
    w = w.astype(X.dtype, copy=False)
    zs, acts = _forward_trace(net, X)
    r = Y - acts[-1]
    loss = float(w @ np.sum(r * r, axis=1))

    L = net.n_layers
    delta = (-2.0 * w)[:, None] * r
    if net.output_activation == "leaky_relu":
        delta = delta * leaky_relu_grad(zs[-1], net.hidden_slope)
    grads = [None] * (2 * L)
    for l in range(L - 1, -1, -1):
        grads[2 * l] = delta.T @ acts[l]
        grads[2 * l + 1] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ net.weights[l]) * leaky_relu_grad(zs[l - 1], net.hidden_slope)
    return loss, grads


# -- optimizer -------------------------------------------------------------

@dataclass(eq=False)
class AdaMaxState:
    m: list
    u: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adamax_step(state, params, grads, lr=0.002, beta1=0.9, beta2=0.999, t=None, eps=1e-8):
    """One AdaMax update, in place on ``params`` and ``state``.

    ``m <- b1 m + (1 - b1) g``, ``u <- max(b2 u, |g|)`` and
    ``p <- p - lr / (1 - b1^t) * m / (u + eps)``. Returns the list of
    applied steps.
    """
    t = state.t + 1 if t is None else t
    if t < 1:
        raise ValueError("step counter starts at 1")
    scale = lr / (1.0 - beta1 ** t)
    steps = []
    for p, g, m, u in zip(params, grads, state.m, state.u):
        m *= beta1
        m += (1.0 - beta1) * g
        np.maximum(beta2 * u, np.abs(g), out=u)
        d = scale * m / (u + eps)
        p -= d
        steps.append(d)
    state.t = t
    return steps


# -- training --------------------------------------------------------------

@dataclass
class TrainingConfig:
    epochs: int = 500
    batch_size: int = 32
    lr: float = 0.002
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    loss: str = "standard"          # or "weighted"
    w1: float = 10.0
    w2: float = 1.0
    seed: int = 0
    normalize: bool = True
    dtype: str = "float64"

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("AdaMax decay rates must lie in (0, 1)")
        if self.loss not in ("standard", "weighted"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.loss == "weighted" and not self.w1 > self.w2 > 0:
            raise ValueError("weighted loss requires w1 > w2 > 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


def training_weights(dataset, config):
    """Per-pair weights summing to one."""
    if config.loss == "standard":
        return sample_weights(dataset)
    w = sample_weights(dataset, config.w1, config.w2)
    return w / w.sum()


def train(net, dataset, config=None):
    """Mini-batch AdaMax on shuffled data.

    Returns ``(trained_net, history)`` where ``history[e]`` is the mean
    batch loss of epoch ``e`` in normalized units. The input network is not
    modified.
    """
    config = config or TrainingConfig()
    net = net.copy()
    if config.epochs == 0:
        return net, []
    if len(dataset) == 0:
        raise DatasetError("empty dataset")
    dtype = np.dtype(config.dtype)
    net = net.with_params([p.astype(dtype) for p in net.params])

    X, Y = dataset.X, dataset.Y
    if config.normalize:
        nz = Normalizer.fit(X, Y)
        X = (X - nz.x_mean) / nz.x_std
        Y = (Y - nz.y_mean) / nz.y_std
        net.normalizer = nz
    X, Y = X.astype(dtype), Y.astype(dtype)
    weights = training_weights(dataset, config)
    N = len(dataset)
    rng = np.random.default_rng(config.seed)
    params = net.params
    state = AdaMaxState.zeros_like(params)
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(N)
        total, nb = 0.0, 0
        for start in range(0, N, config.batch_size):
            idx = order[start:start + config.batch_size]
            # unbiased batch estimate of the full weighted loss
            wb = weights[idx] * (N / idx.size)
            loss, grads = gradient(net, X[idx], Y[idx], wb)
            adamax_step(state, params, grads, config.lr, config.beta1, config.beta2, eps=config.eps)
            total += loss
            nb += 1
        epoch_loss = total / nb
        if not np.isfinite(epoch_loss) or not all(np.all(np.isfinite(p)) for p in params):
            raise TrainingDivergedError(f"training diverged in epoch {epoch}", epoch)
        history.append(epoch_loss)
    return net, history


# -- rollout ---------------------------------------------------------------

def rollout(net, c0, inputs):
    """Compose the one-step map over an input sequence.

    ``inputs`` has one row per step (possibly zero columns). ``net`` is a
    single network or a list with one network per step. Returns the
    trajectory ``(k + 1, m)``.
    """
    c = np.asarray(c0, dtype=float)
    inputs = np.asarray(inputs, dtype=float)
    if inputs.ndim == 1:
        inputs = inputs.reshape(-1, 0) if inputs.size == 0 else inputs[:, None]
    k = inputs.shape[0]
    nets = net if isinstance(net, (list, tuple)) else [net] * k
    if len(nets) != k:
        raise ValueError(f"{len(nets)} networks for {k} steps")
    traj = [c]
    for n in range(k):
        x = np.concatenate([c, inputs[n]])
        if x.size != nets[n].dims[0]:
            raise ValueError(f"step {n}: input has {x.size} features, network expects {nets[n].dims[0]}")
        with np.errstate(over="ignore", invalid="ignore"):
            c = np.asarray(predict(nets[n], x), dtype=float)
        traj.append(c)
    return np.array(traj)


# -- persistence -----------------------------------------------------------

def _header(net):
    return {
        "dims": [int(d) for d in net.dims],
        "hidden_activation": "leaky_relu",
        "hidden_slope": float(net.hidden_slope),
        "output_activation": net.output_activation,
        "normalizer": None if net.normalizer is None else net.normalizer.to_json(),
        "seed": net.seed,
    }


def save_bundle(net, path):
    """Write the binary network bundle.

    Layout: the 10-byte magic ``PODNET-NET``, a little-endian uint32
    version, a uint32 header length ``n``, ``n`` bytes of UTF-8 JSON header,
    then for each layer the weight matrix (row-major) followed by the bias,
    all as little-endian float64.
    """
    head = json.dumps(_header(net), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(BUNDLE_MAGIC)
        fh.write(struct.pack("<II", BUNDLE_VERSION, len(head)))
        fh.write(head)
        for p in net.params:
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def _from_header(head, params):
    nz = head["normalizer"]
    return Network(head["dims"], list(params[0::2]), list(params[1::2]),
                   head["hidden_slope"], head["output_activation"],
                   None if nz is None else Normalizer.from_json(nz), head.get("seed"))


def load_bundle(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(BUNDLE_MAGIC):
        raise ValueError(f"{path}: not a network bundle")
    off = len(BUNDLE_MAGIC)
    version, hlen = struct.unpack_from("<II", raw, off)
    if version != BUNDLE_VERSION:
        raise ValueError(f"{path}: unsupported bundle version {version}")
    off += 8
    head = json.loads(raw[off:off + hlen].decode())
    off += hlen
    data = np.frombuffer(raw, dtype="<f8", offset=off).astype(float)
    dims = head["dims"]
    params, pos = [], 0
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        params.append(data[pos:pos + fan_in * fan_out].reshape(fan_out, fan_in))
        pos += fan_in * fan_out
        params.append(data[pos:pos + fan_out].copy())
        pos += fan_out
    if pos != data.size:
        raise ValueError(f"{path}: parameter block has {data.size} values, expected {pos}")
    return _from_header(head, params)


def to_json(net):
    d = _header(net)
    d["weights"] = [W.tolist() for W in net.weights]
    d["biases"] = [b.tolist() for b in net.biases]
    return d


def from_json(d):
    params = []
    for W, b in zip(d["weights"], d["biases"]):
        params += [np.asarray(W, float), np.asarray(b, float)]
    return _from_header(d, params)
