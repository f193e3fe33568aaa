"""Small fully-connected score network with hand-written reverse mode.

The network maps ``(t, x)`` (or ``(t, x, y)`` when conditioned on an
endpoint) to a d-dimensional score value. Time enters through a sinusoidal
embedding, hidden layers use tanh, and the output layer starts at zero so
an untrained network is the zero score (bridging with it reproduces the
unconditioned process). No ML framework: forward, backward, and the
adaptive-moment update are plain numpy.
"""

from __future__ import annotations

import json

import numpy as np

_CHECKPOINT_VERSION = 1


class ScoreNetwork:
    """MLP score model s(t, x[, y]) with tanh hidden layers.

    Parameters are float64 throughout; ``forward`` is pure and safe for
    concurrent readers. Layer k maps width ``sizes[k]`` to ``sizes[k+1]``
    via ``a @ W_k + b_k``.
    """

    def __init__(self, dim: int, hidden=(32, 32, 32, 32), time_features: int = 8,
                 horizon: float = 1.0, conditioned: bool = False, seed: int = 0):
        if dim < 1:
            raise ValueError(f"dim must be >= 1, got {dim}")
        if time_features < 1:
            raise ValueError(f"time_features must be >= 1, got {time_features}")
        if horizon <= 0:
            raise ValueError(f"horizon must be positive, got {horizon}")
        self.dim = int(dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.time_features = int(time_features)
        self.horizon = float(horizon)
        self.conditioned = bool(conditioned)
        self.seed = int(seed)
        self.input_dim = 2 * self.time_features + self.dim * (2 if conditioned else 1)
        self.sizes = [self.input_dim, *self.hidden, self.dim]

        gen = np.random.default_rng(seed)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        last = len(self.sizes) - 2
        for k, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            if k == last:
                W = np.zeros((fan_in, fan_out))
            else:
                W = gen.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
            self.weights.append(W)
            self.biases.append(np.zeros(fan_out))
        # powers-of-two frequencies scaled to the training horizon
        self._freqs = (2.0 ** np.arange(self.time_features)) * np.pi / self.horizon

    # ------------------------------------------------------------------
    # input assembly
    # ------------------------------------------------------------------

    def time_embedding(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        ang = t[:, None] * self._freqs[None, :]
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)

    def assemble(self, t, x, y=None) -> np.ndarray:
        """Build the (B, input_dim) network input from t, x (and y)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        B = x.shape[0]
        if x.shape[1] != self.dim:
            raise ValueError(f"x has dimension {x.shape[1]}, network expects {self.dim}")
        t = np.asarray(t, dtype=np.float64)
        if t.ndim == 0:
            t = np.full(B, float(t))
        if t.shape != (B,):
            raise ValueError(f"t must be scalar or shape ({B},), got {t.shape}")
        return self.assemble_embedded(self.time_embedding(t), x, y)

    def assemble_embedded(self, emb, x, y=None) -> np.ndarray:
        """Like assemble, with the (B, 2K) time embedding precomputed."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        B = x.shape[0]
        cols = [emb, x]
        if self.conditioned:
            if y is None:
                raise ValueError("conditioned network needs an endpoint y")
            y = np.asarray(y, dtype=np.float64)
            if y.ndim == 1:
                y = np.broadcast_to(y, (B, self.dim))
            if y.shape != (B, self.dim):
                raise ValueError(f"y must have shape ({B}, {self.dim}), got {y.shape}")
            cols.append(y)
        elif y is not None:
            raise ValueError("network was built unconditioned; y must be None")
        return np.concatenate(cols, axis=1)

    # ------------------------------------------------------------------
    # forward / backward
    # ------------------------------------------------------------------

    def apply(self, inputs: np.ndarray) -> np.ndarray:
        a = inputs
        n_layers = len(self.weights)
        for k in range(n_layers - 1):
            h = a @ self.weights[k]
            h += self.biases[k]
            a = np.tanh(h, out=h)
        out = a @ self.weights[-1]
        out += self.biases[-1]
        return out

    def make_workspace(self, batch_size: int) -> "NetWorkspace":
        """Reusable buffers for repeated same-size apply_cached/backward calls."""
        return NetWorkspace(self, batch_size)

    def apply_cached(self, inputs: np.ndarray, work: "NetWorkspace | None" = None):
        """Forward pass keeping activations for a later backward call.

        With ``work`` the activations live in the workspace buffers, so a
        later same-workspace call overwrites them; run backward first.
        """
        acts = [inputs]
        a = inputs
        n_layers = len(self.weights)
        for k in range(n_layers - 1):
            if work is not None:
                h = work.acts[k]
                np.matmul(a, self.weights[k], out=h)
            else:
                h = a @ self.weights[k]
            h += self.biases[k]
            a = np.tanh(h, out=h)
            acts.append(a)
        if work is not None:
            out = work.out
            np.matmul(a, self.weights[-1], out=out)
        else:
            out = a @ self.weights[-1]
        out += self.biases[-1]
        return out, acts

    def forward(self, t, x, y=None) -> np.ndarray:
        """Score value at (t, x[, y]); accepts a single state or a batch."""
        x_arr = np.asarray(x, dtype=np.float64)
        single = x_arr.ndim == 1
        out = self.apply(self.assemble(t, x_arr, y))
        return out[0] if single else out

    def backward(self, inputs: np.ndarray, upstream: np.ndarray,
                 acts=None, work: "NetWorkspace | None" = None
                 ) -> dict[str, np.ndarray]:
        """Parameter gradients of sum(upstream * output) for the batch."""
        if acts is None:
            _, acts = self.apply_cached(inputs, work=work)
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape != (inputs.shape[0], self.dim):
            raise ValueError(
                f"upstream must have shape ({inputs.shape[0]}, {self.dim}), "
                f"got {upstream.shape}")
        grads: dict[str, np.ndarray] = {}
        delta = upstream
        for k in range(len(self.weights) - 1, -1, -1):
            grads[f"W{k}"] = acts[k].T @ delta
            grads[f"b{k}"] = delta.sum(axis=0)
            if k > 0:
                a = acts[k]
                width = self.weights[k].shape[0]
                if work is not None:
                    gate = work.gate[:, :width]
                    np.multiply(a, a, out=gate)
                    np.subtract(1.0, gate, out=gate)
                    nxt = work.delta[k % 2][:, :width]
                    np.matmul(delta, self.weights[k].T, out=nxt)
                    np.multiply(nxt, gate, out=nxt)
                    delta = nxt
                else:
                    gate = np.multiply(a, a)
                    np.subtract(1.0, gate, out=gate)
                    delta = delta @ self.weights[k].T
                    delta *= gate
        return grads

    # ------------------------------------------------------------------
    # parameters and serialization
    # ------------------------------------------------------------------

    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{k}"] = W
            out[f"b{k}"] = b
        return out

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def flat_params(self) -> np.ndarray:
        return np.concatenate([self.weights[k].ravel() if kind == 0
                               else self.biases[k].ravel()
                               for k in range(len(self.weights))
                               for kind in (0, 1)])

    def set_flat_params(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {flat.size}")
        pos = 0
        for k in range(len(self.weights)):
            for arr in (self.weights[k], self.biases[k]):
                arr[...] = flat[pos:pos + arr.size].reshape(arr.shape)
                pos += arr.size

    def arch(self) -> dict:
        return {
            "version": _CHECKPOINT_VERSION,
            "dim": self.dim,
            "hidden": list(self.hidden),
            "time_features": self.time_features,
            "horizon": self.horizon,
            "conditioned": self.conditioned,
            "seed": self.seed,
        }

    def save(self, path) -> None:
        np.savez(path, arch=np.bytes_(json.dumps(self.arch()).encode()),
                 params=self.flat_params())

    @classmethod
    def load(cls, path) -> "ScoreNetwork":
        with np.load(path) as data:
            arch = json.loads(bytes(data["arch"]).decode())
            flat = data["params"]
        if arch.get("version") != _CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {arch.get('version')}")
        net = cls(dim=arch["dim"], hidden=arch["hidden"],
                  time_features=arch["time_features"], horizon=arch["horizon"],
                  conditioned=arch["conditioned"], seed=arch["seed"])
        net.set_flat_params(flat)
        return net


class NetWorkspace:
    """Preallocated buffers for fixed-batch forward/backward cycles.

    Not shareable across concurrent callers; each caller owns its workspace.
    """

    def __init__(self, net: ScoreNetwork, batch_size: int):
        self.batch_size = int(batch_size)
        widths = net.sizes[1:-1]
        max_w = max(widths) if widths else 1
        self.acts = [np.empty((batch_size, w)) for w in widths]
        self.out = np.empty((batch_size, net.dim))
        self.delta = (np.empty((batch_size, max_w)), np.empty((batch_size, max_w)))
        self.gate = np.empty((batch_size, max_w))


class AdamState:
    """Adaptive-moment optimizer state for a ScoreNetwork."""

    def __init__(self, net: ScoreNetwork, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in net.parameters().items()}
        self.v = {k: np.zeros_like(v) for k, v in net.parameters().items()}

    def step(self, net: ScoreNetwork, grads: dict[str, np.ndarray]) -> None:
        """One bias-corrected moment update, in place on the network."""
        params = net.parameters()
        for name in params:
            if not np.isfinite(grads[name]).all():
                raise FloatingPointError(
                    f"non-finite gradient for parameter {name!r}")
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)
