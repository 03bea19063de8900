"""Recurrent network kernels on float64 numpy arrays.

Every forward pass caches what its hand-derived backward pass needs; there is
no autodiff anywhere. The test suite holds each backward pass against central
finite differences, so if you touch a gradient here, run the gradient tests
before trusting anything downstream.

Parameter tensors live in plain ``dict[str, ndarray]`` objects. Layers own
their parameters and accumulate gradients in a parallel dict, which makes
mini-batch accumulation a plain ``+=`` and keeps the optimizer generic.
"""

from __future__ import annotations

import math
import struct

import numpy as np

PROB_FLOOR = 1e-15

__all__ = [
    "NNError",
    "KernelTooWide",
    "LabelOutOfRange",
    "StaleCache",
    "BadParamFile",
    "sigmoid",
    "softmax",
    "cross_entropy",
    "xavier_uniform",
    "lstm_cell_step",
    "lstm_cell_backward",
    "gru_cell_step",
    "gru_cell_backward",
    "LstmLayer",
    "GruLayer",
    "Conv1dLayer",
    "MaxPool1dLayer",
    "RepeatVector",
    "DenseSoftmax",
    "Network",
    "Adam",
    "gradient_check",
    "save_params",
    "load_params",
]


class NNError(Exception):
    pass


class KernelTooWide(NNError):
    """Convolution kernel wider than the sequence it is applied to."""


class LabelOutOfRange(NNError):
    pass


class StaleCache(NNError):
    """Backward called without a fresh matching forward."""


class BadParamFile(NNError):
    pass


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def softmax(logits):
    """Probabilities from logits, shifted by the max so huge logits stay finite."""
    z = logits - np.max(logits)
    e = np.exp(z)
    return e / np.sum(e)


def cross_entropy(probs, label):
    """Negative log likelihood of ``label`` under ``probs``.

    The probability is floored at 1e-15 so a fully confident wrong prediction
    yields a large finite loss instead of inf.
    """
    if not 0 <= label < probs.shape[0]:
        raise LabelOutOfRange(f"label {label} outside [0, {probs.shape[0]})")
    return -math.log(max(float(probs[label]), PROB_FLOOR))


def xavier_uniform(rng, shape, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# --------------------------------------------------------------------- cells


def lstm_cell_step(p, x, h_prev, c_prev):
    """One LSTM step. Returns (h, c, cache) with the cache holding everything
    the backward pass reads, including a reference to ``p`` itself."""
    i = sigmoid(p["W_i"] @ x + p["U_i"] @ h_prev + p["b_i"])
    f = sigmoid(p["W_f"] @ x + p["U_f"] @ h_prev + p["b_f"])
    g = np.tanh(p["W_g"] @ x + p["U_g"] @ h_prev + p["b_g"])
    o = sigmoid(p["W_o"] @ x + p["U_o"] @ h_prev + p["b_o"])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    cache = {"p": p, "x": x, "h_prev": h_prev, "c_prev": c_prev,
             "i": i, "f": f, "g": g, "o": o, "tc": tc}
    return h, c, cache


def lstm_cell_backward(cache, dh, dc_in):
    """Backward through one LSTM step.

    ``dh`` is the loss gradient at h_t, ``dc_in`` the gradient flowing into
    c_t from the following step. Returns (dparams, dx, dh_prev, dc_prev).
    """
    p = cache["p"]
    i, f, g, o, tc = cache["i"], cache["f"], cache["g"], cache["o"], cache["tc"]

    do = dh * tc
    dc = dc_in + dh * o * (1.0 - tc * tc)
    df = dc * cache["c_prev"]
    di = dc * g
    dg = dc * i
    dc_prev = dc * f

    da = {
        "i": di * i * (1.0 - i),
        "f": df * f * (1.0 - f),
        "g": dg * (1.0 - g * g),
        "o": do * o * (1.0 - o),
    }

    dp = {}
    dx = np.zeros_like(cache["x"])
    dh_prev = np.zeros_like(cache["h_prev"])
    for gate, d in da.items():
        dp[f"W_{gate}"] = np.outer(d, cache["x"])
        dp[f"U_{gate}"] = np.outer(d, cache["h_prev"])
        dp[f"b_{gate}"] = d
        dx += p[f"W_{gate}"].T @ d
        dh_prev += p[f"U_{gate}"].T @ d
    return dp, dx, dh_prev, dc_prev


def gru_cell_step(p, x, h_prev):
    """One GRU step: h = (1 - z) * h_prev + z * candidate."""
    z = sigmoid(p["W_z"] @ x + p["U_z"] @ h_prev + p["b_z"])
    r = sigmoid(p["W_r"] @ x + p["U_r"] @ h_prev + p["b_r"])
    s = r * h_prev
    hh = np.tanh(p["W_h"] @ x + p["U_h"] @ s + p["b_h"])
    h = (1.0 - z) * h_prev + z * hh
    cache = {"p": p, "x": x, "h_prev": h_prev, "z": z, "r": r, "s": s, "hh": hh}
    return h, cache


def gru_cell_backward(cache, dh):
    p = cache["p"]
    z, r, hh, h_prev = cache["z"], cache["r"], cache["hh"], cache["h_prev"]

    dz = dh * (hh - h_prev)
    dhh = dh * z
    dh_prev = dh * (1.0 - z)

    dah = dhh * (1.0 - hh * hh)
    ds = p["U_h"].T @ dah
    dr = ds * h_prev
    dh_prev = dh_prev + ds * r

    daz = dz * z * (1.0 - z)
    dar = dr * r * (1.0 - r)

    dp = {
        "W_z": np.outer(daz, cache["x"]), "U_z": np.outer(daz, h_prev), "b_z": daz,
        "W_r": np.outer(dar, cache["x"]), "U_r": np.outer(dar, h_prev), "b_r": dar,
        "W_h": np.outer(dah, cache["x"]), "U_h": np.outer(dah, cache["s"]), "b_h": dah,
    }
    dx = p["W_z"].T @ daz + p["W_r"].T @ dar + p["W_h"].T @ dah
    dh_prev = dh_prev + p["U_z"].T @ daz + p["U_r"].T @ dar
    return dp, dx, dh_prev


# -------------------------------------------------------------------- layers


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def _init_grads(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def zero_grads(self):
        for g in self.grads.values():
            g[...] = 0.0

    def _take_cache(self):
        if self._cache is None:
            raise StaleCache(f"{self.kind} backward without a fresh forward")
        cache, self._cache = self._cache, None
        return cache

    def forward(self, x):  # pragma: no cover - interface
        raise NotImplementedError

    def backward(self, dout):  # pragma: no cover - interface
        raise NotImplementedError


class LstmLayer(Layer):
    """LSTM over a (T, in_dim) sequence starting from zero state.

    return_mode "last" emits h_T as a vector, "all" the full (T, hidden)
    stack. Forget-gate bias starts at one so early training does not erase
    the cell state before the gates learn anything.
    """

    kind = "lstm"

    def __init__(self, in_dim, hidden, return_mode="last", rng=None):
        super().__init__()
        if return_mode not in ("last", "all"):
            raise ValueError(f"unknown return_mode {return_mode!r}")
        self.in_dim = in_dim
        self.hidden = hidden
        self.return_mode = return_mode
        rng = rng if rng is not None else np.random.default_rng(0)
        for gate in "ifgo":
            self.params[f"W_{gate}"] = xavier_uniform(rng, (hidden, in_dim), in_dim, hidden)
            self.params[f"U_{gate}"] = xavier_uniform(rng, (hidden, hidden), hidden, hidden)
            self.params[f"b_{gate}"] = np.zeros(hidden)
        self.params["b_f"] += 1.0
        self._init_grads()

    def forward(self, seq):
        h = np.zeros(self.hidden)
        c = np.zeros(self.hidden)
        caches = []
        hs = np.empty((seq.shape[0], self.hidden))
        for t in range(seq.shape[0]):
            h, c, cache = lstm_cell_step(self.params, seq[t], h, c)
            caches.append(cache)
            hs[t] = h
        self._cache = (seq.shape, caches)
        return hs if self.return_mode == "all" else h

    def backward(self, dout):
        shape, caches = self._take_cache()
        T = shape[0]
        dseq = np.zeros(shape)
        dh_next = np.zeros(self.hidden)
        dc_next = np.zeros(self.hidden)
        for t in range(T - 1, -1, -1):
            dh = dh_next.copy()
            if self.return_mode == "all":
                dh += dout[t]
            elif t == T - 1:
                dh += dout
            dp, dx, dh_next, dc_next = lstm_cell_backward(caches[t], dh, dc_next)
            dseq[t] = dx
            for k, v in dp.items():
                self.grads[k] += v
        return dseq


class GruLayer(Layer):
    """GRU counterpart of LstmLayer; same modes, no cell state."""

    kind = "gru"

    def __init__(self, in_dim, hidden, return_mode="last", rng=None):
        super().__init__()
        if return_mode not in ("last", "all"):
            raise ValueError(f"unknown return_mode {return_mode!r}")
        self.in_dim = in_dim
        self.hidden = hidden
        self.return_mode = return_mode
        rng = rng if rng is not None else np.random.default_rng(0)
        for gate in "zrh":
            self.params[f"W_{gate}"] = xavier_uniform(rng, (hidden, in_dim), in_dim, hidden)
            self.params[f"U_{gate}"] = xavier_uniform(rng, (hidden, hidden), hidden, hidden)
            self.params[f"b_{gate}"] = np.zeros(hidden)
        self._init_grads()

    def forward(self, seq):
        h = np.zeros(self.hidden)
        caches = []
        hs = np.empty((seq.shape[0], self.hidden))
        for t in range(seq.shape[0]):
            h, cache = gru_cell_step(self.params, seq[t], h)
            caches.append(cache)
            hs[t] = h
        self._cache = (seq.shape, caches)
        return hs if self.return_mode == "all" else h

    def backward(self, dout):
        shape, caches = self._take_cache()
        T = shape[0]
        dseq = np.zeros(shape)
        dh_next = np.zeros(self.hidden)
        for t in range(T - 1, -1, -1):
            dh = dh_next.copy()
            if self.return_mode == "all":
                dh += dout[t]
            elif t == T - 1:
                dh += dout
            dp, dx, dh_next = gru_cell_backward(caches[t], dh)
            dseq[t] = dx
            for k, v in dp.items():
                self.grads[k] += v
        return dseq


class Conv1dLayer(Layer):
    """Valid 1-D convolution over time with a fused relu.

    out[t, k] = relu(sum_{w, f} K[k, w, f] * seq[t + w, f] + b[k]), so a
    (T, F) input becomes (T - width + 1, kernels).
    """

    kind = "conv1d"

    def __init__(self, in_features, kernels, width, rng=None):
        super().__init__()
        self.in_features = in_features
        self.kernels = kernels
        self.width = width
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["K"] = xavier_uniform(
            rng, (kernels, width, in_features), width * in_features, kernels)
        self.params["b"] = np.zeros(kernels)
        self._init_grads()

    def forward(self, seq):
        T = seq.shape[0]
        t_out = T - self.width + 1
        if t_out < 1:
            raise KernelTooWide(f"width {self.width} exceeds sequence length {T}")
        pre = np.tile(self.params["b"], (t_out, 1))
        for w in range(self.width):
            pre += seq[w:w + t_out] @ self.params["K"][:, w, :].T
        mask = pre > 0.0
        self._cache = (seq, mask)
        return pre * mask

    def backward(self, dout):
        seq, mask = self._take_cache()
        t_out = dout.shape[0]
        dpre = dout * mask
        dseq = np.zeros_like(seq)
        for w in range(self.width):
            self.grads["K"][:, w, :] += dpre.T @ seq[w:w + t_out]
            dseq[w:w + t_out] += dpre @ self.params["K"][:, w, :]
        self.grads["b"] += dpre.sum(axis=0)
        return dseq


class MaxPool1dLayer(Layer):
    """Non-overlapping max pooling over time; a short final window is kept."""

    kind = "pool"

    def __init__(self, window):
        super().__init__()
        self.window = window

    def forward(self, seq):
        T, F = seq.shape
        n_out = -(-T // self.window)  # ceil
        out = np.empty((n_out, F))
        argmax = np.empty((n_out, F), dtype=np.intp)
        for j in range(n_out):
            lo = j * self.window
            hi = min(lo + self.window, T)
            win = seq[lo:hi]
            idx = np.argmax(win, axis=0)
            argmax[j] = lo + idx
            out[j] = win[idx, np.arange(F)]
        self._cache = (seq.shape, argmax)
        return out

    def backward(self, dout):
        shape, argmax = self._take_cache()
        dseq = np.zeros(shape)
        cols = np.arange(shape[1])
        for j in range(dout.shape[0]):
            dseq[argmax[j], cols] += dout[j]
        return dseq


class RepeatVector(Layer):
    """Tile a vector into a (steps, dim) sequence; backward sums the copies."""

    kind = "repeat"

    def __init__(self, steps):
        super().__init__()
        self.steps = steps

    def forward(self, vec):
        self._cache = vec.shape
        return np.tile(vec, (self.steps, 1))

    def backward(self, dout):
        self._take_cache()
        return dout.sum(axis=0)


class DenseSoftmax(Layer):
    """Affine map to class logits followed by softmax.

    backward takes the gradient at the logits. For cross entropy on softmax
    that gradient is probs - onehot(label), which Network.backward supplies,
    so the softmax jacobian never needs to be materialised.
    """

    kind = "dense"

    def __init__(self, in_dim, classes, rng=None):
        super().__init__()
        self.in_dim = in_dim
        self.classes = classes
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["W"] = xavier_uniform(rng, (classes, in_dim), in_dim, classes)
        self.params["b"] = np.zeros(classes)
        self._init_grads()

    def forward(self, x):
        probs = softmax(self.params["W"] @ x + self.params["b"])
        self._cache = x
        return probs

    def backward(self, dlogits):
        x = self._take_cache()
        self.grads["W"] += np.outer(dlogits, x)
        self.grads["b"] += dlogits
        return self.params["W"].T @ dlogits


# ------------------------------------------------------------------ networks


class Network:
    """An ordered layer stack ending in DenseSoftmax.

    forward maps one (T, F) example to class probabilities. backward
    accumulates parameter gradients in the layers, so summing a mini-batch
    is just repeated loss_and_backprop between zero_grads calls.
    """

    def __init__(self, layers):
        self.layers = list(layers)
        self._probs = None
        self._label_count = self.layers[-1].classes

    def forward(self, x):
        out = x
        for layer in self.layers:
            out = layer.forward(out)
        self._probs = out
        return out

    def backward(self, label):
        if self._probs is None:
            raise StaleCache("network backward without a fresh forward")
        if not 0 <= label < self._label_count:
            raise LabelOutOfRange(f"label {label} outside [0, {self._label_count})")
        d = self._probs.copy()
        d[label] -= 1.0
        self._probs = None
        for layer in reversed(self.layers):
            d = layer.backward(d)
        return d

    def loss(self, x, label):
        return cross_entropy(self.forward(x), label)

    def loss_and_backprop(self, x, label):
        loss = self.loss(x, label)
        self.backward(label)
        return loss

    def zero_grads(self):
        for layer in self.layers:
            layer.zero_grads()

    def params(self):
        out = {}
        for idx, layer in enumerate(self.layers):
            for k, v in layer.params.items():
                out[f"{idx:02d}_{layer.kind}/{k}"] = v
        return out

    def grads(self):
        out = {}
        for idx, layer in enumerate(self.layers):
            for k, v in layer.grads.items():
                out[f"{idx:02d}_{layer.kind}/{k}"] = v
        return out

    @property
    def param_count(self):
        return sum(v.size for v in self.params().values())


class Adam(object):
    """Adam with bias correction; updates parameter arrays in place."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for k, theta in self.params.items():
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            mhat = self.m[k] / b1c
            vhat = self.v[k] / b2c
            theta -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def gradient_check(net, x, label, eps=1e-5, sample=None, rng=None):
    """Worst relative error between analytic and central-difference gradients.

    Error metric per coordinate: |a - n| / max(1, |a|, |n|). When ``sample``
    is given and the network is larger, a random subset of at least 200
    coordinates is checked instead of all of them.
    """
    net.zero_grads()
    net.loss_and_backprop(x, label)
    analytic = {k: v.copy() for k, v in net.grads().items()}
    params = net.params()

    coords = [(k, i) for k in sorted(params) for i in range(params[k].size)]
    if sample is not None and len(coords) > sample:
        take = min(len(coords), max(200, sample))
        rng = rng if rng is not None else np.random.default_rng(0)
        picked = rng.choice(len(coords), size=take, replace=False)
        coords = [coords[i] for i in picked]

    worst = 0.0
    for name, flat_idx in coords:
        arr = params[name]
        idx = np.unravel_index(flat_idx, arr.shape)
        keep = arr[idx]
        arr[idx] = keep + eps
        hi = net.loss(x, label)
        arr[idx] = keep - eps
        lo = net.loss(x, label)
        arr[idx] = keep
        numeric = (hi - lo) / (2.0 * eps)
        a = analytic[name][idx]
        err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
        worst = max(worst, err)
    return worst


# ----------------------------------------------------------- parameter files

_PARAM_MAGIC = b"SQPM"
_PARAM_VERSION = 1


def save_params(path, params):
    """Write named tensors to a flat binary file.

    Layout after the magic/version header: tensor count, then for each tensor
    (sorted by name for byte stability) the utf-8 name, rows, cols and the
    row-major float64 payload, all little-endian. cols == 0 marks a 1-D
    tensor of length rows.
    """
    blob = bytearray()
    blob += _PARAM_MAGIC
    blob += struct.pack("<HI", _PARAM_VERSION, len(params))
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype=np.float64)
        if arr.ndim == 1:
            rows, cols = arr.shape[0], 0
        elif arr.ndim == 2:
            rows, cols = arr.shape
        else:
            raise ValueError(f"{name}: only 1-D and 2-D tensors are stored")
        encoded = name.encode("utf-8")
        blob += struct.pack("<H", len(encoded)) + encoded
        blob += struct.pack("<II", rows, cols)
        blob += arr.astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(blob)


def load_params(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _PARAM_MAGIC:
        raise BadParamFile(f"{path}: bad magic")
    off = 4
    try:
        version, count = struct.unpack_from("<HI", blob, off)
        off += 6
        if version != _PARAM_VERSION:
            raise BadParamFile(f"{path}: unsupported version {version}")
        out = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + name_len].decode("utf-8")
            off += name_len
            rows, cols = struct.unpack_from("<II", blob, off)
            off += 8
            n = rows * (cols if cols else 1)
            end = off + 8 * n
            if end > len(blob):
                raise BadParamFile(f"{path}: truncated tensor {name}")
            arr = np.frombuffer(blob[off:end], dtype="<f8").astype(np.float64)
            off = end
            out[name] = arr if cols == 0 else arr.reshape(rows, cols)
    except struct.error as exc:
        raise BadParamFile(f"{path}: truncated header") from exc
    return out
