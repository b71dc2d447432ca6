"""Small dense networks with hand-written gradients.

The architecture is fixed (ReLU hidden layers, identity output), so
backpropagation, forward-mode directional derivatives, and flat parameter
vectors are implemented directly on the weight lists. All math is float64
numpy; batches are row-major (samples, features).
"""
import numpy as np

from .errors import ArgumentError


class Mlp:
    def __init__(self, layer_dims, rng=None, out_scale=1.0):
        layer_dims = [int(d) for d in layer_dims]
        if len(layer_dims) < 2 or min(layer_dims) < 1:
            raise ArgumentError("layer_dims needs >= 2 positive entries")
        self.layer_dims = layer_dims
        self.weights = []
        self.biases = []
        n_layers = len(layer_dims) - 1
        for i in range(n_layers):
            fan_in, fan_out = layer_dims[i], layer_dims[i + 1]
            if rng is None:
                w = np.zeros((fan_in, fan_out))
            else:
                # He initialization for the ReLU stack; the output layer is
                # shrunk so initial outputs sit near zero
                w = rng.normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
                if i == n_layers - 1:
                    w = w * out_scale
            self.weights.append(w)
            self.biases.append(np.zeros(fan_out))

    @property
    def n_layers(self):
        return len(self.weights)

    def forward(self, x):
        """Returns (output, cache). Cache holds per-layer activations and
        pre-activations for the backward and jvp passes."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.layer_dims[0]:
            raise ArgumentError(
                f"input dim {x.shape[1]} != {self.layer_dims[0]}")
        acts = [x]
        zs = []
        h = x
        for i in range(self.n_layers):
            z = h @ self.weights[i] + self.biases[i]
            zs.append(z)
            h = np.maximum(z, 0.0) if i < self.n_layers - 1 else z
            acts.append(h)
        return h, (acts, zs)

    def backward(self, cache, dout):
        """Parameter gradients of sum(dout * output)."""
        acts, zs = cache
        delta = np.asarray(dout, dtype=float)
        grads_w = [None] * self.n_layers
        grads_b = [None] * self.n_layers
        for i in range(self.n_layers - 1, -1, -1):
            grads_w[i] = acts[i].T @ delta
            grads_b[i] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self.weights[i].T) * (zs[i - 1] > 0.0)
        return grads_w, grads_b

    def jvp(self, cache, tangent_w, tangent_b):
        """Directional derivative of the output along a parameter tangent,
        evaluated on the batch the cache was built from."""
        acts, zs = cache
        d = np.zeros_like(acts[0])
        for i in range(self.n_layers):
            d = acts[i] @ tangent_w[i] + tangent_b[i] + d @ self.weights[i]
            if i < self.n_layers - 1:
                d = d * (zs[i] > 0.0)
        return d

    def n_params(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def flat(self):
        parts = [w.ravel() for w in self.weights]
        parts += [b.ravel() for b in self.biases]
        return np.concatenate(parts)

    def unflat(self, vec):
        """Split a flat vector into (weight list, bias list) with this
        network's shapes."""
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.n_params(),):
            raise ArgumentError("flat vector has the wrong length")
        ws, bs = [], []
        k = 0
        for w in self.weights:
            ws.append(vec[k:k + w.size].reshape(w.shape))
            k += w.size
        for b in self.biases:
            bs.append(vec[k:k + b.size].reshape(b.shape))
            k += b.size
        return ws, bs

    def set_flat(self, vec):
        ws, bs = self.unflat(vec)
        self.weights = [w.copy() for w in ws]
        self.biases = [b.copy() for b in bs]

    def copy(self):
        dup = Mlp(self.layer_dims)
        dup.weights = [w.copy() for w in self.weights]
        dup.biases = [b.copy() for b in self.biases]
        return dup


def sigmoid(z):
    """Numerically stable logistic function."""
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class Adam:
    """Adam optimizer over a flat parameter vector."""

    def __init__(self, n_params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def update(self, params, grad):
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        mhat = self.m / (1.0 - self.beta1 ** self.t)
        vhat = self.v / (1.0 - self.beta2 ** self.t)
        return params - self.lr * mhat / (np.sqrt(vhat) + self.eps)
