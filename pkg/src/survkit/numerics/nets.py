"""Affine and single-hidden-layer feature maps with hand-written gradients.

A :class:`Net` maps an ``(n, d)`` matrix to ``(n, m)`` outputs.  Parameters
live in one flat vector so that fitters can hand them straight to
:func:`survkit.numerics.minimize`.  The hidden layer uses ``tanh``.
"""

import numpy as np


class Net:
    def __init__(self, n_in, n_out, hidden=None, bias=True):
        if hidden is not None and int(hidden) <= 0:
            hidden = None
        self.n_in = int(n_in)
        self.n_out = int(n_out)
        self.hidden = None if hidden is None else int(hidden)
        self.bias = bool(bias)
        shapes = []
        if self.hidden is None:
            shapes.append(("W", (self.n_out, self.n_in), True))
        else:
            shapes.append(("W1", (self.hidden, self.n_in), True))
            shapes.append(("b1", (self.hidden,), False))
            shapes.append(("W", (self.n_out, self.hidden), True))
        if self.bias:
            shapes.append(("b", (self.n_out,), False))
        self._layout = []
        offset = 0
        for name, shape, penalized in shapes:
            size = int(np.prod(shape))
            self._layout.append((name, shape, offset, size, penalized))
            offset += size
        self.n_params = offset
        mask = np.zeros(self.n_params, dtype=bool)
        for _, _, off, size, penalized in self._layout:
            mask[off:off + size] = penalized
        self.penalty_mask = mask

    def config(self):
        return {"n_in": self.n_in, "n_out": self.n_out, "hidden": self.hidden, "bias": self.bias}

    def unpack(self, theta):
        return {name: theta[off:off + size].reshape(shape)
                for name, shape, off, size, _ in self._layout}

    def slice(self, name):
        for nm, _, off, size, _ in self._layout:
            if nm == name:
                return slice(off, off + size)
        raise KeyError(name)

    def init(self, rng=None, scale=1.0):
        """Zero parameters, except a seeded draw for the hidden layer weights.

        An all-zero hidden layer is a saddle point with zero gradient, so the
        input weights need a symmetry-breaking draw.
        """
        theta = np.zeros(self.n_params)
        if self.hidden is not None:
            if rng is None:
                raise ValueError("a hidden layer needs an rng for initialisation")
            sl = self.slice("W1")
            theta[sl] = rng.normal(0.0, scale / np.sqrt(max(self.n_in, 1)), sl.stop - sl.start)
        return theta

    def forward(self, theta, X):
        p = self.unpack(theta)
        if self.hidden is None:
            out = X @ p["W"].T
            cache = None
        else:
            z = np.tanh(X @ p["W1"].T + p["b1"])
            out = z @ p["W"].T
            cache = z
        if self.bias:
            out = out + p["b"]
        return out, cache

    def backward(self, theta, X, cache, grad_out):
        """Gradient of ``sum(grad_out * forward(theta, X))`` with respect to ``theta``."""
        p = self.unpack(theta)
        grad = np.zeros(self.n_params)
        if self.hidden is None:
            grad[self.slice("W")] = (grad_out.T @ X).ravel()
        else:
            z = cache
            grad[self.slice("W")] = (grad_out.T @ z).ravel()
            dz = (grad_out @ p["W"]) * (1.0 - z * z)
            grad[self.slice("W1")] = (dz.T @ X).ravel()
            grad[self.slice("b1")] = dz.sum(axis=0)
        if self.bias:
            grad[self.slice("b")] = grad_out.sum(axis=0)
        return grad

    def penalty(self, theta, lam):
        w = theta[self.penalty_mask]
        return 0.5 * lam * float(w @ w), lam * np.where(self.penalty_mask, theta, 0.0)
