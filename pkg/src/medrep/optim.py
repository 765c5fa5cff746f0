"""Adam optimizer and validation-loss early stopping."""

from __future__ import annotations

import numpy as np


class Adam:
    def __init__(self, lr=5e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        """In-place bias-corrected update of every named parameter present in
        ``grads``. Arrays are mutated, never rebound, so references held by
        model objects stay valid."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        correction = np.sqrt(1.0 - b2 ** self.t) / (1.0 - b1 ** self.t)
        for name, g in grads.items():
            p = params[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= self.lr * correction * m / (np.sqrt(v) + self.eps)

    def state_arrays(self):
        out = {}
        for name, arr in self.m.items():
            out[f"adam_m/{name}"] = arr
        for name, arr in self.v.items():
            out[f"adam_v/{name}"] = arr
        return out

    def load_state(self, arrays, t):
        self.t = int(t)
        self.m = {k[len("adam_m/"):]: v for k, v in arrays.items() if k.startswith("adam_m/")}
        self.v = {k[len("adam_v/"):]: v for k, v in arrays.items() if k.startswith("adam_v/")}


class EarlyStopper:
    """Track best validation loss; snapshot/restore the best parameter state."""

    def __init__(self, patience=5, min_delta=1e-4):
        self.patience = patience
        self.min_delta = min_delta
        self.best_loss = np.inf
        self.bad_epochs = 0
        self.best_params = None

    def update(self, loss, params):
        """Record an epoch's validation loss. Returns True when patience is
        exhausted and training should stop."""
        if loss < self.best_loss - self.min_delta:
            self.best_loss = loss
            self.bad_epochs = 0
            self.best_params = {k: v.copy() for k, v in params.items()}
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience

    def restore(self, params):
        """Copy the best snapshot back into the live arrays (in place)."""
        if self.best_params is None:
            return False
        for k, arr in self.best_params.items():
            np.copyto(params[k], arr)
        return True
