"""Minimal dense-network substrate: MLP forward/backward, optimizers, schedules.

Everything here operates on plain numpy arrays in double precision. Model
parameters are passed around as "trees": arbitrarily nested dicts/lists whose
leaves are ndarrays. Gradients mirror the tree structure exactly.
"""

import numpy as np


class ConfigError(ValueError):
    """Invalid configuration (sizes, hyperparameters)."""


class ShapeError(ValueError):
    """Input dimensions inconsistent with parameters."""


class NumericError(ArithmeticError):
    """Non-finite value encountered where finite numerics are required."""


# ---------------------------------------------------------------------------
# parameter trees

def tree_map(fn, *trees):
    """Apply fn leafwise across trees with identical structure."""
    t0 = trees[0]
    if isinstance(t0, dict):
        return {k: tree_map(fn, *(t[k] for t in trees)) for k in t0}
    if isinstance(t0, (list, tuple)):
        return [tree_map(fn, *(t[i] for t in trees)) for i in range(len(t0))]
    return fn(*trees)


def tree_leaves(tree):
    """Leaves in a deterministic order (dict keys sorted)."""
    out = []
    if isinstance(tree, dict):
        for k in sorted(tree):
            out.extend(tree_leaves(tree[k]))
    elif isinstance(tree, (list, tuple)):
        for t in tree:
            out.extend(tree_leaves(t))
    else:
        out.append(tree)
    return out


def tree_flatten(tree):
    """Concatenate all leaves into one vector; returns (vector, unflatten)."""
    leaves = tree_leaves(tree)
    shapes = [np.shape(l) for l in leaves]
    vec = np.concatenate([np.ravel(np.asarray(l, dtype=float)) for l in leaves])

    def unflatten(v):
        it = iter(_split(v, shapes))

        def rebuild(t):
            if isinstance(t, dict):
                return {k: rebuild(t[k]) for k in sorted(t)}
            if isinstance(t, (list, tuple)):
                return [rebuild(x) for x in t]
            return next(it)

        return rebuild(tree)

    return vec, unflatten


def _split(v, shapes):
    pos = 0
    for s in shapes:
        n = int(np.prod(s)) if s else 1
        yield np.asarray(v[pos:pos + n]).reshape(s)
        pos += n


# ---------------------------------------------------------------------------
# softmax utilities

def log_softmax(v):
    """Row-wise log-softmax with max-subtraction; accepts 1-D or 2-D input."""
    v = np.asarray(v, dtype=float)
    if v.size == 0:
        raise ConfigError("log_softmax of empty vector")
    if np.isnan(v).any():
        raise NumericError("NaN input to log_softmax")
    m = np.max(v, axis=-1, keepdims=True)
    z = v - m
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def softmax(v):
    return np.exp(log_softmax(v))


# ---------------------------------------------------------------------------
# MLP

class MlpParams:
    """Fully-connected net: ReLU on hidden layers, identity on the output.

    weights[l] has shape (layer_sizes[l+1], layer_sizes[l]); biases[l] has
    length layer_sizes[l+1]. A two-entry layer_sizes gives a plain affine map.
    """

    def __init__(self, layer_sizes, weights, biases):
        self.layer_sizes = list(layer_sizes)
        self.weights = weights
        self.biases = biases

    def tree(self):
        return {"w": self.weights, "b": self.biases}

    def set_tree(self, tree):
        self.weights = tree["w"]
        self.biases = tree["b"]

    def copy(self):
        return MlpParams(self.layer_sizes,
                         [w.copy() for w in self.weights],
                         [b.copy() for b in self.biases])


def mlp_init(layer_sizes, seed):
    """Fan-in-scaled Gaussian weights, zero biases; deterministic per seed."""
    if len(layer_sizes) < 2 or any(int(s) < 1 for s in layer_sizes):
        raise ConfigError(f"invalid layer_sizes {layer_sizes}")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        weights.append(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(layer_sizes, weights, biases)


def mlp_forward(params, x):
    """Batched forward pass. x: (B, d_in). Returns (logits, cache)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != params.layer_sizes[0]:
        raise ShapeError(f"input dim {x.shape[1]} != {params.layer_sizes[0]}")
    acts = [x]
    n_layers = len(params.weights)
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = acts[-1] @ w.T + b
        acts.append(np.maximum(z, 0.0) if l < n_layers - 1 else z)
    return acts[-1], acts


def mlp_logits(params, x):
    """Single-vector forward pass; returns the output-layer pre-activations."""
    out, _ = mlp_forward(params, np.asarray(x, dtype=float)[None, :])
    return out[0]


def mlp_backward(params, cache, dlogits):
    """Reverse pass from dL/dlogits. Returns ({'w','b'} grads, dL/dinput)."""
    dz = np.asarray(dlogits, dtype=float)
    dws = [None] * len(params.weights)
    dbs = [None] * len(params.biases)
    for l in range(len(params.weights) - 1, -1, -1):
        a_prev = cache[l]
        dws[l] = dz.T @ a_prev
        dbs[l] = dz.sum(axis=0)
        da = dz @ params.weights[l]
        if l > 0:
            # cache[l] is post-ReLU; its positivity marks active units
            da = da * (cache[l] > 0)
        dz = da
    return {"w": dws, "b": dbs}, dz


def mlp_zero_grads(params):
    return {"w": [np.zeros_like(w) for w in params.weights],
            "b": [np.zeros_like(b) for b in params.biases]}


# ---------------------------------------------------------------------------
# objectives and gradient checking

def value_and_grad(objective, params):
    """Evaluate an objective and its analytic gradient at params.

    An objective is any object with value(params) -> float and
    gradient(params) -> tree; objects exposing value_and_gradient are used
    directly to avoid recomputation.
    """
    if hasattr(objective, "value_and_gradient"):
        value, grads = objective.value_and_gradient(params)
    else:
        value, grads = objective.value(params), objective.gradient(params)
    if not np.isfinite(value):
        raise NumericError(f"non-finite objective value {value}")
    for leaf in tree_leaves(grads):
        if not np.all(np.isfinite(leaf)):
            raise NumericError("non-finite gradient leaf")
    return value, grads


def finite_diff_grad(objective, params, step=1e-5):
    """Central-difference gradient of a scalar objective over a param tree."""
    if step <= 0:
        raise ConfigError("finite-difference step must be positive")
    fn = objective.value if hasattr(objective, "value") else objective
    vec, unflatten = tree_flatten(params)
    g = np.zeros_like(vec)
    for i in range(vec.size):
        vp, vm = vec.copy(), vec.copy()
        vp[i] += step
        vm[i] -= step
        g[i] = (fn(unflatten(vp)) - fn(unflatten(vm))) / (2.0 * step)
    return unflatten(g)


# ---------------------------------------------------------------------------
# optimizers

class AdamState:
    def __init__(self, params_tree, learning_rate=1e-3,
                 beta1=0.9, beta2=0.999, epsilon=1e-8):
        if learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        self.m = tree_map(np.zeros_like, params_tree)
        self.v = tree_map(np.zeros_like, params_tree)
        self.step = 0
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon


def adam_step(state, params, grads, maximize=False):
    """One Adam update with bias correction. Returns (state, new params).

    The state is updated in place; parameter arrays are fresh copies.
    """
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    sign = -1.0 if maximize else 1.0

    def upd(p, g, m, v):
        if np.shape(p) != np.shape(g):
            raise ShapeError(f"grad shape {np.shape(g)} != param {np.shape(p)}")
        g = sign * g
        m[...] = b1 * m + (1 - b1) * g
        v[...] = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        return p - state.learning_rate * mhat / (np.sqrt(vhat) + state.epsilon)

    new_params = tree_map(upd, params, grads, state.m, state.v)
    state.step = t
    return state, new_params


def sgd_step(params, grads, learning_rate, maximize=False):
    """Plain (stochastic) gradient step; used where monotone ascent matters."""
    sign = 1.0 if maximize else -1.0
    return tree_map(lambda p, g: p + sign * learning_rate * g, params, grads)


# ---------------------------------------------------------------------------
# learning-rate schedule

class PlateauSchedule:
    """Cut the learning rate when the running-best loss stalls.

    Decays current_lr by decay_factor when the best loss seen has not
    improved by min_improvement over the last patience_epochs epochs;
    the observation window resets after each decay.
    """

    def __init__(self, initial_lr, decay_factor=0.1, patience_epochs=20,
                 min_improvement=0.01, min_lr=1e-7):
        if not (0 < decay_factor < 1):
            raise ConfigError("decay_factor must lie in (0,1)")
        self.current_lr = float(initial_lr)
        self.decay_factor = decay_factor
        self.patience_epochs = int(patience_epochs)
        self.min_improvement = float(min_improvement)
        self.min_lr = float(min_lr)
        self.best_history = []


def plateau_update(schedule, epoch_loss):
    """Record one epoch loss and decay the rate if progress has stalled."""
    if not np.isfinite(epoch_loss):
        raise NumericError(f"non-finite epoch loss {epoch_loss}")
    s = schedule
    best = min(s.best_history[-1], epoch_loss) if s.best_history else float(epoch_loss)
    s.best_history.append(best)
    if len(s.best_history) >= s.patience_epochs:
        ref = s.best_history[-s.patience_epochs]
        if best > ref - s.min_improvement:
            s.current_lr = max(s.current_lr * s.decay_factor, s.min_lr)
            s.best_history = []
    if len(s.best_history) > 10 * s.patience_epochs:
        s.best_history = s.best_history[-s.patience_epochs:]
    return s
