"""Recognition-ratio mixture model over a discrete confounder.

The joint over (U, C, Y, X, W) factorises into two recognition-ratio terms
for the high-dimensional observations X and W, explicit categorical
conditionals for C|X,U and Y|C,U, and a learned prior on U. High-dimensional
factors take the form f(U|obs) / F(U), where F is the average of the
recognition distribution over the empirical dataset. Training maximises the
free energy (expected log joint plus posterior entropy) by generalized EM
with an exact, optionally tempered E-step.
"""

import json
import hashlib
from dataclasses import dataclass, field

import numpy as np

from .nn import (ConfigError, ShapeError, NumericError, MlpParams, mlp_init,
                 mlp_forward, mlp_backward, mlp_zero_grads, log_softmax,
                 softmax, AdamState, adam_step, sgd_step, tree_map)

LOG_FLOOR = 1e-30
CHECKPOINT_VERSION = 1


def _safe_log(p):
    return np.log(np.maximum(p, LOG_FLOOR))


# ---------------------------------------------------------------------------
# containers

@dataclass
class ModelDims:
    k_u: int
    k_c: int
    k_y: int
    d_x: int
    d_w: int = 1
    k_w: int = 0     # >0 means W is a discrete scalar handled by a table

    def __post_init__(self):
        if min(self.k_u, self.k_c, self.k_y, self.d_x) < 1:
            raise ConfigError(f"invalid dims {self}")


class WTable:
    """Recognition table for a discrete scalar proxy: logits (k_w, k_u)."""

    def __init__(self, logits):
        self.logits = np.asarray(logits, dtype=float)

    def tree(self):
        return {"logits": self.logits}

    def set_tree(self, tree):
        self.logits = tree["logits"]

    def copy(self):
        return WTable(self.logits.copy())


class PartialRpm:
    """Learned parameter groups plus helpers to read them as distributions."""

    def __init__(self, dims, recog_x, recog_w, concept, y_logits, prior_logits):
        self.dims = dims
        self.recog_x = recog_x          # MLP: x -> k_u logits
        self.recog_w = recog_w          # MLP or WTable: w -> k_u logits
        self.concept = concept          # MLP: [x, onehot(u)] -> k_c logits
        self.y_logits = np.asarray(y_logits, dtype=float)   # (k_y, k_c, k_u)
        self.prior_logits = np.asarray(prior_logits, dtype=float)

    @property
    def prior(self):
        return softmax(self.prior_logits)

    @property
    def y_table(self):
        return np.exp(log_softmax(np.moveaxis(self.y_logits, 0, -1))).transpose(2, 0, 1)

    def tree(self):
        return {"recog_x": self.recog_x.tree(),
                "recog_w": self.recog_w.tree(),
                "concept": self.concept.tree(),
                "y_logits": self.y_logits,
                "prior_logits": self.prior_logits}

    def set_tree(self, tree):
        self.recog_x.set_tree(tree["recog_x"])
        self.recog_w.set_tree(tree["recog_w"])
        self.concept.set_tree(tree["concept"])
        self.y_logits = tree["y_logits"]
        self.prior_logits = tree["prior_logits"]

    def copy(self):
        return PartialRpm(self.dims, self.recog_x.copy(), self.recog_w.copy(),
                          self.concept.copy(), self.y_logits.copy(),
                          self.prior_logits.copy())


@dataclass
class MixtureMarginals:
    f_x: np.ndarray
    f_w: np.ndarray
    source_size: int


@dataclass
class AnnealSchedule:
    beta_start: float = 5.0
    beta_end: float = 1.0
    anneal_epochs: int = 400

    def beta(self, epoch):
        if self.anneal_epochs <= 0 or epoch >= self.anneal_epochs:
            return self.beta_end
        frac = epoch / self.anneal_epochs
        return self.beta_start + frac * (self.beta_end - self.beta_start)


@dataclass
class TrainHyper:
    epochs: int = 2000
    batch_size: int = 1000
    lr_recognition: float = 1e-3
    lr_generative: float = 1e-3
    lr_prior: float = 1e-3
    anneal: AnnealSchedule = field(default_factory=AnnealSchedule)
    seed: int = 0
    hidden: int = 100
    optimizer: str = "adam"   # "sgd" gives plain ascent (monotone EM checks)


def init_model(dims, hyper):
    """Fresh model: fan-in-initialised nets, zero tables, uniform prior."""
    h = hyper.hidden
    recog_x = mlp_init([dims.d_x, h, dims.k_u] if h else [dims.d_x, dims.k_u],
                       hyper.seed)
    if dims.k_w > 0:
        recog_w = WTable(np.zeros((dims.k_w, dims.k_u)))
    else:
        recog_w = mlp_init([dims.d_w, h, dims.k_u] if h else [dims.d_w, dims.k_u],
                           hyper.seed + 1)
    concept = mlp_init([dims.d_x + dims.k_u, h, dims.k_c] if h
                       else [dims.d_x + dims.k_u, dims.k_c], hyper.seed + 2)
    return PartialRpm(dims, recog_x, recog_w, concept,
                      np.zeros((dims.k_y, dims.k_c, dims.k_u)),
                      np.zeros(dims.k_u))


# ---------------------------------------------------------------------------
# factor evaluation

def mixture_marginal(recognition_rows):
    """Column mean of per-point recognition distributions."""
    rows = np.asarray(recognition_rows, dtype=float)
    if rows.size == 0:
        raise ConfigError("mixture of an empty set")
    if np.max(np.abs(rows.sum(axis=1) - 1.0)) > 1e-9:
        raise ShapeError("recognition rows must each sum to 1")
    return rows.mean(axis=0)


def recog_x_logprobs(model, X):
    logits, cache = mlp_forward(model.recog_x, X)
    return log_softmax(logits), cache


def recog_w_logprobs(model, W):
    if isinstance(model.recog_w, WTable):
        idx = np.asarray(np.rint(np.asarray(W).reshape(-1)), dtype=int)
        table = log_softmax(model.recog_w.logits)
        return table[idx], idx
    logits, cache = mlp_forward(model.recog_w, W)
    return log_softmax(logits), cache


def concept_logprobs(model, X):
    """log P(c|x,u) for every u: returns ((B, k_c, k_u), list of caches)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    k_u = model.dims.k_u
    out = np.empty((X.shape[0], model.dims.k_c, k_u))
    caches = []
    for u in range(k_u):
        onehot = np.zeros((X.shape[0], k_u))
        onehot[:, u] = 1.0
        logits, cache = mlp_forward(model.concept, np.hstack([X, onehot]))
        out[:, :, u] = log_softmax(logits)
        caches.append(cache)
    return out, caches


def y_logtable(model):
    """log P(y|c,u), normalised over y: shape (k_y, k_c, k_u)."""
    return np.moveaxis(log_softmax(np.moveaxis(model.y_logits, 0, -1)), -1, 0)


def compute_mixture(model, batch):
    """Mixture marginals of both recognition factors over a batch."""
    log_fx, _ = recog_x_logprobs(model, batch.x)
    log_gw, _ = recog_w_logprobs(model, batch.w)
    return MixtureMarginals(mixture_marginal(np.exp(log_fx)),
                            mixture_marginal(np.exp(log_gw)),
                            batch.n)


def log_joint_weights_batch(model, mix, batch):
    """Per-point per-u log joint weights, shape (N, k_u).

    Component u: log f(u|x) - log F_x(u) + log g(u|w) - log F_w(u)
    + log P(c|x,u) + log P(y|c,u) + log prior(u). Data-measure terms that do
    not depend on u are dropped throughout.
    """
    n = batch.n
    log_fx, _ = recog_x_logprobs(model, batch.x)
    log_gw, _ = recog_w_logprobs(model, batch.w)
    log_pc, _ = concept_logprobs(model, batch.x)
    log_py = y_logtable(model)
    rows = np.arange(n)
    lw = (log_fx - _safe_log(mix.f_x)
          + log_gw - _safe_log(mix.f_w)
          + log_pc[rows, batch.c, :]
          + log_py[batch.y[:, None], batch.c[:, None], np.arange(model.dims.k_u)]
          + log_softmax(model.prior_logits))
    if np.isnan(lw).any():
        raise NumericError("NaN in log joint weights")
    return lw


def log_joint_weights(model, mix, x, w, c, y):
    """Single-point convenience wrapper around the batched computation."""
    batch = _PointBatch(np.atleast_2d(np.asarray(x, dtype=float)),
                        np.atleast_2d(np.asarray(w, dtype=float)),
                        np.array([c]), np.array([y]))
    return log_joint_weights_batch(model, mix, batch)[0]


class _PointBatch:
    def __init__(self, x, w, c, y):
        self.x, self.w, self.c, self.y = x, w, c, y
        self.n = x.shape[0]


def e_step(log_weights, beta=1.0):
    """Exact tempered posterior: softmax(log_weights / beta), rows on simplex."""
    if beta < 1.0:
        raise ConfigError(f"beta must be >= 1, got {beta}")
    lw = np.asarray(log_weights, dtype=float)
    if not np.all(np.isfinite(lw)):
        raise NumericError("non-finite log weights in E-step")
    return softmax(lw / beta)


def entropy(rows):
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    return -np.sum(rows * _safe_log(rows), axis=1)


def free_energy(model, mix, batch, eta, beta=1.0):
    """Batch-mean expected log joint under eta plus beta-weighted entropy."""
    eta = np.atleast_2d(np.asarray(eta, dtype=float))
    if eta.shape[0] != batch.n:
        raise ShapeError("posterior rows misaligned with batch")
    lw = log_joint_weights_batch(model, mix, batch)
    return float(np.mean(np.sum(eta * lw, axis=1) + beta * entropy(eta)))


# ---------------------------------------------------------------------------
# analytic gradients of the free energy (eta held fixed)

def free_energy_value_and_grads(model, batch, eta, beta=1.0):
    """Free energy with batch-local mixtures, and its gradient tree.

    Gradients flow through the recognition numerators and the mixture
    denominators; eta is a constant. Returns (value, grads).
    """
    n = batch.n
    eta = np.atleast_2d(np.asarray(eta, dtype=float))
    k_u = model.dims.k_u
    rows = np.arange(n)

    log_fx, cache_x = recog_x_logprobs(model, batch.x)
    log_gw, cache_w = recog_w_logprobs(model, batch.w)
    log_pc, caches_c = concept_logprobs(model, batch.x)
    log_py = y_logtable(model)
    log_prior = log_softmax(model.prior_logits)

    p_fx = np.exp(log_fx)
    p_gw = np.exp(log_gw)
    f_x = p_fx.mean(axis=0)
    f_w = p_gw.mean(axis=0)

    lw = (log_fx - _safe_log(f_x) + log_gw - _safe_log(f_w)
          + log_pc[rows, batch.c, :]
          + log_py[batch.y[:, None], batch.c[:, None], np.arange(k_u)]
          + log_prior)
    value = float(np.mean(np.sum(eta * lw, axis=1) + beta * entropy(eta)))

    eta_bar = eta.mean(axis=0)

    def recog_dlogits(p, f, ratio_weight):
        # d/dlogits of <log f(u|.)>_eta - <log F(u)>_eta, batch-averaged
        direct = (eta - p) / n
        r = ratio_weight / np.maximum(f, LOG_FLOOR)
        mixture = (p * (p @ r)[:, None] - r * p) / n
        return direct + mixture

    d_logits_x = recog_dlogits(p_fx, f_x, eta_bar)
    grads_x, _ = mlp_backward(model.recog_x, cache_x, d_logits_x)

    if isinstance(model.recog_w, WTable):
        d_logits_w = recog_dlogits(p_gw, f_w, eta_bar)
        g_table = np.zeros_like(model.recog_w.logits)
        np.add.at(g_table, cache_w, d_logits_w)
        grads_w = {"logits": g_table}
    else:
        d_logits_w = recog_dlogits(p_gw, f_w, eta_bar)
        grads_w, _ = mlp_backward(model.recog_w, cache_w, d_logits_w)

    grads_c = mlp_zero_grads(model.concept)
    p_c_all = np.exp(np.moveaxis(log_pc, 2, 0))   # (k_u, B, k_c)
    onehot_c = np.zeros((n, model.dims.k_c))
    onehot_c[rows, batch.c] = 1.0
    for u in range(k_u):
        d_logits_c = eta[:, u:u + 1] * (onehot_c - p_c_all[u]) / n
        g_u, _ = mlp_backward(model.concept, caches_c[u], d_logits_c)
        grads_c = tree_map(np.add, grads_c, g_u)

    p_y = np.exp(np.moveaxis(log_py, 0, -1))      # (k_c, k_u, k_y)
    g_y = np.zeros_like(model.y_logits)           # (k_y, k_c, k_u)
    onehot_y = np.zeros((n, model.dims.k_y))
    onehot_y[rows, batch.y] = 1.0
    resid = onehot_y[:, :, None] - p_y[batch.c].transpose(0, 2, 1)  # (B,k_y,k_u)
    np.add.at(g_y.transpose(1, 0, 2), batch.c, eta[:, None, :] * resid / n)

    g_prior = eta_bar - np.exp(log_prior)

    grads = {"recog_x": grads_x, "recog_w": grads_w, "concept": grads_c,
             "y_logits": g_y, "prior_logits": g_prior}
    return value, grads


class FreeEnergyObjective:
    """Adapter exposing the free energy as a scalar objective of the params.

    Mixture marginals are recomputed from the candidate parameters over the
    held batch, so finite differences exercise the denominator pathway too.
    """

    def __init__(self, model, batch, eta, beta=1.0):
        self.model = model.copy()
        self.batch = batch
        self.eta = np.atleast_2d(np.asarray(eta, dtype=float))
        self.beta = beta

    def _with(self, tree):
        m = self.model.copy()
        m.set_tree(tree)
        return m

    def value(self, tree):
        m = self._with(tree)
        return free_energy(m, compute_mixture(m, self.batch), self.batch,
                           self.eta, self.beta)

    def gradient(self, tree):
        return self.value_and_gradient(tree)[1]

    def value_and_gradient(self, tree):
        return free_energy_value_and_grads(self._with(tree), self.batch,
                                           self.eta, self.beta)


# ---------------------------------------------------------------------------
# training

def train_source(data, dims, hyper):
    """Generalized-EM training on a fully observed source batch.

    Per minibatch: recompute mixtures, exact tempered E-step, one ascent step
    on the free energy over all parameter groups with eta fixed. Returns the
    trained model, mixtures frozen on the full dataset, and the per-epoch
    free-energy trace.
    """
    model = init_model(dims, hyper)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(hyper.seed)))
    n = data.n
    bs = min(hyper.batch_size, n)

    use_adam = hyper.optimizer == "adam"
    if use_adam:
        opt = {
            "recog_x": AdamState(model.recog_x.tree(), hyper.lr_recognition),
            "recog_w": AdamState(model.recog_w.tree(), hyper.lr_recognition),
            "concept": AdamState(model.concept.tree(), hyper.lr_generative),
            "y_logits": AdamState(model.y_logits, hyper.lr_generative),
            "prior_logits": AdamState(model.prior_logits, hyper.lr_prior),
        }
    lrs = {"recog_x": hyper.lr_recognition, "recog_w": hyper.lr_recognition,
           "concept": hyper.lr_generative, "y_logits": hyper.lr_generative,
           "prior_logits": hyper.lr_prior}

    trace = []
    for epoch in range(hyper.epochs):
        beta = hyper.anneal.beta(epoch)
        order = rng.permutation(n) if bs < n else np.arange(n)
        f_epoch = []
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            batch = data.subset(idx)
            mix = compute_mixture(model, batch)
            lw = log_joint_weights_batch(model, mix, batch)
            eta = e_step(lw, beta)
            value, grads = free_energy_value_and_grads(model, batch, eta, beta)
            if not np.isfinite(value):
                raise NumericError(
                    f"free energy diverged at epoch {epoch}, batch {start // bs}")
            tree = model.tree()
            new_tree = {}
            for group in tree:
                if use_adam:
                    _, new_tree[group] = adam_step(opt[group], tree[group],
                                                   grads[group], maximize=True)
                else:
                    new_tree[group] = sgd_step(tree[group], grads[group],
                                               lrs[group], maximize=True)
            model.set_tree(new_tree)
            f_epoch.append(value)
        trace.append(float(np.mean(f_epoch)))

    return model, compute_mixture(model, data), trace


# ---------------------------------------------------------------------------
# checkpoints

def _arr(a):
    return np.asarray(a, dtype=float).tolist()


def _mlp_to_json(p):
    return {"layer_sizes": p.layer_sizes,
            "weights": [_arr(w) for w in p.weights],
            "biases": [_arr(b) for b in p.biases]}


def _mlp_from_json(d):
    return MlpParams(d["layer_sizes"],
                     [np.asarray(w, dtype=float) for w in d["weights"]],
                     [np.asarray(b, dtype=float) for b in d["biases"]])


def _recog_w_to_json(p):
    if isinstance(p, WTable):
        return {"kind": "table", "logits": _arr(p.logits)}
    return {"kind": "mlp", **_mlp_to_json(p)}


def checkpoint_dict(model, mix, hyper=None, seed=None):
    d = model.dims
    return {
        "format_version": CHECKPOINT_VERSION,
        "dims": {"k_u": d.k_u, "k_c": d.k_c, "k_y": d.k_y,
                 "d_x": d.d_x, "d_w": d.d_w, "k_w": d.k_w},
        "recog_x": _mlp_to_json(model.recog_x),
        "recog_w": _recog_w_to_json(model.recog_w),
        "concept": _mlp_to_json(model.concept),
        "y_logits": _arr(model.y_logits),
        "prior_logits": _arr(model.prior_logits),
        "mixture": {"f_x": _arr(mix.f_x), "f_w": _arr(mix.f_w),
                    "source_size": mix.source_size},
        "hyper": None if hyper is None else {
            "epochs": hyper.epochs, "batch_size": hyper.batch_size,
            "lr_recognition": hyper.lr_recognition,
            "lr_generative": hyper.lr_generative, "lr_prior": hyper.lr_prior,
            "anneal": {"beta_start": hyper.anneal.beta_start,
                       "beta_end": hyper.anneal.beta_end,
                       "anneal_epochs": hyper.anneal.anneal_epochs},
            "hidden": hyper.hidden, "optimizer": hyper.optimizer,
            "seed": hyper.seed},
        "seed": seed,
    }


def save_checkpoint(path, model, mix, hyper=None, seed=None):
    with open(path, "w") as fh:
        json.dump(checkpoint_dict(model, mix, hyper, seed), fh, indent=1)


def load_checkpoint(path):
    """Returns (model, mix, raw document)."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {doc.get('format_version')}")
    dims = ModelDims(**doc["dims"])
    rw = doc["recog_w"]
    recog_w = (WTable(np.asarray(rw["logits"], dtype=float))
               if rw["kind"] == "table" else _mlp_from_json(rw))
    model = PartialRpm(dims, _mlp_from_json(doc["recog_x"]), recog_w,
                       _mlp_from_json(doc["concept"]),
                       np.asarray(doc["y_logits"], dtype=float),
                       np.asarray(doc["prior_logits"], dtype=float))
    mix = MixtureMarginals(np.asarray(doc["mixture"]["f_x"], dtype=float),
                           np.asarray(doc["mixture"]["f_w"], dtype=float),
                           doc["mixture"]["source_size"])
    return model, mix, doc


def checkpoint_hash(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
