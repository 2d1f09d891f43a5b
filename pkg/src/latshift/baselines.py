"""Reference predictors: ERM classifiers, analytic Bayes oracles, metrics.

The oracles compute the exact posterior predictive from the true generative
parameters and anchor all quantitative comparisons; the ERM nets bound
unadapted performance from below (trained on source) and above (trained on
target labels).
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .nn import (ConfigError, MlpParams, mlp_init, mlp_forward, mlp_backward,
                 log_softmax, softmax, AdamState, adam_step, tree_map,
                 PlateauSchedule, plateau_update)
from .model import ModelDims, PartialRpm, WTable
from .datagen import class_templates, _sigmoid


@dataclass
class ErmHyper:
    epochs: int = 500
    batch_size: int = 128
    lr: float = 0.01
    weight_decay: float = 1e-6
    hidden: int = 100
    seed: int = 0
    optimizer: str = "sgd"
    plateau_decay: float = 0.1
    plateau_patience: int = 20
    plateau_min_improvement: float = 0.01
    plateau_min_lr: float = 1e-7


@dataclass
class ErmClassifier:
    net: MlpParams
    hyper: ErmHyper
    loss_trace: list = field(default_factory=list)


def train_erm(X, Y, hyper=None, k_y=None):
    """Cross-entropy training of a one-hidden-layer classifier.

    SGD with a plateau schedule by default; weight decay applies to weight
    matrices only, never biases.
    """
    hyper = hyper or ErmHyper()
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.asarray(Y, dtype=int)
    n, d = X.shape
    k = k_y if k_y is not None else int(Y.max()) + 1
    if Y.min() < 0 or Y.max() >= k:
        raise ConfigError("labels out of range")
    if len(np.unique(Y)) < 2:
        warnings.warn("single-class labels: classifier will be degenerate")

    net = mlp_init([d, hyper.hidden, k] if hyper.hidden else [d, k], hyper.seed)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(hyper.seed)))
    bs = min(hyper.batch_size, n)
    sched = PlateauSchedule(hyper.lr, hyper.plateau_decay, hyper.plateau_patience,
                            hyper.plateau_min_improvement, hyper.plateau_min_lr)
    adam = (AdamState(net.tree(), hyper.lr) if hyper.optimizer == "adam" else None)

    trace = []
    for epoch in range(hyper.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            xb, yb = X[idx], Y[idx]
            logits, cache = mlp_forward(net, xb)
            logp = log_softmax(logits)
            losses.append(-np.mean(logp[np.arange(len(idx)), yb]))
            dlogits = np.exp(logp)
            dlogits[np.arange(len(idx)), yb] -= 1.0
            dlogits /= len(idx)
            grads, _ = mlp_backward(net, cache, dlogits)
            grads["w"] = [g + hyper.weight_decay * w
                          for g, w in zip(grads["w"], net.weights)]
            if adam is not None:
                _, tree = adam_step(adam, net.tree(), grads)
            else:
                tree = tree_map(lambda p, g: p - sched.current_lr * g,
                                net.tree(), grads)
            net.set_tree(tree)
        epoch_loss = float(np.mean(losses))
        trace.append(epoch_loss)
        if adam is None:
            plateau_update(sched, epoch_loss)
    return ErmClassifier(net, hyper, trace)


def erm_predict(clf, x):
    """Class probabilities from the classifier; one vector or a matrix."""
    single = np.asarray(x).ndim == 1
    logits, _ = mlp_forward(clf.net, np.atleast_2d(np.asarray(x, dtype=float)))
    probs = softmax(logits)
    return probs[0] if single else probs


# ---------------------------------------------------------------------------
# analytic oracles

def bayes_oracle_app_a(params, pi_eval, x):
    """Exact label predictive under the continuous-covariate process.

    The noise coordinates have a confounder-independent law, so they cancel
    in the posterior over U and only the first two coordinates enter.
    """
    single = np.asarray(x).ndim == 1
    X = np.atleast_2d(np.asarray(x, dtype=float))
    pi_eval = np.asarray(pi_eval, dtype=float)
    x2 = X[:, :2]

    with np.errstate(divide="ignore"):      # point-mass priors are legal
        log_post = np.stack([np.log(pi_eval[u])
                             - 0.5 * np.sum((x2 - params.m_x_u[u]) ** 2,
                                            axis=1)
                             for u in range(2)], axis=1)
    post_u = softmax(log_post)                              # (B, 2)

    p_y = np.zeros((X.shape[0], 2))
    for u in range(2):
        p_c1 = _sigmoid(x2 @ params.m_c_x[u] + params.m_c_u[u])
        for c in range(2):
            p_c = p_c1 if c == 1 else 1.0 - p_c1
            p_y1 = _sigmoid(params.m_y_c[u, c] + params.m_y_u[u])
            p_y[:, 0] += post_u[:, u] * p_c * (1.0 - p_y1)
            p_y[:, 1] += post_u[:, u] * p_c * p_y1
    return p_y[0] if single else p_y


def bayes_oracle_app_b(params, pi_eval, x):
    """Exact label predictive under the embedded discrete process.

    Enumerates the joint over (confounder, covariate class) using the exact
    Gaussian class likelihood of the surrogate embedding.
    """
    single = np.asarray(x).ndim == 1
    X = np.atleast_2d(np.asarray(x, dtype=float))
    pi_eval = np.asarray(pi_eval, dtype=float)
    cfg = params.embed
    templates = class_templates(cfg)[:2]                    # covariate bank
    var = cfg.noise_std ** 2

    loglik = np.stack([-0.5 * np.sum((X - t) ** 2, axis=1) / var
                       for t in templates], axis=1)         # (B, 2)
    p_xt_u = params.p_xt_u()                                # (2, 3)
    log_joint = (np.log(np.maximum(pi_eval, 1e-300))[None, None, :]
                 + np.log(np.maximum(p_xt_u.T, 1e-300)).T[None, :, :]
                 + loglik[:, :, None])                      # (B, xt, u)
    flat = log_joint.reshape(X.shape[0], -1)
    post = softmax(flat).reshape(log_joint.shape)

    p_y = np.zeros((X.shape[0], 2))
    for u in range(3):
        for xt in range(2):
            p_c = params.p_c_xt_u(xt, u)                    # (3,)
            y_given = np.stack([params.p_y_c_u(c, u) for c in range(3)])  # (3,2)
            p_y += post[:, xt, u][:, None] * (p_c @ y_given)
    return p_y[0] if single else p_y


def accuracy(pred_dists, labels):
    """Fraction of rows whose argmax matches the label; ties break low."""
    pred = np.atleast_2d(np.asarray(pred_dists, dtype=float))
    labels = np.asarray(labels, dtype=int)
    if pred.shape[0] == 0:
        raise ConfigError("accuracy of an empty prediction set")
    if pred.shape[0] != labels.shape[0]:
        raise ConfigError("predictions and labels misaligned")
    return float(np.mean(np.argmax(pred, axis=1) == labels))


# ---------------------------------------------------------------------------
# exact plug-in model (continuous-covariate process)

def plugin_model_a(params, pi_source, d_x=None):
    """Model whose recognition, proxy, label, and prior factors are exact.

    The source posterior over the binary confounder given x is log-linear in
    x, so a single affine layer encodes it exactly. The concept factor is
    bilinear in (x, u) and left uniform; it plays no role in prior
    re-estimation, which only touches the covariate recognition pathway.
    """
    d_x = d_x if d_x is not None else params.d_x
    pi_source = np.asarray(pi_source, dtype=float)
    dims = ModelDims(k_u=2, k_c=2, k_y=2, d_x=d_x, d_w=1, k_w=2)

    w = np.zeros((2, d_x))
    w[:, :2] = params.m_x_u
    b = -0.5 * np.sum(params.m_x_u ** 2, axis=1) + np.log(pi_source)
    recog_x = MlpParams([d_x, 2], [w], [b])

    # exact posterior over u given the thresholded proxy value
    p_w1 = norm.cdf(params.m_w_u)                           # P(w=1|u)
    table = np.stack([np.log(pi_source * (1.0 - p_w1)),
                      np.log(pi_source * p_w1)])
    recog_w = WTable(table)

    concept = MlpParams([d_x + 2, 2], [np.zeros((2, d_x + 2))], [np.zeros(2)])

    y_logits = np.zeros((2, 2, 2))
    for u in range(2):
        for c in range(2):
            p1 = _sigmoid(params.m_y_c[u, c] + params.m_y_u[u])
            y_logits[:, c, u] = np.log([1.0 - p1, p1])
    return PartialRpm(dims, recog_x, recog_w, concept, y_logits,
                      np.log(pi_source))
