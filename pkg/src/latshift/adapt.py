"""Target-side adaptation: re-estimate the latent prior from unlabeled
covariates, then predict labels under the shifted prior.

All source-learned conditionals are reused unchanged; only the prior over
the confounder moves. The posterior over U given target x is proportional to
f(U|x) / F_x(U) * q(U), with F_x frozen on the source dataset.
"""

import json
import hashlib
from dataclasses import dataclass

import numpy as np

from .nn import ConfigError, NumericError, log_softmax, softmax
from .model import (MixtureMarginals, WTable, recog_x_logprobs,
                    concept_logprobs, y_logtable, entropy, _safe_log,
                    checkpoint_hash)


@dataclass
class TargetPrior:
    q_logits: np.ndarray

    @property
    def q(self):
        return softmax(self.q_logits)


def target_posterior(model, mix, qprior, x):
    """Posterior rows over U given target x; accepts one vector or a matrix."""
    single = np.asarray(x).ndim == 1
    log_fx, _ = recog_x_logprobs(model, np.atleast_2d(np.asarray(x, dtype=float)))
    lw = log_fx - _safe_log(mix.f_x) + _safe_log(qprior.q)
    post = softmax(lw)
    if not np.all(np.isfinite(post)):
        raise NumericError("degenerate target posterior")
    return post[0] if single else post


def _target_free_energy(log_fx, log_f_x, q, nu):
    lw = log_fx - log_f_x + _safe_log(q)
    return float(np.mean(np.sum(nu * lw, axis=1) + entropy(nu)))


def fit_target_prior(model, mix, target_x, max_iters=500, tol=1e-8):
    """EM for the shifted prior on unlabeled target covariates.

    E-step: exact per-point posterior under the current q. M-step: the
    closed-form maximizer q <- mean posterior. All other parameters are
    untouched. Returns (TargetPrior, per-iteration free-energy trace).
    """
    X = np.atleast_2d(np.asarray(target_x, dtype=float))
    if X.shape[0] == 0:
        raise ConfigError("empty target set")
    log_fx, _ = recog_x_logprobs(model, X)
    log_f_x = _safe_log(mix.f_x)

    q = model.prior.copy()
    trace = []
    for _ in range(max_iters):
        nu = softmax(log_fx - log_f_x + _safe_log(q))
        f = _target_free_energy(log_fx, log_f_x, q, nu)
        trace.append(f)
        q = nu.mean(axis=0)
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) <= tol * max(1.0, abs(trace[-2])):
            break
    return TargetPrior(q_logits=np.log(np.maximum(q, 1e-300))), trace


def predict_target(model, mix, qprior, x):
    """Adapted label predictive: sum over latent and concept of
    P(y|c,u) P(c|x,u) Q(u|x). Accepts one vector or a matrix of x."""
    single = np.asarray(x).ndim == 1
    X = np.atleast_2d(np.asarray(x, dtype=float))
    post_u = target_posterior(model, mix, qprior, X)        # (B, k_u)
    log_pc, _ = concept_logprobs(model, X)                  # (B, k_c, k_u)
    p_c = np.exp(log_pc)
    p_y = np.exp(y_logtable(model))                         # (k_y, k_c, k_u)
    # sum_c P(y|c,u) P(c|x,u) -> (B, k_y, k_u), then sum_u with Q(u|x)
    by_u = np.einsum("ycu,bcu->byu", p_y, p_c)
    out = np.einsum("byu,bu->by", by_u, post_u)
    if single:
        return out[0]
    return out


def source_predict(model, mix, x):
    """Unadapted predictive: the same sum with q equal to the source prior."""
    return predict_target(model, mix, TargetPrior(model.prior_logits.copy()), x)


def append_adapted_prior(checkpoint_path, qprior, trace,
                         target_dataset_hash=None):
    """Write the adapted prior plus provenance into an existing checkpoint."""
    source_hash = checkpoint_hash(checkpoint_path)
    with open(checkpoint_path) as fh:
        doc = json.load(fh)
    doc["adapted_prior"] = {
        "q_logits": np.asarray(qprior.q_logits, dtype=float).tolist(),
        "source_checkpoint_hash": source_hash,
        "target_dataset_hash": target_dataset_hash,
        "iterations": len(trace),
        "final_free_energy": trace[-1] if trace else None,
    }
    with open(checkpoint_path, "w") as fh:
        json.dump(doc, fh, indent=1)
    return doc["adapted_prior"]


def load_adapted_prior(checkpoint_path):
    with open(checkpoint_path) as fh:
        doc = json.load(fh)
    if "adapted_prior" not in doc:
        raise ConfigError("checkpoint carries no adapted prior")
    return TargetPrior(np.asarray(doc["adapted_prior"]["q_logits"], dtype=float))
