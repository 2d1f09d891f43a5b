"""Ground-truth generative processes and dataset file I/O.

Two families: a variable-dimension continuous-covariate process (binary
confounder, binary proxy/concept/label), and a fully discrete process whose
class-valued observations are replaced by high-dimensional class-template
embeddings plus Gaussian noise.

Randomness uses the counter-based Philox generator with one named substream
per variable, so e.g. widening X never perturbs the U/W/C/Y draws.
"""

import json
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import ConfigError

FORMAT_VERSION = 1


class FormatError(ValueError):
    """Dataset directory is missing required pieces or malformed."""


class IntegrityError(ValueError):
    """Stored content hash does not match the data on disk."""


def _stream(seed, name):
    """Named Philox substream, stable across platforms."""
    tag = int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "big")
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence(seed, spawn_key=(tag,))))


def _categorical(rng, probs, n):
    u = rng.random(n)
    return np.searchsorted(np.cumsum(probs), u, side="right").clip(0, len(probs) - 1)


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def _categorical_per_point(prob_cols, r):
    """Sample from per-point categoricals given as columns of (k, n)."""
    cum = np.cumsum(prob_cols.T, axis=1)
    return (r[:, None] > cum).sum(axis=1).clip(0, prob_cols.shape[0] - 1)


# ---------------------------------------------------------------------------
# batches

@dataclass
class SourceBatch:
    x: np.ndarray          # (n, d_x)
    w: np.ndarray          # (n, d_w)
    c: np.ndarray          # (n,) ints
    y: np.ndarray          # (n,) ints
    u_true: np.ndarray     # (n,) ints, diagnostics only
    meta: dict = field(default_factory=dict)

    @property
    def n(self):
        return self.x.shape[0]

    def subset(self, idx):
        return SourceBatch(self.x[idx], self.w[idx], self.c[idx],
                           self.y[idx], self.u_true[idx], self.meta)

    def to_target(self):
        """Strip everything a deployment environment would not observe."""
        return TargetBatch(self.x, self.y, self.u_true, dict(self.meta))


@dataclass
class TargetBatch:
    x: np.ndarray
    y_true: np.ndarray     # evaluation only
    u_true: np.ndarray     # evaluation only
    meta: dict = field(default_factory=dict)

    @property
    def n(self):
        return self.x.shape[0]


# ---------------------------------------------------------------------------
# continuous-covariate process (binary confounder)

@dataclass
class GenParamsA:
    d_x: int = 2
    pi: np.ndarray = field(default_factory=lambda: np.array([0.1, 0.9]))
    m_w_u: np.ndarray = field(default_factory=lambda: np.array([-3.0, 3.0]))
    m_x_u: np.ndarray = field(default_factory=lambda: np.array([[-0.5, 0.5],
                                                                [0.5, -0.5]]))
    m_c_u: np.ndarray = field(default_factory=lambda: np.array([-1.0, 1.0]))
    m_c_x: np.ndarray = field(default_factory=lambda: np.array([[-1.0, 1.0],
                                                                [1.0, -1.0]]))
    m_y_u: np.ndarray = field(default_factory=lambda: np.array([-2.0, 2.0]))
    m_y_c: np.ndarray = field(default_factory=lambda: np.array([[-1.0, 1.0],
                                                                [1.0, -1.0]]))
    noise_scale: float = 10.0

    def __post_init__(self):
        if self.d_x < 2 or self.d_x % 2 != 0:
            raise ConfigError(f"d_x must be even and >= 2, got {self.d_x}")


PI_SOURCE_A = np.array([0.1, 0.9])
PI_TARGET_A = np.array([0.9, 0.1])


def gen_app_a(n, d_x, pi, seed, params=None):
    """Draw a fully observed batch from the continuous-covariate process."""
    p = params if params is not None else GenParamsA(d_x=d_x, pi=np.asarray(pi, float))
    if abs(np.sum(p.pi) - 1.0) > 1e-9:
        raise ConfigError("pi must lie on the simplex")

    u = _categorical(_stream(seed, "u"), p.pi, n)
    w_z = _stream(seed, "w").normal(p.m_w_u[u], 1.0)
    w = (w_z > 0).astype(float)[:, None]

    x = np.empty((n, p.d_x))
    x[:, :2] = _stream(seed, "x_core").normal(size=(n, 2)) + p.m_x_u[u]
    if p.d_x > 2:
        flips = _stream(seed, "x_noise").random((n, p.d_x - 2)) < 0.5
        x[:, 2:] = p.noise_scale * (2.0 * flips - 1.0)

    c_logit = np.einsum("ni,ni->n", x[:, :2], p.m_c_x[u]) + p.m_c_u[u]
    c = (_stream(seed, "c").random(n) < _sigmoid(c_logit)).astype(int)

    y_logit = p.m_y_c[u, c] + p.m_y_u[u]
    y = (_stream(seed, "y").random(n) < _sigmoid(y_logit)).astype(int)

    meta = {"generator": "app_a", "seed": int(seed), "n": int(n),
            "d_x": int(p.d_x), "d_w": 1, "k_c": 2, "k_y": 2, "k_u": 2,
            "params_hash": params_hash_a(p)}
    return SourceBatch(x, w, c, y, u, meta)


def params_hash_a(p):
    payload = json.dumps({"d_x": p.d_x, "pi": p.pi.tolist(),
                          "m_w_u": p.m_w_u.tolist(), "m_x_u": p.m_x_u.tolist(),
                          "m_c_u": p.m_c_u.tolist(), "m_c_x": p.m_c_x.tolist(),
                          "m_y_u": p.m_y_u.tolist(), "m_y_c": p.m_y_c.tolist(),
                          "noise_scale": p.noise_scale}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# discrete process with surrogate embeddings (3-way confounder)

@dataclass
class EmbedConfig:
    d_embed: int = 64
    template_scale: float = 2.0
    noise_std: float = 1.0
    template_seed: int = 0
    n_classes: int = 5     # 2 covariate classes + 3 proxy classes, disjoint


def _softmax_cols(logits):
    z = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


@dataclass
class GenParamsB:
    pi: np.ndarray = field(default_factory=lambda: None)
    m_wt_u: np.ndarray = field(default_factory=lambda: np.array(
        [[1e2, -1e20, -1e20], [-1e20, 1e2, -1e20], [-1e20, -1e20, 1e2]]))
    m_xt_u: np.ndarray = field(default_factory=lambda: np.array(
        [[1e2, 1e2, -1e20], [1e2, -1e20, 1e2]]))
    m_c_u: np.ndarray = field(default_factory=lambda: np.array(
        [[5.0, 5.0, 0.5], [5.0, 0.5, 5.0], [0.5, 5.0, 5.0]]))
    m_c_xt: np.ndarray = field(default_factory=lambda: np.array(
        [[5.0, 0.5], [5.0, 5.0], [0.5, 5.0]]))
    m_y_u: np.ndarray = field(default_factory=lambda: np.array(
        [[5.0, 5.0, 0.5], [0.5, 5.0, 5.0]]))
    m_y_c: np.ndarray = field(default_factory=lambda: np.array(
        [[5.0, 5.0, 0.5], [0.5, 5.0, 5.0]]))
    embed: EmbedConfig = field(default_factory=EmbedConfig)

    def __post_init__(self):
        if self.pi is None:
            self.pi = pi_from_logits([1.0, 0.1, 0.1])

    # conditional tables, columns indexed by the conditioning value
    def p_wt_u(self):
        return _softmax_cols(self.m_wt_u)

    def p_xt_u(self):
        return _softmax_cols(self.m_xt_u)

    def p_c_xt_u(self, xt, u):
        return _softmax_cols((self.m_c_xt[:, xt] + self.m_c_u[:, u])[:, None])[:, 0]

    def p_y_c_u(self, c, u):
        return _softmax_cols((self.m_y_c[:, c] + self.m_y_u[:, u])[:, None])[:, 0]


def pi_from_logits(logits):
    z = np.asarray(logits, dtype=float)
    e = np.exp(z - z.max())
    return e / e.sum()


PI_SOURCE_B = pi_from_logits([1.0, 0.1, 0.1])
PI_TARGET_B = pi_from_logits([0.1, 0.1, 1.0])


def class_templates(cfg):
    rng = np.random.Generator(
        np.random.Philox(np.random.SeedSequence(cfg.template_seed, spawn_key=(7,))))
    return cfg.template_scale * rng.normal(size=(cfg.n_classes, cfg.d_embed))


def class_embed(class_id, cfg, rng):
    """Template for the class plus per-coordinate Gaussian noise."""
    if not (0 <= class_id < cfg.n_classes):
        raise ConfigError(f"class id {class_id} outside template bank")
    return class_templates(cfg)[class_id] + rng.normal(0.0, cfg.noise_std,
                                                       size=cfg.d_embed)


def gen_app_b(n, pi, seed, embed=None, params=None):
    """Draw a batch from the discrete process with embedded observations.

    Covariate embeddings use template-bank classes {0,1}; proxy embeddings
    use classes {2,3,4}, so the two banks never overlap.
    """
    p = params if params is not None else GenParamsB(pi=np.asarray(pi, float))
    if embed is not None:
        p.embed = embed
    if abs(np.sum(p.pi) - 1.0) > 1e-9:
        raise ConfigError("pi must lie on the simplex")

    u = _categorical(_stream(seed, "u"), p.pi, n)
    wt = _categorical_per_point(p.p_wt_u()[:, u], _stream(seed, "wt").random(n))
    xt = _categorical_per_point(p.p_xt_u()[:, u], _stream(seed, "xt").random(n))

    c_probs = _softmax_cols(p.m_c_xt[:, xt] + p.m_c_u[:, u])   # (3, n)
    c = _categorical_per_point(c_probs, _stream(seed, "c").random(n))

    y_logits = p.m_y_c[:, c] + p.m_y_u[:, u]        # (2, n)
    y_probs = _softmax_cols(y_logits)
    y = (_stream(seed, "y").random(n) < y_probs[1]).astype(int)

    templates = class_templates(p.embed)
    d = p.embed.d_embed
    x = templates[xt] + _stream(seed, "x_noise").normal(0.0, p.embed.noise_std, (n, d))
    w = templates[2 + wt] + _stream(seed, "w_noise").normal(0.0, p.embed.noise_std, (n, d))

    meta = {"generator": "app_b", "seed": int(seed), "n": int(n),
            "d_x": int(d), "d_w": int(d), "k_c": 3, "k_y": 2, "k_u": 3,
            "params_hash": params_hash_b(p)}
    return SourceBatch(x, w, c, y, u, meta)


def params_hash_b(p):
    payload = json.dumps({"pi": p.pi.tolist(), "m_wt_u": p.m_wt_u.tolist(),
                          "m_xt_u": p.m_xt_u.tolist(), "m_c_u": p.m_c_u.tolist(),
                          "m_c_xt": p.m_c_xt.tolist(), "m_y_u": p.m_y_u.tolist(),
                          "m_y_c": p.m_y_c.tolist(),
                          "embed": [p.embed.d_embed, p.embed.template_scale,
                                    p.embed.noise_std, p.embed.template_seed]},
                         sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# dataset directories

def _file_hash(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _save_csv(path, arr, fmt):
    np.savetxt(path, np.atleast_2d(arr), fmt=fmt, delimiter=",")


def write_dataset(batch, path):
    """Write a batch as a directory: metadata.json + CSV matrices.

    Observed training columns and held-out evaluation labels live in separate
    files; the metadata records a content hash per file.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    is_source = isinstance(batch, SourceBatch)

    files = {}
    _save_csv(path / "X.csv", batch.x, "%.17g")
    files["X.csv"] = _file_hash(path / "X.csv")
    if is_source:
        _save_csv(path / "W.csv", batch.w, "%.17g")
        files["W.csv"] = _file_hash(path / "W.csv")
        _save_csv(path / "observed.csv", np.column_stack([batch.c, batch.y]), "%d")
        files["observed.csv"] = _file_hash(path / "observed.csv")
        _save_csv(path / "eval_only.csv", batch.u_true[:, None], "%d")
    else:
        _save_csv(path / "eval_only.csv",
                  np.column_stack([batch.y_true, batch.u_true]), "%d")
    files["eval_only.csv"] = _file_hash(path / "eval_only.csv")

    meta = dict(batch.meta)
    meta.update({"format_version": FORMAT_VERSION,
                 "kind": "source" if is_source else "target",
                 "files": files})
    with open(path / "metadata.json", "w") as fh:
        json.dump(meta, fh, indent=1, default=str)


def read_dataset(path, require=None):
    """Read a dataset directory back; verifies per-file content hashes.

    require: optionally 'source' or 'target' to reject the other kind.
    """
    path = Path(path)
    meta_path = path / "metadata.json"
    if not meta_path.exists():
        raise FormatError(f"no metadata.json under {path}")
    with open(meta_path) as fh:
        meta = json.load(fh)
    if meta.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"unsupported dataset format {meta.get('format_version')}")
    kind = meta.get("kind")
    if require is not None and kind != require:
        raise FormatError(f"expected a {require} dataset, found {kind}")

    for name, digest in meta.get("files", {}).items():
        fp = path / name
        if not fp.exists():
            raise FormatError(f"missing dataset file {name}")
        if _file_hash(fp) != digest:
            raise IntegrityError(f"hash mismatch for {name}")

    x = np.loadtxt(path / "X.csv", delimiter=",", ndmin=2)
    ev = np.loadtxt(path / "eval_only.csv", delimiter=",", ndmin=2).astype(int)
    if kind == "source":
        if not (path / "observed.csv").exists() or not (path / "W.csv").exists():
            raise FormatError("source dataset missing observed columns")
        w = np.loadtxt(path / "W.csv", delimiter=",", ndmin=2)
        obs = np.loadtxt(path / "observed.csv", delimiter=",", ndmin=2).astype(int)
        return SourceBatch(x, w, obs[:, 0], obs[:, 1], ev[:, 0], meta)
    return TargetBatch(x, ev[:, 0], ev[:, 1], meta)


def dataset_hash(path):
    meta_path = Path(path) / "metadata.json"
    return hashlib.sha256(meta_path.read_bytes()).hexdigest()[:16]
