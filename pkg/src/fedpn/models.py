"""Encoder, per-class radial-flow density and classifier head.

Parameters live in plain dicts of named float64 arrays.  Every sub-model
owns a name prefix (``encoder.``, ``flow.``, ``head.``) so a single dict can
hold the whole network and be split back per sub-model for federation.

Forward passes take a mapping from parameter name to graph variable, as
produced by :meth:`PosteriorNetwork.bind`, so the same code serves training
(parameters as graph leaves) and evaluation (parameters as constants).
"""

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .numerics import autodiff as ad

__all__ = [
    "Architecture",
    "Encoder",
    "ClassMixtureDensity",
    "ClassifierHead",
    "PosteriorNetwork",
    "ParameterBundle",
    "flatten_params",
    "unflatten_params",
    "save_bundle",
    "load_bundle",
    "params_digest",
]

LOG_2PI = math.log(2.0 * math.pi)
SUBMODELS = ("encoder", "flow", "head")


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    num_classes: int
    embed_dim: int = 2
    hidden: tuple = (64, 64)
    activation: str = "tanh"
    flow_depth: int = 8
    identity_encoder: bool = False
    log_budget: float = 0.0

    def __post_init__(self):
        if self.input_dim < 1 or self.embed_dim < 1 or self.num_classes < 1:
            raise ContractError("dimensions must be positive")
        if self.activation not in ("tanh", "relu"):
            raise ContractError(f"unknown activation {self.activation!r}")
        if self.identity_encoder and self.input_dim != self.embed_dim:
            raise ContractError("identity encoder needs input_dim == embed_dim")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


class Encoder:
    """MLP ``d -> hidden... -> m`` with a linear output layer."""

    def __init__(self, arch):
        self.arch = arch
        self.sizes = (arch.input_dim, *arch.hidden, arch.embed_dim)

    def param_shapes(self):
        if self.arch.identity_encoder:
            return {}
        shapes = {}
        for i, (n_in, n_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            shapes[f"encoder.W{i}"] = (n_in, n_out)
            shapes[f"encoder.b{i}"] = (n_out,)
        return shapes

    def init_params(self, rng):
        params = {}
        for name, shape in self.param_shapes().items():
            if name.startswith("encoder.W"):
                limit = math.sqrt(6.0 / (shape[0] + shape[1]))
                params[name] = rng.uniform(-limit, limit, size=shape)
            else:
                params[name] = np.zeros(shape)
        return params

    def forward(self, P, x):
        if x.shape[-1] != self.arch.input_dim:
            raise ContractError(
                f"encoder expects input dim {self.arch.input_dim}, got {x.shape[-1]}"
            )
        if self.arch.identity_encoder:
            return x
        act = ad.tanh if self.arch.activation == "tanh" else ad.relu
        h = x
        n_layers = len(self.sizes) - 1
        for i in range(n_layers):
            h = h @ P[f"encoder.W{i}"] + P[f"encoder.b{i}"]
            if i < n_layers - 1:
                h = act(h)
        return h


class ClassMixtureDensity:
    """One radial-flow stack per class, mixed with class priors.

    Each flow maps an embedding towards a standard normal base:
    ``f(z) = z + beta h (z - z0)`` with ``h = 1 / (a + |z - z0|)``,
    ``a = softplus(a_raw)`` and ``beta = -a + softplus(beta_raw)`` so every
    layer stays invertible.  The per-class parameters are stacked along a
    leading class axis so all flows evaluate in one batched pass.
    """

    def __init__(self, arch):
        self.arch = arch
        self.depth = arch.flow_depth
        self.dim = arch.embed_dim
        self.num_classes = arch.num_classes

    def param_shapes(self):
        k, f, m = self.num_classes, self.depth, self.dim
        return {"flow.center": (k, f, m), "flow.a": (k, f), "flow.beta": (k, f)}

    def init_params(self, rng):
        k, f, m = self.num_classes, self.depth, self.dim
        a_raw = rng.normal(0.0, 0.1, size=(k, f)) + math.log(math.e - 1.0)
        return {
            "flow.center": rng.normal(0.0, 1.0, size=(k, f, m)),
            "flow.a": a_raw,
            # softplus(beta_raw) == a gives beta == 0: each layer starts near identity
            "flow.beta": a_raw + rng.normal(0.0, 0.01, size=(k, f)),
        }

    def class_log_prob(self, P, z, classes=None):
        """``log p(z | c)`` for the selected classes, shape ``(C, N)``."""
        if not np.all(np.isfinite(z.value)):
            raise ContractError("flow input must be finite")
        classes = np.arange(self.num_classes) if classes is None else np.asarray(classes)
        centers = ad.take(P["flow.center"], classes, axis=0)
        a_all = ad.softplus(ad.take(P["flow.a"], classes, axis=0))
        beta_all = ad.softplus(ad.take(P["flow.beta"], classes, axis=0)) - a_all
        n_cls = len(classes)
        h = ad.reshape(z, (1, *z.shape)) + np.zeros((n_cls, 1, 1))
        log_det = None
        for layer in range(self.depth):
            c = ad.reshape(centers[:, layer, :], (n_cls, 1, self.dim))
            a = ad.reshape(a_all[:, layer], (n_cls, 1))
            beta = ad.reshape(beta_all[:, layer], (n_cls, 1))
            dz = h - c
            r = ad.norm(dz, axis=2)
            inv = 1.0 / (a + r)
            bh = beta * inv
            h = h + ad.reshape(bh, (n_cls, -1, 1)) * dz
            term = ad.log1p(bh) * (self.dim - 1) + ad.log1p(beta * a * inv * inv)
            log_det = term if log_det is None else log_det + term
        base = ad.sum(ad.square(h), axis=2) * -0.5 - 0.5 * self.dim * LOG_2PI
        return base if log_det is None else base + log_det

    def log_prob(self, P, z, prior):
        """Mixture ``log sum_c p(z | c) p(c)`` over classes with non-zero prior."""
        prior = np.asarray(prior, dtype=np.float64)
        active = np.flatnonzero(prior > 0)
        if active.size == 0:
            raise ContractError("mixture needs at least one class with positive prior")
        per_class = self.class_log_prob(P, z, active)
        weighted = per_class + np.log(prior[active])[:, None]
        return ad.logsumexp(weighted, axis=0)


class ClassifierHead:
    """Affine map ``m -> K`` followed by softmax."""

    def __init__(self, arch):
        self.arch = arch

    def param_shapes(self):
        return {"head.W": (self.arch.embed_dim, self.arch.num_classes),
                "head.b": (self.arch.num_classes,)}

    def init_params(self, rng):
        m, k = self.arch.embed_dim, self.arch.num_classes
        return {"head.W": rng.normal(0.0, 1.0 / math.sqrt(m), size=(m, k)),
                "head.b": np.zeros(k)}

    def forward(self, P, z):
        return ad.softmax(z @ P["head.W"] + P["head.b"], axis=1)


def _init_rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


@dataclass
class PosteriorNetwork:
    """Encoder + class-mixture flow density + classifier head.

    ``class_prior`` weights the per-class flows; a client sets it to its own
    label proportions, the global model keeps it uniform.
    """

    arch: Architecture
    params: dict
    class_prior: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.class_prior is None:
            self.class_prior = np.full(self.arch.num_classes, 1.0 / self.arch.num_classes)
        self.class_prior = np.asarray(self.class_prior, dtype=np.float64)
        if self.class_prior.shape != (self.arch.num_classes,):
            raise ContractError("class prior must have one entry per class")
        if np.any(self.class_prior < 0) or abs(self.class_prior.sum() - 1.0) > 1e-9:
            raise ContractError("class prior must be a probability vector")
        self.encoder = Encoder(self.arch)
        self.density = ClassMixtureDensity(self.arch)
        self.head = ClassifierHead(self.arch)

    @classmethod
    def create(cls, arch, seed, class_prior=None):
        rng = _init_rng(seed)
        net = cls(arch, {}, class_prior)
        for part in (net.encoder, net.density, net.head):
            net.params.update(part.init_params(rng))
        return net

    def param_shapes(self):
        shapes = {}
        for part in (self.encoder, self.density, self.head):
            shapes.update(part.param_shapes())
        return shapes

    def copy(self):
        return PosteriorNetwork(self.arch, {k: v.copy() for k, v in self.params.items()},
                                self.class_prior.copy())

    def reinitialize(self, parts, seed):
        """Redraw the named sub-models (``"flow"``, ``"head"``) from their init."""
        rng = _init_rng(seed)
        owners = {"flow": self.density, "head": self.head}
        for part in parts:
            if part not in owners:
                raise ContractError(f"cannot reinitialize {part!r}; choose flow or head")
            self.params.update(owners[part].init_params(rng))
        return self

    def bind(self, graph, trainable=()):
        """Map every parameter onto ``graph``; names with a trainable prefix become leaves."""
        bound = {}
        for name, value in self.params.items():
            if name.split(".", 1)[0] in trainable:
                bound[name] = graph.param(name, value)
            else:
                bound[name] = graph.constant(value)
        return bound

    # -- graph forward --------------------------------------------------

    def log_density(self, P, z):
        return self.density.log_prob(P, z, self.class_prior)

    def class_probs(self, P, z):
        return self.head.forward(P, z)

    # -- numpy evaluation -----------------------------------------------

    def _eval_graph(self):
        g = ad.Graph()
        return g, self.bind(g)

    def encode(self, x):
        g, P = self._eval_graph()
        return self.encoder.forward(P, g.constant(np.atleast_2d(x))).value

    def evaluate(self, x=None, z=None):
        """Embeddings, log-densities and class probabilities as numpy arrays."""
        g, P = self._eval_graph()
        zv = g.constant(z) if z is not None else self.encoder.forward(P, g.constant(np.atleast_2d(x)))
        return zv.value, self.log_density(P, zv).value, self.class_probs(P, zv).value

    def dirichlet(self, x=None, z=None):
        """``(z, log p(z), f(z), alpha_post)`` with the all-ones prior."""
        zv, ld, probs = self.evaluate(x, z)
        evidence = np.exp(ld + self.arch.log_budget)
        return zv, ld, probs, 1.0 + evidence[:, None] * probs

    def flow_log_prob(self, z, cls):
        g, P = self._eval_graph()
        return self.density.class_log_prob(P, g.constant(np.atleast_2d(z)), [cls]).value[0]

    def predict(self, x=None, z=None):
        return np.argmax(self.evaluate(x, z)[2], axis=1)

    def digest(self, part):
        return params_digest({k: v for k, v in self.params.items() if k.startswith(part + ".")})


# -- parameter bundles ------------------------------------------------------


@dataclass(frozen=True)
class ParameterBundle:
    """Flat float64 vectors per sub-model plus the shape manifest to undo them."""

    vectors: dict
    manifest: dict

    def same_layout(self, other):
        return self.manifest == other.manifest


def flatten_params(params, parts=SUBMODELS):
    vectors, manifest = {}, {}
    for part in parts:
        names = sorted(n for n in params if n.split(".", 1)[0] == part)
        manifest[part] = [[n, list(np.shape(params[n]))] for n in names]
        chunks = [np.asarray(params[n], dtype=np.float64).ravel() for n in names]
        vectors[part] = np.concatenate(chunks) if chunks else np.zeros(0)
    return ParameterBundle(vectors, manifest)


def unflatten_params(bundle, expected_shapes=None):
    params = {}
    for part, entries in bundle.manifest.items():
        vec = bundle.vectors[part]
        offset = 0
        for name, shape in entries:
            size = int(np.prod(shape)) if shape else 1
            params[name] = vec[offset:offset + size].reshape(shape).copy()
            offset += size
        if offset != vec.size:
            raise ContractError(f"bundle payload for {part!r} does not match its manifest")
    if expected_shapes is not None:
        got = {n: tuple(p.shape) for n, p in params.items()}
        want = {n: tuple(s) for n, s in expected_shapes.items()
                if n.split(".", 1)[0] in bundle.manifest}
        if got != want:
            raise ContractError("bundle manifest does not match the model architecture")
    return params


_MAGIC = b"FEDPNPB\x00"
BUNDLE_FORMAT_VERSION = 1


def save_bundle(bundle, path):
    """Write magic, version, JSON manifest and a little-endian float64 payload."""
    header = json.dumps({"version": BUNDLE_FORMAT_VERSION, "manifest": bundle.manifest,
                         "parts": list(bundle.manifest)}, sort_keys=True).encode()
    payload = b"".join(np.asarray(bundle.vectors[p], dtype="<f8").tobytes()
                       for p in bundle.manifest)
    with open(path, "xb") as fh:
        fh.write(_MAGIC + struct.pack("<II", BUNDLE_FORMAT_VERSION, len(header)))
        fh.write(header)
        fh.write(payload)


def load_bundle(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != _MAGIC:
        raise ContractError(f"{path} is not a parameter bundle")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != BUNDLE_FORMAT_VERSION:
        raise ContractError(f"unsupported bundle format version {version}")
    header = json.loads(raw[16:16 + hlen])
    payload = np.frombuffer(raw[16 + hlen:], dtype="<f8")
    vectors, offset = {}, 0
    for part in header["parts"]:
        size = sum(int(np.prod(s)) if s else 1 for _, s in header["manifest"][part])
        vectors[part] = payload[offset:offset + size].astype(np.float64)
        offset += size
    return ParameterBundle(vectors, header["manifest"])


def params_digest(params):
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name], dtype="<f8").tobytes())
    return h.hexdigest()
