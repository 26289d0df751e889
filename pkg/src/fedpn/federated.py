"""FedAvg training of the posterior network and the local personalization stage."""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dirichlet import LossWeights, bayesian_loss_graph, fedpn_loss, posterior_graph
from .errors import ContractError
from .models import ParameterBundle, PosteriorNetwork, flatten_params, unflatten_params
from .numerics import autodiff as ad
from .numerics.optim import adam, optimizer_step, sgd_momentum

log = logging.getLogger(__name__)

__all__ = [
    "FederationConfig",
    "ClientState",
    "ServerState",
    "derive_seed",
    "select_active_clients",
    "train_steps",
    "client_local_update",
    "aggregate_mean",
    "run_federated_training",
    "local_personalization_stage",
]


def derive_seed(master, *keys):
    """Deterministic child seed from a master seed and string/int keys."""
    words = [int(master) & 0xFFFFFFFF]
    for key in keys:
        if isinstance(key, str):
            words.extend(key.encode())
        else:
            words.append(int(key) & 0xFFFFFFFF)
    return int(np.random.SeedSequence(words).generate_state(1)[0])


@dataclass(frozen=True)
class FederationConfig:
    num_clients: int = 20
    rounds: int = 100
    local_steps: int = 10
    participation: float = 1.0
    batch_size: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    optimizer: str = "sgd-momentum"
    loss_weights: LossWeights = field(default_factory=LossWeights)
    personalize_epochs: int = 10
    personalize_lr: float = 1e-3
    weighted_mean: bool = False
    workers: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.num_clients < 1:
            raise ContractError("num_clients must be >= 1")
        if self.rounds < 0 or self.local_steps < 0:
            raise ContractError("rounds and local_steps must be non-negative")
        if not 0.0 < self.participation <= 1.0:
            raise ContractError("participation must lie in (0, 1]")
        if math.floor(self.participation * self.num_clients) < 1:
            raise ContractError("participation * num_clients must select at least one client")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if self.optimizer not in ("sgd-momentum", "adam"):
            raise ContractError(f"unknown optimizer {self.optimizer!r}")

    @property
    def active_count(self):
        return math.floor(self.participation * self.num_clients)


@dataclass
class ClientState:
    client_id: int
    train: object
    evaluation: object = None
    calibration: object = None
    model: PosteriorNetwork = None
    skipped: bool = False

    @property
    def class_prior(self):
        return self.train.class_proportions()

    @property
    def classes(self):
        return frozenset(int(c) for c in self.train.classes())


@dataclass
class ServerState:
    model: PosteriorNetwork
    round: int = 0
    history: list = field(default_factory=list)


def select_active_clients(cfg, round_idx):
    """``floor(participation * b)`` clients drawn uniformly, fixed per (seed, round)."""
    if cfg.active_count == cfg.num_clients:
        return list(range(cfg.num_clients))
    rng = np.random.default_rng(derive_seed(cfg.seed, "select", round_idx))
    return sorted(int(i) for i in rng.choice(cfg.num_clients, cfg.active_count, replace=False))


class _Batches:
    """Endless reshuffled minibatches over ``n`` items."""

    def __init__(self, n, batch_size, rng):
        self.n, self.batch_size, self.rng = n, batch_size, rng
        self.order, self.pos = rng.permutation(n), 0

    def next(self):
        if self.pos >= self.n:
            self.order, self.pos = self.rng.permutation(self.n), 0
        idx = self.order[self.pos:self.pos + self.batch_size]
        self.pos += self.batch_size
        return idx


def batch_loss(model, P, inputs, labels, loss="fedpn", weights=LossWeights(), embedded=False):
    """Training loss on one batch as a scalar graph node."""
    g = next(iter(P.values())).graph
    z = g.constant(inputs) if embedded else model.encoder.forward(P, g.constant(inputs))
    post = posterior_graph(model.log_density(P, z), model.class_probs(P, z),
                           stop_density=(loss == "fedpn"),
                           log_budget=model.arch.log_budget)
    if loss == "fedpn":
        return fedpn_loss(post, labels, weights)
    if loss == "uce-bayesian":
        return bayesian_loss_graph(post, labels, weights.entropy)
    raise ContractError(f"unknown loss {loss!r}")


def train_steps(model, inputs, labels, steps, opt, rng, batch_size=64, loss="fedpn",
                weights=LossWeights(), trainable=("encoder", "flow", "head"), embedded=False):
    """Run ``steps`` optimizer steps in place on ``model.params``; returns per-step losses."""
    losses = []
    if steps == 0:
        return losses
    if len(labels) == 0:
        raise ContractError("cannot train on an empty dataset")
    batches = _Batches(len(labels), batch_size, rng)
    for _ in range(steps):
        idx = batches.next()
        g = ad.Graph()
        P = model.bind(g, trainable)
        total = batch_loss(model, P, inputs[idx], labels[idx], loss, weights, embedded)
        grads = ad.backward(g, total)
        model.params = optimizer_step(opt, model.params, grads)
        losses.append(float(total.value))
    return losses


def _make_optimizer(cfg):
    if cfg.optimizer == "adam":
        return adam(cfg.lr)
    return sgd_momentum(cfg.lr, cfg.momentum)


def client_local_update(client, global_params, cfg, round_idx=0):
    """Start from the broadcast globals and run ``cfg.local_steps`` batches.

    Returns ``(params, losses)``; ``params`` is ``None`` for an empty client.
    """
    if len(client.train) == 0:
        log.warning("client %d has no training data; skipping", client.client_id)
        client.skipped = True
        return None, []
    model = PosteriorNetwork(client.model.arch, {k: v.copy() for k, v in global_params.items()},
                             client.class_prior)
    rng = np.random.default_rng(derive_seed(cfg.seed, "local", round_idx, client.client_id))
    losses = train_steps(model, client.train.inputs, client.train.labels, cfg.local_steps,
                         _make_optimizer(cfg), rng, cfg.batch_size, "fedpn", cfg.loss_weights)
    return model.params, losses


def aggregate_mean(bundles, weights=None):
    """Componentwise (optionally weighted) mean, reduced in the given order."""
    if not bundles:
        raise ContractError("need at least one bundle to aggregate")
    first = bundles[0]
    for b in bundles[1:]:
        if not first.same_layout(b):
            raise ContractError("bundle manifests differ")
    w = np.ones(len(bundles)) if weights is None else np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    out = {}
    for part in first.manifest:
        acc = np.zeros_like(first.vectors[part])
        for wi, b in zip(w, bundles):
            acc = acc + wi * b.vectors[part] if weights is not None else acc + b.vectors[part]
        out[part] = acc if weights is not None else acc / len(bundles)
    return ParameterBundle(out, first.manifest)


def run_federated_training(cfg, arch, clients, progress=None):
    """Algorithm: R rounds of select -> broadcast -> local update -> mean.

    Encoder, flows and head are all averaged each round.  On return every
    client model carries the final shared encoder.
    """
    if len(clients) != cfg.num_clients:
        raise ContractError("number of clients does not match the configuration")
    server = ServerState(PosteriorNetwork.create(arch, derive_seed(cfg.seed, "init")))
    for client in clients:
        if client.model is None:
            client.model = PosteriorNetwork(arch, dict(server.model.params), client.class_prior)
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for r in range(cfg.rounds):
            active = select_active_clients(cfg, r)
            params = dict(server.model.params)

            def work(i):
                return client_local_update(clients[i], params, cfg, r)

            results = list(pool.map(work, active)) if pool else [work(i) for i in active]
            kept = [(i, p) for i, (p, _) in zip(active, results) if p is not None]
            if kept:
                bundles = [flatten_params(p) for _, p in kept]
                weights = [len(clients[i].train) for i, _ in kept] if cfg.weighted_mean else None
                server.model.params = unflatten_params(aggregate_mean(bundles, weights))
            mean_loss = float(np.mean([ls[-1] for _, ls in results if ls])) if kept else float("nan")
            server.history.append({"round": r, "active": active, "loss": mean_loss})
            server.round = r + 1
            if progress:
                progress(server)
    finally:
        if pool:
            pool.shutdown()
    for client in clients:
        client.model = PosteriorNetwork(arch, {k: v.copy() for k, v in server.model.params.items()},
                                        client.class_prior)
    return server, clients


def local_personalization_stage(clients, cfg, epochs=None):
    """Retrain flow and head from scratch on local data with the encoder frozen."""
    epochs = cfg.personalize_epochs if epochs is None else epochs
    for client in clients:
        if len(client.train) == 0:
            log.warning("client %d has no training data; not personalized", client.client_id)
            client.skipped = True
            continue
        model = client.model.copy()
        model.class_prior = client.class_prior
        model.reinitialize(("flow", "head"), derive_seed(cfg.seed, "reinit", client.client_id))
        z = model.encode(client.train.inputs)
        steps = epochs * math.ceil(len(client.train) / cfg.batch_size)
        rng = np.random.default_rng(derive_seed(cfg.seed, "personalize", client.client_id))
        train_steps(model, z, client.train.labels, steps, adam(cfg.personalize_lr), rng,
                    cfg.batch_size, "fedpn", cfg.loss_weights, trainable=("flow", "head"),
                    embedded=True)
        client.model = model
    return clients
