"""Shared setup for the blob experiments: data, clients, both training stages."""

import math
from dataclasses import dataclass

import numpy as np

from .. import config as C
from ..data import SplitSpec, blob_centers, gen_blobs, inject_label_noise, partition_heterogeneous, split
from ..federated import ClientState, derive_seed, local_personalization_stage, run_federated_training

__all__ = ["BlobWorld", "make_world", "train_world"]


@dataclass
class BlobWorld:
    arch: object
    fed: object
    clients: list
    test: object
    centers: np.ndarray
    server: object = None

    @property
    def global_model(self):
        return self.server.model


def make_world(cfg, seed, noisy_classes=()):
    """Blob data partitioned over clients, plus a shared full-class test set.

    Label noise, when requested, is applied to the pooled data before the
    partition so train, calibration and test splits agree.
    """
    d = cfg.data
    centers = blob_centers(d.num_classes, d.input_dim, d.separation)
    per_class = math.ceil(d.train_per_class / d.train_fraction)
    pool = gen_blobs(d.num_classes, per_class, d.input_dim, d.separation,
                     derive_seed(seed, "data"), d.std, centers)
    test = gen_blobs(d.num_classes, d.test_per_class, d.input_dim, d.separation,
                     derive_seed(seed, "test"), d.std, centers)
    if noisy_classes:
        pool = inject_label_noise(pool, noisy_classes, derive_seed(seed, "noise"))
        test = inject_label_noise(test, noisy_classes, derive_seed(seed, "noise-test"))
    fed = C.federation(cfg, seed)
    part = partition_heterogeneous(pool, fed.num_clients, d.classes_per_client,
                                   derive_seed(seed, "partition"))
    spec = SplitSpec(d.train_fraction, 1.0 - d.train_fraction, d.calibration_share)
    clients = []
    for i, idx in enumerate(part.indices):
        tr, ev, cal = split(pool.subset(idx), spec, derive_seed(seed, "split", i))
        clients.append(ClientState(i, tr, ev, cal))
    return BlobWorld(C.architecture(cfg), fed, clients, test, centers)


def train_world(world, personalize=True):
    world.server, world.clients = run_federated_training(world.fed, world.arch, world.clients)
    if personalize:
        local_personalization_stage(world.clients, world.fed)
    return world


def ood_blobs(cfg, seed, n_per_class):
    """Blobs whose centres sit ``ood_shift`` times further out, rotated half a step."""
    d = cfg.data
    shift = cfg.experiments.precision_filter.ood_shift
    centers = blob_centers(d.num_classes, d.input_dim, shift * d.separation,
                           offset=math.pi / d.num_classes)
    return gen_blobs(d.num_classes, n_per_class, d.input_dim, d.separation,
                     derive_seed(seed, "ood"), d.std, centers)
