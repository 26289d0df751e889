"""Density at the ambiguous central cluster as the number of classes grows."""

import numpy as np

from ..data import TOY_CENTERS, gen_toy_three_clusters
from ..dirichlet import LossWeights
from ..federated import derive_seed, train_steps
from ..models import Architecture, PosteriorNetwork
from ..numerics.optim import adam
from .metrics import MetricsTable

__all__ = ["LOSSES", "train_toy_model", "run_toy_loss_experiment"]

LOSSES = ("uce-bayesian", "fedpn")


def train_toy_model(num_classes, loss, seed, settings, log_prob_weight=0.001):
    """Centralised model on the three-cluster data; the encoder is the identity
    so densities live directly on the 2D input plane."""
    ds = gen_toy_three_clusters(settings.n_per_cluster, num_classes,
                                derive_seed(seed, "toy-data", num_classes))
    arch = Architecture(2, num_classes, embed_dim=2, flow_depth=settings.flow_depth,
                        identity_encoder=True)
    model = PosteriorNetwork.create(arch, derive_seed(seed, "toy-init", num_classes),
                                    ds.class_proportions())
    # uniform softmax at start; a random head starves clusters whose f_y < 1/K
    model.params["head.W"] = np.zeros_like(model.params["head.W"])
    weights = LossWeights(entropy=settings.bayesian_entropy if loss == "uce-bayesian" else 0.0,
                          log_prob=log_prob_weight)
    rng = np.random.default_rng(derive_seed(seed, "toy-batches", num_classes))
    train_steps(model, ds.inputs, ds.labels, settings.steps, adam(settings.lr), rng,
                settings.batch_size, loss, weights, trainable=("flow", "head"))
    return model, ds


def run_toy_loss_experiment(cfg, progress=None):
    """One row per (loss, K): median over seeds of log p at the three cluster centres.

    Returns ``(summary, runs)`` where ``runs`` holds every (loss, K, seed) cell.
    """
    st = cfg.experiments.toy_loss
    centers = np.asarray(TOY_CENTERS)
    runs = MetricsTable("toy-loss-runs", ("loss", "K", "seed", "logp_center", "logp_left",
                                          "logp_right"))
    for loss in LOSSES:
        for k in st.ks:
            for s in range(st.seeds):
                model, _ = train_toy_model(k, loss, derive_seed(cfg.seed, "toy", s), st,
                                           cfg.loss.log_prob)
                _, ld, _ = model.evaluate(z=centers)
                runs.add(loss=loss, K=k, seed=s, logp_center=float(ld[1]),
                         logp_left=float(ld[0]), logp_right=float(ld[2]))
                if progress:
                    progress(loss, k, s)
    summary = MetricsTable("toy-loss", ("loss", "K", "median_logp_center", "median_logp_left",
                                        "median_logp_right", "seeds"),
                           metadata={"steps": st.steps, "lr": st.lr, "seeds": st.seeds})
    for loss in LOSSES:
        for k in st.ks:
            cell = runs.where(loss=loss, K=k)
            med = {c: float(np.median([r[c] for r in cell]))
                   for c in ("logp_center", "logp_left", "logp_right")}
            summary.add(loss=loss, K=k, median_logp_center=med["logp_center"],
                        median_logp_left=med["logp_left"], median_logp_right=med["logp_right"],
                        seeds=len(cell))
    return summary, runs
