"""Precision of the global model after discarding its most uncertain inputs."""

import math

import numpy as np

from ..errors import ContractError
from ..federated import derive_seed
from ..inference import compute_scores
from .metrics import MetricsTable
from .pipeline import make_world, ood_blobs, train_world

__all__ = ["precision_curve", "run_precision_filter_experiment"]


def precision_curve(uncertainty, correct, fractions):
    """Precision on the kept inputs after dropping the ``q`` most uncertain.

    ``correct`` is False for every OOD input.  Ties in ``uncertainty`` are
    broken by input order so the curve is deterministic.
    """
    u = np.asarray(uncertainty, dtype=np.float64)
    ok = np.asarray(correct, dtype=bool)
    if u.shape != ok.shape or u.size == 0:
        raise ContractError("uncertainty and correctness must be equal-length and non-empty")
    order = np.argsort(-u, kind="stable")
    out = []
    for q in fractions:
        drop = math.floor(q * u.size)
        kept = order[drop:]
        if kept.size == 0:
            raise ContractError(f"filter fraction {q} leaves nothing to score")
        out.append((q, drop, int(ok[kept].sum()) / kept.size))
    return out


def run_precision_filter_experiment(cfg):
    """Global model on a 50/50 InD/OOD mix ranked by Dirichlet entropy."""
    seed = derive_seed(cfg.seed, "precision-filter")
    world = train_world(make_world(cfg, seed), personalize=False)
    ind = world.test
    ood = ood_blobs(cfg, seed, cfg.data.test_per_class)
    n = min(len(ind), len(ood))
    x = np.concatenate([ind.inputs[:n], ood.inputs[:n]])
    is_ood = np.r_[np.zeros(n, bool), np.ones(n, bool)]
    labels = np.r_[ind.labels[:n], np.full(n, -1)]
    sc = compute_scores(world.global_model, x, "entropy")
    correct = (sc.prediction == labels) & ~is_ood
    ind_acc = float(np.mean(correct[:n]))
    table = MetricsTable("precision-filter", ("fraction", "dropped", "precision", "ood_kept"),
                         metadata={"ind_accuracy": ind_acc, "n_ind": n, "n_ood": n,
                                   "score": "entropy"})
    order = np.argsort(-sc.epistemic, kind="stable")
    for q, drop, prec in precision_curve(sc.epistemic, correct, cfg.experiments.precision_filter.fractions):
        table.add(fraction=float(q), dropped=drop, precision=prec,
                  ood_kept=int(is_ood[order[drop:]].sum()))
    return table
