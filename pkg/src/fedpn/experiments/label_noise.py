"""Aleatoric vs epistemic scores when some classes carry permuted labels."""

import numpy as np

from ..federated import derive_seed
from ..inference import compute_scores
from .metrics import MetricsTable
from .pipeline import make_world, train_world

__all__ = ["run_label_noise_experiment", "group_summary"]


def group_summary(scores, noisy_mask):
    """Mean/std per group for both scores plus the pooled std.

    An empty group reports the pooled statistics, so with no noisy classes
    both groups coincide.
    """
    out = {}
    for name in ("aleatoric", "epistemic"):
        v = np.asarray(scores[name], dtype=np.float64)
        for group, mask in (("clean", ~noisy_mask), ("noisy", noisy_mask)):
            sel = v[mask] if mask.any() else v
            out[f"{name}_{group}_mean"] = float(sel.mean())
            out[f"{name}_{group}_std"] = float(sel.std())
        out[f"{name}_pooled_std"] = float(v.std())
    return out


def run_label_noise_experiment(cfg, noisy_classes=None):
    """Train and personalize the federation on noisy labels, then score each
    client's local model on the test samples of its own classes.

    Returns ``(per_sample_table, summary_dict)``.
    """
    if noisy_classes is None:
        noisy_classes = cfg.experiments.label_noise.noisy_classes
    if noisy_classes is None:
        k = cfg.data.num_classes
        noisy_classes = range(k // 2, k)
    noisy = tuple(int(c) for c in noisy_classes)
    seed = derive_seed(cfg.seed, "label-noise")
    world = train_world(make_world(cfg, seed, noisy))
    y = world.test.labels
    table = MetricsTable("label-noise", ("client", "index", "label", "group", "aleatoric",
                                         "epistemic"),
                         metadata={"noisy_classes": list(noisy), "epistemic_kind": "log-density",
                                   "model": "local"})
    aleatoric, epistemic, noisy_mask = [], [], []
    for c in world.clients:
        # noise permutes labels within the noisy set, so label membership = group
        idx = np.flatnonzero(np.isin(y, sorted(c.classes)))
        sc = compute_scores(c.model, world.test.inputs[idx], "log-density")
        mask = np.isin(y[idx], noisy)
        for i, al, ep, nz in zip(idx, sc.aleatoric, sc.epistemic, mask):
            table.add(client=c.client_id, index=int(i), label=int(y[i]),
                      group="noisy" if nz else "clean", aleatoric=float(al), epistemic=float(ep))
        aleatoric.append(sc.aleatoric)
        epistemic.append(sc.epistemic)
        noisy_mask.append(mask)
    summary = group_summary({"aleatoric": np.concatenate(aleatoric),
                             "epistemic": np.concatenate(epistemic)}, np.concatenate(noisy_mask))
    table.metadata.update(summary)
    return table, summary
