"""Local vs global vs switching accuracy on InD, OOD and a 50/50 mix."""

from dataclasses import dataclass

import numpy as np

from ..federated import derive_seed
from ..inference import calibrate_policies, switch_arrays
from .metrics import MetricsTable, accuracy, per_class_accuracy_matrix
from .pipeline import make_world, train_world

__all__ = ["SwitchingResult", "run_switching_benchmark", "mix_indices", "evaluate_world"]

MODELS = ("local", "global", "switch")
SPLITS = ("InD", "OOD", "Mix")


@dataclass
class SwitchingResult:
    table: MetricsTable
    summary: MetricsTable
    matrices: dict
    client_classes: dict = None

    def mean(self, model, split):
        (row,) = self.summary.where(model=model, split=split)
        return row["accuracy"]


def mix_indices(ind_idx, ood_idx, rng):
    """Equal-sized InD and OOD halves: the larger side is subsampled."""
    n = min(len(ind_idx), len(ood_idx))
    return np.concatenate([rng.choice(ind_idx, n, replace=False),
                           rng.choice(ood_idx, n, replace=False)])


def _predictions(world, policy_map):
    x = world.test.inputs
    glob = world.global_model.predict(x)
    local, switch = [], []
    for c in world.clients:
        res = switch_arrays(c.model, world.global_model, policy_map[c.client_id], x)
        local.append(res.local.prediction)
        switch.append(res.prediction)
    return local, glob, switch


def evaluate_world(world, cfg, seed, table, policies=None):
    """Per-client rows for one trained world; returns the three accuracy matrices.

    Policies are calibrated from the clients' calibration splits unless given.
    """
    p = cfg.policy
    policies = policies or calibrate_policies({c.client_id: c.model for c in world.clients},
                                  {c.client_id: c.calibration for c in world.clients},
                                  world.global_model, p.kind, p.p_outlier,
                                  p.global_abstention, p.aleatoric_p)
    local, glob, switch = _predictions(world, policies)
    y = world.test.labels
    k = world.test.num_classes
    for c, loc_pred, sw_pred in zip(world.clients, local, switch):
        ind = np.flatnonzero(np.isin(y, sorted(c.classes)))
        ood = np.flatnonzero(~np.isin(y, sorted(c.classes)))
        mix = mix_indices(ind, ood, np.random.default_rng(derive_seed(seed, "mix", c.client_id)))
        preds = {"local": loc_pred, "global": glob, "switch": sw_pred}
        for model in MODELS:
            for name, idx in zip(SPLITS, (ind, ood, mix)):
                table.add(seed=seed, client=c.client_id, model=model, split=name,
                          accuracy=accuracy(preds[model][idx], y[idx]), n=len(idx))
    return {
        "global": per_class_accuracy_matrix("global", [glob] * len(world.clients), y, k),
        "local": per_class_accuracy_matrix("local", local, y, k),
        "switch": per_class_accuracy_matrix("switch", switch, y, k),
    }


def run_switching_benchmark(cfg, progress=None):
    """Full pipeline per seed, then client- and seed-averaged accuracies."""
    table = MetricsTable("switching", ("seed", "client", "model", "split", "accuracy", "n"))
    matrices, classes = {}, {}
    n_seeds = cfg.experiments.switching.seeds
    for s in range(n_seeds):
        seed = derive_seed(cfg.seed, "switching", s)
        world = train_world(make_world(cfg, seed))
        matrices[seed] = evaluate_world(world, cfg, seed, table)
        classes[seed] = [sorted(c.classes) for c in world.clients]
        if progress:
            progress(s + 1, n_seeds)
    summary = MetricsTable("switching-summary", ("model", "split", "accuracy", "std", "seeds"),
                           metadata={"seed": cfg.seed})
    for model in MODELS:
        for name in SPLITS:
            per_seed = [np.mean([r["accuracy"] for r in table.where(seed=sd, model=model, split=name)])
                        for sd in matrices]
            summary.add(model=model, split=name, accuracy=float(np.mean(per_seed)),
                        std=float(np.std(per_seed)), seeds=len(per_seed))
    return SwitchingResult(table, summary, matrices, classes)
