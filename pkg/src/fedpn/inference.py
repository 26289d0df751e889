"""Threshold calibration and the local/global switching predictor.

Score directions: for ``"log-density"`` a higher score means more certain;
for ``"entropy"`` (Dirichlet differential entropy) and ``"aleatoric"``
(expected entropy) a higher score means less certain.  A score lies on the
uncertain side of a threshold when it is at or beyond it, so a threshold
calibrated at rate ``p`` flags exactly ``ceil(p n)`` of ``n`` distinct
calibration scores.
"""

import json
import math
from dataclasses import dataclass

import numpy as np

from .dirichlet import aleatoric_expected_entropy, epistemic_entropy
from .errors import ContractError

__all__ = [
    "EPISTEMIC_KINDS",
    "OUTCOMES",
    "SCENARIOS",
    "UncertaintyScores",
    "SwitchPolicy",
    "SwitchDecision",
    "SwitchResult",
    "calibrate_threshold",
    "is_uncertain",
    "compute_scores",
    "epistemic_score",
    "aleatoric_score",
    "calibrate_policies",
    "switch_arrays",
    "switch_predict",
    "save_policies",
    "load_policies",
]

EPISTEMIC_KINDS = ("log-density", "entropy")
_ALL_KINDS = EPISTEMIC_KINDS + ("aleatoric",)
OUTCOMES = ("local-prediction", "global-prediction", "abstain")
SCENARIOS = ("known-knowns", "known-unknowns", "unknown-knowns", "unknown-unknowns")
MIN_CALIBRATION = 10


def _check_kind(kind, allowed=_ALL_KINDS):
    if kind not in allowed:
        raise ContractError(f"unknown score kind {kind!r}; expected one of {allowed}")


def calibrate_threshold(scores, p_outlier=0.10, kind="log-density"):
    """Order-statistic threshold: the ``ceil(p n)``-th most uncertain score."""
    _check_kind(kind)
    s = np.asarray(scores, dtype=np.float64).ravel()
    if s.size == 0:
        raise ContractError("calibration set is empty")
    if s.size < MIN_CALIBRATION:
        raise ContractError(f"need at least {MIN_CALIBRATION} calibration scores, got {s.size}")
    if not np.all(np.isfinite(s)):
        raise ContractError("calibration scores must be finite")
    if not 0.0 < p_outlier <= 1.0:
        raise ContractError("p_outlier must lie in (0, 1]")
    k = math.ceil(p_outlier * s.size - 1e-12)
    ordered = np.sort(s)
    return float(ordered[k - 1] if kind == "log-density" else ordered[-k])


def is_uncertain(scores, tau, kind):
    """Boolean mask of scores on the uncertain (OOD) side of ``tau``."""
    _check_kind(kind)
    s = np.asarray(scores, dtype=np.float64)
    return s <= tau if kind == "log-density" else s >= tau


@dataclass(frozen=True)
class UncertaintyScores:
    kind: str
    epistemic: np.ndarray
    aleatoric: np.ndarray
    log_density: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        _check_kind(self.kind, EPISTEMIC_KINDS)

    @property
    def prediction(self):
        return np.argmax(self.probs, axis=1)


def compute_scores(model, x, kind="log-density"):
    """Embed once and derive every score for a batch of inputs."""
    _check_kind(kind, EPISTEMIC_KINDS)
    _, log_density, probs, alpha = model.dirichlet(np.atleast_2d(x))
    epi = log_density if kind == "log-density" else epistemic_entropy(alpha)
    return UncertaintyScores(kind, np.asarray(epi), aleatoric_expected_entropy(alpha),
                             log_density, probs)


def _unbatch(x, values):
    return float(values[0]) if np.ndim(x) == 1 else values


def epistemic_score(model, x, kind="log-density"):
    return _unbatch(x, compute_scores(model, x, kind).epistemic)


def aleatoric_score(model, x):
    return _unbatch(x, compute_scores(model, x).aleatoric)


@dataclass(frozen=True)
class SwitchPolicy:
    """Per-client thresholds.  ``None`` disables global or aleatoric abstention."""

    kind: str = "log-density"
    tau_local: float = None
    tau_global: float = None
    tau_aleatoric: float = None
    p_outlier: float = 0.10

    def __post_init__(self):
        _check_kind(self.kind, EPISTEMIC_KINDS)
        for name in ("tau_local", "tau_global", "tau_aleatoric"):
            v = getattr(self, name)
            if v is not None and not math.isfinite(v):
                raise ContractError(f"{name} must be finite")

    @property
    def calibrated(self):
        return self.tau_local is not None


@dataclass(frozen=True)
class SwitchDecision:
    outcome: str
    scenario: str
    predicted: int
    scores: dict

    def __post_init__(self):
        expected = {"known-knowns": "local-prediction", "known-unknowns": "abstain",
                    "unknown-knowns": "global-prediction", "unknown-unknowns": "abstain"}
        if expected.get(self.scenario) != self.outcome:
            raise ContractError(f"scenario {self.scenario!r} inconsistent with {self.outcome!r}")


@dataclass(frozen=True)
class SwitchResult:
    """Vectorised switching output; ``prediction`` is -1 where abstaining."""

    outcome: np.ndarray
    scenario: np.ndarray
    prediction: np.ndarray
    local: UncertaintyScores
    glob: UncertaintyScores


def calibrate_policies(local_models, calibration_sets, global_model, kind="log-density",
                       p_outlier=0.10, global_abstention=True, aleatoric_p=None):
    """One policy per client; the global threshold uses pooled calibration scores.

    ``local_models`` and ``calibration_sets`` are parallel mappings keyed by
    client id; calibration sets expose ``inputs``.
    """
    tau_global = None
    if global_abstention:
        pooled = np.concatenate([compute_scores(global_model, calibration_sets[c].inputs,
                                                kind).epistemic for c in calibration_sets])
        tau_global = calibrate_threshold(pooled, p_outlier, kind)
    policies = {}
    for cid, model in local_models.items():
        sc = compute_scores(model, calibration_sets[cid].inputs, kind)
        tau_al = None if aleatoric_p is None else calibrate_threshold(sc.aleatoric, aleatoric_p,
                                                                      "aleatoric")
        policies[cid] = SwitchPolicy(kind, calibrate_threshold(sc.epistemic, p_outlier, kind),
                                     tau_global, tau_al, p_outlier)
    return policies


def switch_arrays(local_model, global_model, policy, x):
    """Decision tree over a batch.

    Locally certain inputs stay local (abstaining on high aleatoric score if
    enabled); the rest go to the global model, which abstains when its own
    epistemic score is on the uncertain side of ``tau_global``.
    """
    if not policy.calibrated:
        raise ContractError("policy is not calibrated")
    loc = compute_scores(local_model, x, policy.kind)
    glo = compute_scores(global_model, x, policy.kind)
    local_ok = ~is_uncertain(loc.epistemic, policy.tau_local, policy.kind)
    ambiguous = np.zeros_like(local_ok)
    if policy.tau_aleatoric is not None:
        ambiguous = is_uncertain(loc.aleatoric, policy.tau_aleatoric, "aleatoric")
    global_ok = np.ones_like(local_ok)
    if policy.tau_global is not None:
        global_ok = ~is_uncertain(glo.epistemic, policy.tau_global, policy.kind)
    scenario = np.where(local_ok, np.where(ambiguous, 1, 0), np.where(global_ok, 2, 3))
    outcome = np.array([0, 2, 1, 2])[scenario]
    pred = np.where(outcome == 0, loc.prediction, np.where(outcome == 1, glo.prediction, -1))
    return SwitchResult(outcome, scenario, pred, loc, glo)


def switch_predict(local_model, global_model, policy, x):
    """Per-input :class:`SwitchDecision`; a single decision for a 1-D input."""
    res = switch_arrays(local_model, global_model, policy, np.atleast_2d(x))
    decisions = []
    for i in range(len(res.outcome)):
        scores = {"local_epistemic": float(res.local.epistemic[i]),
                  "local_aleatoric": float(res.local.aleatoric[i]),
                  "global_epistemic": float(res.glob.epistemic[i])}
        decisions.append(SwitchDecision(OUTCOMES[res.outcome[i]], SCENARIOS[res.scenario[i]],
                                        int(res.prediction[i]), scores))
    return decisions[0] if np.ndim(x) == 1 else decisions


def save_policies(policies, path):
    """Per-client threshold table plus the shared global threshold, as JSON."""
    globals_ = {p.tau_global for p in policies.values()}
    if len(globals_) > 1:
        raise ContractError("policies disagree on the global threshold")
    doc = {"tau_global": globals_.pop() if globals_ else None,
           "clients": [{"client_id": int(cid), "kind": p.kind, "tau_local": p.tau_local,
                        "tau_aleatoric": p.tau_aleatoric, "p_outlier": p.p_outlier}
                       for cid, p in sorted(policies.items())]}
    with open(path, "x") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_policies(path):
    with open(path) as fh:
        doc = json.load(fh)
    out = {}
    for row in doc["clients"]:
        row = dict(row)
        cid = row.pop("client_id")
        out[cid] = SwitchPolicy(tau_global=doc["tau_global"], **row)
    return out
