"""Command-line entry point.

Pipeline commands share one run directory (``--out``):

    fedpn train-federated --out run/   # run/federated/
    fedpn personalize --out run/       # run/personal/
    fedpn calibrate --out run/         # run/calibration/
    fedpn evaluate --out run/          # run/evaluation/

``train-federated`` stores the resolved configuration in ``run/config.json``;
later stages start from it and refuse overrides that would change the data,
model, federation, loss or seed.  Every stage directory is write-once.

Exit codes: 0 success, 1 computation error, 2 bad configuration or a
missing prerequisite.
"""

import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from . import __version__
from . import config as C
from .errors import ContractError
from .experiments import (
    run_label_noise_experiment,
    run_precision_filter_experiment,
    run_switching_benchmark,
    run_toy_loss_experiment,
    write_table,
)
from .experiments.metrics import MetricsTable
from .experiments.pipeline import make_world
from .experiments.switching import evaluate_world
from .federated import local_personalization_stage, run_federated_training
from .inference import calibrate_policies, load_policies, save_policies
from .models import PosteriorNetwork, flatten_params, load_bundle, save_bundle, unflatten_params

log = logging.getLogger("fedpn")

EXIT_OK, EXIT_FAILURE, EXIT_PREREQ = 0, 1, 2
_FROZEN_SECTIONS = ("seed", "data", "model", "federation", "loss")


class MissingPrerequisite(Exception):
    pass


def _manifest(cfg, stage, extra=None):
    doc = {"stage": stage, "config": cfg.model_dump(mode="json"), "config_hash": C.config_hash(cfg),
           "seed": cfg.seed, "code_version": __version__,
           "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())}
    doc.update(extra or {})
    return doc


def _write_json(path, doc):
    with open(path, "x") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _stage_dir(run, name):
    path = os.path.join(run, name)
    if os.path.exists(path):
        raise FileExistsError(f"{path} already exists; stage outputs are write-once")
    os.makedirs(path)
    return path


def _require(path, hint):
    if not os.path.exists(path):
        raise MissingPrerequisite(f"missing {path}; run `fedpn {hint}` first")
    return path


def _run_config(args):
    """Stored run config overlaid with this invocation's layers."""
    stored_path = _require(os.path.join(args.out, "config.json"), "train-federated")
    with open(stored_path) as fh:
        stored = json.load(fh)
    cfg = C.load_config(args.config, None, args.set, args.seed, args.out, base=stored)
    dumped = cfg.model_dump(mode="json")
    changed = [k for k in _FROZEN_SECTIONS if dumped[k] != stored[k]]
    if changed:
        raise C.ConfigError(f"cannot change {', '.join(changed)} after train-federated")
    return cfg


def _deterministic(cfg, args):
    if args.deterministic and cfg.federation.workers != 1:
        return cfg.model_copy(update={"federation": cfg.federation.model_copy(update={"workers": 1})})
    return cfg


def _load_world_with(cfg, params_for):
    world = make_world(cfg, cfg.seed)
    for c in world.clients:
        c.model = PosteriorNetwork(world.arch, params_for(c.client_id), c.class_prior)
    return world


def _read_params(path, arch):
    shapes = PosteriorNetwork.create(arch, 0).param_shapes()
    return unflatten_params(load_bundle(path), shapes)


def cmd_train_federated(args):
    cfg = C.load_config(args.config, None, args.set, args.seed, args.out)
    cfg = _deterministic(cfg, args)
    out = _stage_dir(cfg.out, "federated")
    world = make_world(cfg, cfg.seed)
    every = cfg.federation.checkpoint_every
    ckpt_dir = os.path.join(out, "checkpoints")

    def progress(server):
        log.info("round %d loss %.4f", server.round, server.history[-1]["loss"])
        if every and server.round % every == 0:
            os.makedirs(ckpt_dir, exist_ok=True)
            save_bundle(flatten_params(server.model.params),
                        os.path.join(ckpt_dir, f"round-{server.round:04d}.bundle"))

    server, _ = run_federated_training(world.fed, world.arch, world.clients, progress)
    save_bundle(flatten_params(server.model.params), os.path.join(out, "global.bundle"))
    _write_json(os.path.join(out, "history.json"), server.history)
    _write_json(os.path.join(out, "manifest.json"), _manifest(cfg, "train-federated", {
        "rounds": server.round, "encoder_digest": server.model.digest("encoder")}))
    if not os.path.exists(os.path.join(cfg.out, "config.json")):
        _write_json(os.path.join(cfg.out, "config.json"), cfg.model_dump(mode="json"))
    print(f"federated model written to {out}")
    return EXIT_OK


def cmd_personalize(args):
    cfg = _deterministic(_run_config(args), args)
    glob_path = _require(os.path.join(cfg.out, "federated", "global.bundle"), "train-federated")
    arch = C.architecture(cfg)
    global_params = _read_params(glob_path, arch)
    out = _stage_dir(cfg.out, "personal")
    world = _load_world_with(cfg, lambda _: {k: v.copy() for k, v in global_params.items()})
    before = PosteriorNetwork(arch, global_params).digest("encoder")
    local_personalization_stage(world.clients, world.fed)
    digests = {}
    for c in world.clients:
        if c.model.digest("encoder") != before:
            raise ContractError(f"client {c.client_id} encoder changed during personalization")
        save_bundle(flatten_params(c.model.params), os.path.join(out, f"client-{c.client_id:03d}.bundle"))
        digests[c.client_id] = c.model.digest("flow")
    _write_json(os.path.join(out, "manifest.json"), _manifest(cfg, "personalize", {
        "encoder_digest": before, "flow_digests": digests}))
    print(f"personalized models written to {out}")
    return EXIT_OK


def _personal_world(cfg):
    arch = C.architecture(cfg)
    pdir = os.path.join(cfg.out, "personal")
    _require(os.path.join(pdir, "manifest.json"), "personalize")
    glob = _read_params(os.path.join(cfg.out, "federated", "global.bundle"), arch)
    world = _load_world_with(
        cfg, lambda i: _read_params(_require(os.path.join(pdir, f"client-{i:03d}.bundle"),
                                             "personalize"), arch))

    class _Server:
        model = PosteriorNetwork(arch, glob)

    world.server = _Server()
    return world


def cmd_calibrate(args):
    cfg = _run_config(args)
    _require(os.path.join(cfg.out, "federated", "global.bundle"), "train-federated")
    world = _personal_world(cfg)
    out = _stage_dir(cfg.out, "calibration")
    p = cfg.policy
    policies = calibrate_policies({c.client_id: c.model for c in world.clients},
                                  {c.client_id: c.calibration for c in world.clients},
                                  world.global_model, p.kind, p.p_outlier, p.global_abstention,
                                  p.aleatoric_p)
    save_policies(policies, os.path.join(out, "policies.json"))
    _write_json(os.path.join(out, "manifest.json"), _manifest(cfg, "calibrate"))
    print(f"thresholds written to {out}")
    return EXIT_OK


def cmd_evaluate(args):
    cfg = _run_config(args)
    _require(os.path.join(cfg.out, "federated", "global.bundle"), "train-federated")
    _require(os.path.join(cfg.out, "calibration", "policies.json"), "calibrate")
    world = _personal_world(cfg)
    policies = load_policies(os.path.join(cfg.out, "calibration", "policies.json"))
    out = _stage_dir(cfg.out, "evaluation")
    table = MetricsTable("evaluation", ("seed", "client", "model", "split", "accuracy", "n"))
    matrices = evaluate_world(world, cfg, cfg.seed, table, policies)
    summary = MetricsTable("evaluation-summary", ("model", "split", "accuracy"))
    for model in ("local", "global", "switch"):
        for split in ("InD", "OOD", "Mix"):
            rows = table.where(model=model, split=split)
            summary.add(model=model, split=split,
                        accuracy=float(np.mean([r["accuracy"] for r in rows])))
    mtable = MetricsTable("evaluation-matrices", ("family", "client", "class", "accuracy", "n"))
    for m in matrices.values():
        for rec in m.records():
            mtable.add(**rec)
    h = C.config_hash(cfg)
    dump = cfg.model_dump(mode="json")
    for t in (table, summary, mtable):
        write_table(t, out, h, dump, cfg.seed)
    _print_summary(summary)
    return EXIT_OK


def _print_summary(summary):
    print(f"{'model':<8}{'InD':>8}{'OOD':>8}{'Mix':>8}")
    for model in ("local", "global", "switch"):
        vals = [summary.where(model=model, split=s)[0]["accuracy"] for s in ("InD", "OOD", "Mix")]
        print(f"{model:<8}" + "".join(f"{100 * v:8.1f}" for v in vals))


def cmd_experiment(args):
    cfg = C.load_config(args.config, args.name, args.set, args.seed, args.out,
                        use_preset=not args.no_preset)
    cfg = _deterministic(cfg, args)
    out = os.path.join(cfg.out, "experiments")
    h = C.config_hash(cfg)
    dump = cfg.model_dump(mode="json")
    tables = []
    if args.name == "toy-loss":
        summary, runs = run_toy_loss_experiment(
            cfg, progress=lambda loss, k, s: log.info("toy %s K=%d seed=%d", loss, k, s))
        tables = [summary, runs]
    elif args.name == "switching":
        res = run_switching_benchmark(cfg, progress=lambda i, n: log.info("seed %d/%d", i, n))
        mtable = MetricsTable("switching-matrices",
                              ("seed", "family", "client", "class", "accuracy", "n"))
        for seed, fams in res.matrices.items():
            for m in fams.values():
                for rec in m.records():
                    mtable.add(seed=seed, **rec)
        tables = [res.summary, res.table, mtable]
        _print_summary(res.summary)
    elif args.name == "label-noise":
        table, summary = run_label_noise_experiment(cfg)
        tables = [table]
        for k in sorted(summary):
            print(f"{k}: {summary[k]:.4f}")
    else:
        table = run_precision_filter_experiment(cfg)
        tables = [table]
        for r in table.rows:
            print(f"filtered {r['fraction']:.2f}: precision {100 * r['precision']:.1f}")
    for t in tables:
        paths = write_table(t, out, h, dump, cfg.seed)
        print(f"wrote {paths['csv']}")
    return EXIT_OK


def _common(p):
    p.add_argument("--config", help="YAML configuration file")
    p.add_argument("--seed", type=int, help="master seed (overrides the file)")
    p.add_argument("--out", help="output / run directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value by dotted key path; repeatable")
    p.add_argument("--deterministic", action="store_true",
                   help="force the single-threaded reference mode")


def build_parser():
    parser = argparse.ArgumentParser(prog="fedpn", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"fedpn {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, text in (
        ("train-federated", cmd_train_federated, "run the federated stage"),
        ("personalize", cmd_personalize, "retrain local flows and heads"),
        ("calibrate", cmd_calibrate, "compute switching thresholds"),
        ("evaluate", cmd_evaluate, "local/global/switch accuracy tables"),
    ):
        p = sub.add_parser(name, help=text)
        _common(p)
        p.set_defaults(func=fn)
    p = sub.add_parser("experiment", help="run a packaged experiment")
    p.add_argument("name", choices=("toy-loss", "switching", "label-noise", "precision-filter"))
    p.add_argument("--no-preset", action="store_true",
                   help="do not apply the experiment's desk-scale preset")
    _common(p)
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.out is None and args.command != "experiment":
        args.out = "runs/default"
    try:
        return args.func(args)
    except (C.ConfigError, MissingPrerequisite) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_PREREQ
    except (ContractError, FileExistsError, ArithmeticError, ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
