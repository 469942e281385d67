"""Command line front end.

Four subcommands: ``mpdl`` (accuracy table over co-occurrence
fractions), ``privacy-sweep`` (accuracy and inference error against the
privacy budget), ``graph`` (link-prediction AUC over co-occurrence
fractions) and ``selftest`` (built-in oracle checks).  Settings resolve
as CLI flags over config-file entries over built-in defaults; the seed
additionally falls back to the MPDL_SEED environment variable.  Every
output CSV embeds the resolved configuration and a content hash of the
input files, and identical settings produce byte-identical files.

Exit codes: 0 success, 1 selftest failure, 2 invalid configuration,
3 protocol violation, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys

import numpy as np

from .orchestrator import MpdlConfig, mpdl_train, prepare_experiment
from .transport import ProtocolError

DEFAULTS = {
    "gamma": 0.1,
    "gammas": "0.05,0.1,0.2,0.4,0.6,0.8",
    "epsilon": 0.5,
    "epsilons": "0.1,0.5,1,2,inf",
    "sensitivity_mode": "per_neuron",
    "lam": 0.01,
    "lr": 0.1,
    "folds": 5,
    "threshold": 0.15,
    "max_iters": 2,
    "dual_epochs": 10,
    "central_epochs": 20,
    "batch_size": 32,
    "test_fraction": 0.1,
    "key_bits": 512,
    "repeats": 3,
    "seed": 0,
    "holdout_fraction": 0.2,
    "synthetic_nodes": 150,
    "id_column": None,
    "label_column": "label",
    "no_encryption": False,
    "exact_duality_grad": False,
    "unsafe_audit": False,
}

_FLOAT_KEYS = {"gamma", "epsilon", "lam", "lr", "threshold", "test_fraction",
               "holdout_fraction"}
_INT_KEYS = {"folds", "max_iters", "dual_epochs", "central_epochs",
             "batch_size", "key_bits", "repeats", "seed", "synthetic_nodes"}
_BOOL_KEYS = {"no_encryption", "exact_duality_grad", "unsafe_audit"}


def content_hash(path: str) -> str:
    """Git blob hash of a file: sha1 over 'blob <len>\\0' + bytes."""
    with open(path, "rb") as fh:
        raw = fh.read()
    return hashlib.sha1(b"blob %d\0" % len(raw) + raw).hexdigest()


def parse_float(text: str) -> float:
    if text.strip().lower() in ("inf", "infinity"):
        return math.inf
    return float(text)


def parse_list(text: str) -> list[float]:
    return [parse_float(part) for part in text.split(",") if part.strip()]


def read_config_file(path: str) -> dict:
    """Flat ``key = value`` lines; '#' starts a comment."""
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, value = (part.strip() for part in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in DEFAULTS:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            if key in _FLOAT_KEYS:
                out[key] = parse_float(value)
            elif key in _INT_KEYS:
                out[key] = int(value)
            elif key in _BOOL_KEYS:
                out[key] = value.lower() in ("1", "true", "yes", "on")
            else:
                out[key] = value
    return out


def resolve_settings(args: argparse.Namespace) -> dict:
    """defaults < MPDL_SEED env < config file < explicit CLI flags."""
    settings = dict(DEFAULTS)
    env_seed = os.environ.get("MPDL_SEED")
    if env_seed is not None:
        settings["seed"] = int(env_seed)
    if getattr(args, "config", None):
        settings.update(read_config_file(args.config))
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    return settings


def build_config(settings: dict, gamma: float, epsilon: float,
                 seed: int) -> MpdlConfig:
    return MpdlConfig(
        gamma=gamma, epsilon=epsilon,
        sensitivity_mode=settings["sensitivity_mode"],
        lam=settings["lam"], lr=settings["lr"], folds=settings["folds"],
        threshold=settings["threshold"], max_iters=settings["max_iters"],
        dual_epochs=settings["dual_epochs"],
        central_epochs=settings["central_epochs"],
        batch_size=settings["batch_size"],
        test_fraction=settings["test_fraction"],
        key_bits=settings["key_bits"],
        use_encryption=not settings["no_encryption"],
        exact_duality_grad=settings["exact_duality_grad"], seed=seed)


def write_csv(path: str, settings: dict, input_hash: str, header: list[str],
              rows: list[list]) -> None:
    def fmt(v) -> str:
        if isinstance(v, float):
            return "inf" if math.isinf(v) else repr(v)
        return str(v)

    resolved = {k: ("inf" if isinstance(v, float) and math.isinf(v) else v)
                for k, v in sorted(settings.items())}
    lines = [f"# config: {json.dumps(resolved, sort_keys=True)}",
             f"# inputs: {input_hash}", ",".join(header)]
    lines += [",".join(fmt(v) for v in row) for row in rows]
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(settings: dict, path: str):
    from .data import load_normalize
    return load_normalize(path, id_column=settings["id_column"],
                          label_column=settings["label_column"])


def _run_batch(ds, settings: dict, gamma: float, epsilon: float):
    """Mean/std of the three accuracies and the MAE over repeats."""
    keys = ("accuracy_joint", "accuracy_dual", "accuracy_unlabeled",
            "inference_mae")
    stats = {k: [] for k in keys}
    for r in range(settings["repeats"]):
        seed = settings["seed"] + r
        data = prepare_experiment(ds, gamma, seed=seed,
                                  test_fraction=settings["test_fraction"])
        config = build_config(settings, gamma, epsilon, seed)
        report = mpdl_train(data, config).report
        for k in keys:
            stats[k].append(getattr(report, k))
    return {k: (float(np.mean(v)), float(np.std(v)))
            for k, v in stats.items()}


def cmd_mpdl(args: argparse.Namespace) -> int:
    settings = resolve_settings(args)
    ds = load_dataset(settings, args.dataset)
    if getattr(args, "gamma", None) is not None:
        settings["gammas"] = repr(args.gamma)
    rows = []
    for gamma in parse_list(settings["gammas"]):
        stats = _run_batch(ds, settings, gamma, settings["epsilon"])
        for method, key in (("joint_T", "accuracy_joint"),
                            ("dual_T", "accuracy_dual"),
                            ("MPDL_A", "accuracy_unlabeled")):
            mean, std = stats[key]
            rows.append([gamma, method, mean, std, settings["repeats"]])
    write_csv(args.out, settings, content_hash(args.dataset),
              ["gamma", "method", "accuracy_mean", "accuracy_std",
               "repeats"], rows)
    return 0


def cmd_privacy_sweep(args: argparse.Namespace) -> int:
    settings = resolve_settings(args)
    ds = load_dataset(settings, args.dataset)
    rows = []
    for epsilon in parse_list(settings["epsilons"]):
        stats = _run_batch(ds, settings, settings["gamma"], epsilon)
        acc_mean, acc_std = stats["accuracy_dual"]
        mae_mean, mae_std = stats["inference_mae"]
        rows.append([epsilon, acc_mean, acc_std, mae_mean, mae_std,
                     settings["repeats"]])
    write_csv(args.out, settings, content_hash(args.dataset),
              ["epsilon", "accuracy_mean", "accuracy_std", "mae_mean",
               "mae_std", "repeats"], rows)
    return 0


def cmd_graph(args: argparse.Namespace) -> int:
    from .data import SplitSpec, load_normalize, split_by_gamma
    from .density import fit_kde
    from .dual import DualPartyState, run_dual_round
    from .graph import link_prediction_auc
    from .nn import dual_hidden_width, init_mlp
    from .orchestrator import _rng_int
    from .paillier import keygen
    from .data import PartyDataset, partition_features
    from random import Random

    settings = resolve_settings(args)
    if args.edges and args.features:
        feats = load_normalize(args.features, id_column=settings["id_column"],
                               label_column=None)
        index = {i: k for k, i in enumerate(feats.ids)}
        n = len(feats.ids)
        adj = np.zeros((n, n), dtype=np.int8)
        with open(args.edges) as fh:
            for line in fh:
                parts = line.split()
                if len(parts) != 2:
                    continue
                u, v = (index[p] for p in parts)
                adj[u, v] = adj[v, u] = 1
        ds = PartyDataset(feats.ids, feats.features,
                          np.zeros(n, dtype=np.int64))
        input_hash = f"{content_hash(args.edges)},{content_hash(args.features)}"
    else:
        from .synthetic import linked_graph
        ds, adj = linked_graph(settings["synthetic_nodes"], 4, 4,
                               seed=settings["seed"])
        input_hash = "synthetic"

    rows = []
    for gamma in parse_list(settings["gammas"]):
        aucs = []
        for r in range(settings["repeats"]):
            seed = settings["seed"] + r
            rng = np.random.default_rng(seed)
            fsplit = partition_features(ds, seed=seed)
            gsplit = split_by_gamma(ds.ids, SplitSpec(gamma, 0.0, seed))
            co = list(gsplit.co_occurrence)
            idx = {i: k for k, i in enumerate(ds.ids)}
            has_a = np.zeros(len(ds.ids), dtype=bool)
            has_b = np.zeros(len(ds.ids), dtype=bool)
            for i in co + list(gsplit.a_only):
                has_a[idx[i]] = True
            for i in co + list(gsplit.b_only):
                has_b[idx[i]] = True

            key_rng = Random(seed)
            keys_a = keygen(settings["key_bits"], key_rng)
            keys_b = keygen(settings["key_bits"], key_rng)
            fa_co = fsplit.party_a.rows(co)
            fb_co = fsplit.party_b.rows(co)
            d_a = fa_co.shape[1]
            d_b = fb_co.shape[1]
            state_a = DualPartyState(
                "A", PartyDataset(tuple(co), fa_co), fit_kde(fa_co),
                init_mlp([d_a, dual_hidden_width(d_a, d_b), d_b],
                         ["relu", "identity"], rng),
                keys_a, keys_b.public, settings["lam"], settings["lr"])
            state_b = DualPartyState(
                "B", PartyDataset(tuple(co), fb_co), fit_kde(fb_co),
                init_mlp([d_b, dual_hidden_width(d_b, d_a), d_a],
                         ["relu", "identity"], rng),
                keys_b, keys_a.public, settings["lam"], settings["lr"])
            proto_rng = Random(seed + 1)
            from .transport import Hub
            hub = Hub()
            for _ in range(settings["dual_epochs"]):
                order = rng.permutation(len(co))
                for start in range(0, len(co), settings["batch_size"]):
                    batch = [co[k] for k in
                             order[start:start + settings["batch_size"]]]
                    run_dual_round(state_a, state_b, batch, hub, proto_rng,
                                   use_encryption=not
                                   settings["no_encryption"])
            from .dual import DualModelPair
            pair = DualModelPair(state_a.model, state_b.model)
            auc = link_prediction_auc(
                pair, adj, fsplit.party_a.features, fsplit.party_b.features,
                has_a, has_b, settings["holdout_fraction"], rng)
            aucs.append(auc)
            hub.close()
        rows.append([gamma, float(np.mean(aucs)), float(np.std(aucs)),
                     settings["repeats"]])
    write_csv(args.out, settings, input_hash,
              ["gamma", "auc_mean", "auc_std", "repeats"], rows)
    return 0


def cmd_selftest(args: argparse.Namespace) -> int:
    from .selftest import run_selftest
    return run_selftest()


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mpdl", description="multi-party dual learning simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, dataset=True):
        if dataset:
            p.add_argument("--dataset", required=True,
                           help="headered CSV with features and a label")
            p.add_argument("--id-column", dest="id_column")
            p.add_argument("--label-column", dest="label_column")
        p.add_argument("--config", help="key = value settings file")
        p.add_argument("--out", required=True, help="output CSV path")
        p.add_argument("--seed", type=int)
        p.add_argument("--repeats", type=int)
        p.add_argument("--epsilon", type=parse_float)
        p.add_argument("--sensitivity-mode", dest="sensitivity_mode",
                       choices=("per_layer", "per_neuron"))
        p.add_argument("--lam", type=float)
        p.add_argument("--lr", type=float)
        p.add_argument("--folds", type=int)
        p.add_argument("--threshold", type=float)
        p.add_argument("--max-iters", dest="max_iters", type=int)
        p.add_argument("--dual-epochs", dest="dual_epochs", type=int)
        p.add_argument("--central-epochs", dest="central_epochs", type=int)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--test-fraction", dest="test_fraction", type=float)
        p.add_argument("--key-bits", dest="key_bits", type=int)
        p.add_argument("--no-encryption", dest="no_encryption",
                       action="store_const", const=True)
        p.add_argument("--exact-duality-grad", dest="exact_duality_grad",
                       action="store_const", const=True)
        p.add_argument("--unsafe-audit", dest="unsafe_audit",
                       action="store_const", const=True)

    p_mpdl = sub.add_parser("mpdl", help="accuracy table over gammas")
    add_common(p_mpdl)
    p_mpdl.add_argument("--gammas", help="comma-separated grid")
    p_mpdl.add_argument("--gamma", type=float,
                        help="single value; overrides --gammas")
    p_mpdl.set_defaults(func=cmd_mpdl)

    p_sweep = sub.add_parser("privacy-sweep",
                             help="accuracy and inference MAE per epsilon")
    add_common(p_sweep)
    p_sweep.add_argument("--gamma", type=float)
    p_sweep.add_argument("--epsilons")
    p_sweep.set_defaults(func=cmd_privacy_sweep)

    p_graph = sub.add_parser("graph", help="link prediction AUC over gammas")
    add_common(p_graph, dataset=False)
    p_graph.add_argument("--edges", help="edge list: one 'src dst' per line")
    p_graph.add_argument("--features", help="node feature CSV")
    p_graph.add_argument("--id-column", dest="id_column")
    p_graph.add_argument("--gammas")
    p_graph.add_argument("--holdout-fraction", dest="holdout_fraction",
                         type=float)
    p_graph.add_argument("--synthetic-nodes", dest="synthetic_nodes",
                         type=int)
    p_graph.set_defaults(func=cmd_graph)

    p_self = sub.add_parser("selftest", help="run the built-in oracle checks")
    p_self.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ProtocolError as exc:
        print(f"protocol violation: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"i/o failure: {exc}", file=sys.stderr)
        return 4
    except (ValueError, OverflowError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
