"""Config-driven experiment runner: ingest -> partition -> run -> evaluate.

Subcommands:
  ingest   parse a ratings source and write a binary dataset snapshot
  run      execute an experiment config (all seeds) and emit metrics CSVs
  eval     reload a run's checkpoints, replay the prediction stage, and
           print the metric report

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import configparser
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .align import (AlignmentMode, build_alignment_map, build_global_index,
                    restrict_alignment)
from .baselines import BaselineConfig, run_alone, run_joint
from .ingest import (load_movielens_100k, load_movielens_1m, parse_ratings,
                     partition_by_genre, partition_uniform, read_snapshot,
                     split_train_test, to_implicit, write_snapshot)
from .objectives import FeedbackKind
from .privacy import PrivacyConfig
from .protocol import (ModelHyper, ProtocolConfig, build_domain_views,
                       evaluate, load_ensemble, predict, run_learning,
                       save_ensemble)
from .transport import DEFAULT_TCP_PORT, InProcessBus, TcpBus, TcpHub


class UsageError(Exception):
    pass


@dataclass
class ExperimentConfig:
    # [data]
    path: str = ""
    format: str = "ml100k"        # ml100k | ml1m | csv | tab_separated |
                                  # double_colon_separated | snapshot
    side_info: bool = False
    # [experiment]
    feedback: str = "explicit"
    alignment: str = "user_aligned"
    partition: str = "genre"      # genre | uniform
    domains: int = 8              # K for the uniform partition
    scenario: str = "mtal"        # mtal | alone | joint
    seeds: tuple = (0, 1, 2, 3)
    train_ratio: float = 0.9
    alignment_fraction: float = 1.0
    bus: str = "inproc"           # inproc | tcp
    tcp_host: str = "127.0.0.1"
    tcp_port: int = DEFAULT_TCP_PORT
    # [mtal]
    rounds: int = 10
    eta_mode: str = ""            # constant | optimized; empty: by feedback
    eta: float = 0.3
    optimize_weights: bool = True
    qn_iters: int = 10
    timeout: float = 600.0
    # [model]
    hidden: tuple = (256, 128)
    dropout: float = 0.5
    epochs: int = 20
    batch_size: int = 100
    lr: float = 1e-3
    weight_decay: float = 5e-4
    # [privacy]
    mechanism: str = "none"
    clip: float = 1.0
    sigma: float = 0.1
    width: float = 0.5

    def resolved(self):
        """Fill feedback-dependent defaults."""
        eta_mode = self.eta_mode or (
            "constant" if self.feedback == "explicit" else "optimized")
        return replace(self, eta_mode=eta_mode)

    @property
    def kind(self):
        return FeedbackKind(self.feedback)

    @property
    def mode(self):
        return AlignmentMode(self.alignment)

    def hyper(self):
        return ModelHyper(hidden=self.hidden, dropout=self.dropout,
                          epochs=self.epochs, batch_size=self.batch_size,
                          lr=self.lr, weight_decay=self.weight_decay)

    def privacy(self, seed):
        return PrivacyConfig(mechanism=self.mechanism, clip=self.clip,
                             sigma=self.sigma, width=self.width,
                             seed=seed).validate()


_SECTIONS = {
    "data": ("path", "format", "side_info"),
    "experiment": ("feedback", "alignment", "partition", "domains", "scenario",
                   "seeds", "train_ratio", "alignment_fraction", "bus",
                   "tcp_host", "tcp_port"),
    "mtal": ("rounds", "eta_mode", "eta", "optimize_weights", "qn_iters",
             "timeout"),
    "model": ("hidden", "dropout", "epochs", "batch_size", "lr",
              "weight_decay"),
    "privacy": ("mechanism", "clip", "sigma", "width"),
}


def load_config(path) -> ExperimentConfig:
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise UsageError(f"cannot read config file {path}")
    cfg = ExperimentConfig()
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    values = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise UsageError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SECTIONS[section]:
                raise UsageError(f"unknown config key {section}.{key}")
            values[key] = _coerce(key, raw, getattr(cfg, key))
    return replace(cfg, **values).resolved()


def _coerce(key, raw, default):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"bad boolean for {key}: {raw!r}")
    if isinstance(default, tuple):
        if not raw:
            return ()
        return tuple(int(x) for x in raw.replace(",", " ").split())
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def write_config_echo(cfg: ExperimentConfig, path):
    parser = configparser.ConfigParser()
    for section, keys in _SECTIONS.items():
        parser[section] = {}
        for key in keys:
            value = getattr(cfg, key)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            parser[section][key] = str(value)
    with open(path, "w") as fh:
        parser.write(fh)


# ---------------------------------------------------------------------------
# Dataset preparation
# ---------------------------------------------------------------------------

def load_source(cfg: ExperimentConfig):
    """Load the configured source; returns (dataset, genre_flags_or_None)."""
    if not cfg.path:
        raise UsageError("config is missing data.path")
    path = Path(cfg.path)
    if not path.exists():
        raise FileNotFoundError(f"dataset path does not exist: {path}")
    if cfg.format == "ml100k":
        return load_movielens_100k(path)
    if cfg.format == "ml1m":
        return load_movielens_1m(path)
    if cfg.format == "snapshot":
        return read_snapshot(path), None
    if cfg.format in ("csv", "tab_separated", "double_colon_separated"):
        return parse_ratings(path, cfg.format), None
    raise UsageError(f"unknown data format {cfg.format!r}")


def prepare_seed(cfg: ExperimentConfig, seed, seed_dir: Path, reuse=False):
    """Split (or reload), partition, align; returns (views, gidx, extras).

    The train/test splits round-trip through the binary snapshot format so a
    later `eval` sees bit-identical data.
    """
    ds, flags = load_source(cfg)
    if cfg.kind is FeedbackKind.IMPLICIT:
        ds = to_implicit(ds)
    seed_dir.mkdir(parents=True, exist_ok=True)
    train_path, test_path = seed_dir / "train.ds", seed_dir / "test.ds"
    if not reuse:
        train, test = split_train_test(ds, cfg.train_ratio, seed)
        write_snapshot(train, train_path)
        write_snapshot(test, test_path)
    train = read_snapshot(train_path)
    test = read_snapshot(test_path)
    if (train.m, train.n) != (ds.m, ds.n) or (test.m, test.n) != (ds.m, ds.n):
        raise ValueError("snapshot dimensions do not match the source dataset")
    for part in (train, test):
        part.user_features = ds.user_features
        part.item_features = ds.item_features

    if cfg.partition == "genre":
        if flags is None:
            raise UsageError("genre partition needs a source with genre flags")
        tr_dom = partition_by_genre(train, flags)
        te_dom = partition_by_genre(test, flags)
    elif cfg.partition == "uniform":
        tr_dom = partition_uniform(train, cfg.domains, seed)
        te_dom = partition_uniform(test, cfg.domains, seed)
    else:
        raise UsageError(f"unknown partition {cfg.partition!r}")

    amap = build_alignment_map(tr_dom, cfg.mode)
    if cfg.alignment_fraction < 1.0:
        amap = restrict_alignment(amap, cfg.alignment_fraction, seed)
    gidx = build_global_index(tr_dom, cfg.mode)
    views = build_domain_views(tr_dom, te_dom, amap, gidx, cfg.kind,
                               cfg.hyper(), use_side=cfg.side_info)
    joint = train.matrix() if cfg.mode is AlignmentMode.USER_ALIGNED \
        else train.matrix().transposed()
    side_u = side_v = None
    if cfg.side_info:
        row_f = train.user_features if cfg.mode is AlignmentMode.USER_ALIGNED \
            else train.item_features
        col_f = train.item_features if cfg.mode is AlignmentMode.USER_ALIGNED \
            else train.user_features
        if row_f is not None:
            side_u = np.asarray(row_f, dtype=np.float64)
        if col_f is not None:
            from .protocol import observed_feature_sums
            side_v = observed_feature_sums(joint, col_f)
    return views, gidx, {"joint_train": joint, "side_user": side_u,
                         "side_item_sum": side_v}


def run_one_seed(cfg: ExperimentConfig, seed, seed_dir: Path):
    views, gidx, extras = prepare_seed(cfg, seed, seed_dir)
    n = len(views)
    if cfg.scenario == "mtal":
        pcfg = ProtocolConfig(
            n_domains=n, rounds=cfg.rounds, seed=seed, eta_mode=cfg.eta_mode,
            eta_value=cfg.eta, optimize_weights=cfg.optimize_weights,
            qn_iters=cfg.qn_iters, timeout=cfg.timeout,
            privacy=cfg.privacy(seed) if cfg.mechanism != "none" else None)
        hub = None
        if cfg.bus == "tcp":
            hub = TcpHub(cfg.tcp_host, cfg.tcp_port)
            bus = TcpBus(n, *hub.address)
        else:
            bus = InProcessBus(n)
        try:
            ensembles, rows = run_learning(views, bus, pcfg,
                                           aligned_count=gidx.aligned_count)
        finally:
            if hub is not None:
                hub.close()
        for k, ens in sorted(ensembles.items()):
            save_ensemble(ens, seed_dir / f"ensemble_{k:02d}.bin")
        return rows
    bcfg = BaselineConfig(rounds=cfg.rounds, seed=seed,
                          max_workers=ProtocolConfig(n_domains=n).worker_cap())
    if cfg.scenario == "alone":
        return run_alone(views, bcfg, aligned_count=gidx.aligned_count)
    if cfg.scenario == "joint":
        return run_joint(views, extras["joint_train"], gidx.split_dataset_ids,
                         bcfg, aligned_count=gidx.aligned_count,
                         side_user=extras["side_user"],
                         side_item_sum=extras["side_item_sum"])
    raise UsageError(f"unknown scenario {cfg.scenario!r}")


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------

def _format_value(v):
    return repr(float(v))


def write_metrics_csv(rows, path):
    with open(path, "w") as fh:
        fh.write("round,domain,split,metric,value,seed\n")
        for r in rows:
            fh.write(f"{r['round']},{r['domain']},{r['split']},{r['metric']},"
                     f"{_format_value(r['value'])},{r['seed']}\n")


def write_summary_csv(rows, path):
    groups = {}
    for r in rows:
        groups.setdefault((r["round"], r["domain"], r["split"], r["metric"]),
                          []).append(r["value"])
    with open(path, "w") as fh:
        fh.write("round,domain,split,metric,mean,stderr,n_seeds\n")
        for (rnd, dom, split, metric), vals in sorted(
                groups.items(), key=lambda kv: (kv[0][0], str(kv[0][1]),
                                                kv[0][2], kv[0][3])):
            arr = np.asarray(vals, dtype=np.float64)
            mean = float(arr.mean())
            stderr = float(arr.std(ddof=1) / np.sqrt(len(arr))) if len(arr) > 1 else 0.0
            fh.write(f"{rnd},{dom},{split},{metric},{_format_value(mean)},"
                     f"{_format_value(stderr)},{len(arr)}\n")


def _sort_rows(rows):
    def key(r):
        dom = r["domain"]
        return (r["seed"], r["round"], 1 if dom == "overall" else 0,
                -1 if dom == "overall" else dom, r["split"], r["metric"])
    rows.sort(key=key)
    return rows


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_ingest(args) -> int:
    if args.format in ("ml100k", "ml1m"):
        loader = load_movielens_100k if args.format == "ml100k" else load_movielens_1m
        ds, _flags = loader(args.data)
    else:
        ds = parse_ratings(args.data, args.format)
    write_snapshot(ds, args.out)
    print(f"m={ds.m} n={ds.n} entries={ds.n_entries}")
    return 0


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config_echo(cfg, out / "config.ini")
    all_rows = []
    for seed in cfg.seeds:
        rows = run_one_seed(cfg, seed, out / f"seed_{seed}")
        for r in rows:
            r["seed"] = seed
        all_rows.extend(rows)
    _sort_rows(all_rows)
    write_metrics_csv(all_rows, out / "metrics.csv")
    write_summary_csv(all_rows, out / "summary.csv")
    print(f"wrote {out / 'metrics.csv'} ({len(all_rows)} rows)")
    return 0


def cmd_eval(args) -> int:
    out = Path(args.run)
    cfg = load_config(out / "config.ini")
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    seed_dir = out / f"seed_{seed}"
    if not seed_dir.exists():
        raise FileNotFoundError(f"no run directory {seed_dir}")
    if args.test is not None:
        ref = read_snapshot(seed_dir / "test.ds")
        override = read_snapshot(args.test)
        if (override.m, override.n) != (ref.m, ref.n):
            raise ValueError("test snapshot dimensions do not match the run")
        import shutil
        shutil.copyfile(args.test, seed_dir / "test.ds")
    views, gidx, _extras = prepare_seed(cfg, seed, seed_dir, reuse=True)
    ensembles = {}
    for view in views:
        path = seed_dir / f"ensemble_{view.domain_id:02d}.bin"
        if not path.exists():
            raise FileNotFoundError(f"missing checkpoint {path}")
        ensembles[view.domain_id] = load_ensemble(path, view)
    n = len(views)
    pcfg = ProtocolConfig(n_domains=n, rounds=cfg.rounds, seed=seed,
                          timeout=cfg.timeout)
    hub = None
    if cfg.bus == "tcp":
        hub = TcpHub(cfg.tcp_host, cfg.tcp_port)
        bus = TcpBus(n, *hub.address)
    else:
        bus = InProcessBus(n)
    try:
        outputs = predict(ensembles, views, bus, pcfg)
    finally:
        if hub is not None:
            hub.close()
    rows = evaluate(views, outputs, cfg.kind, aligned_count=gidx.aligned_count)
    for r in rows:
        print(f"{r['domain']},{r['split']},{r['metric']},{_format_value(r['value'])}")
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser():
    parser = _Parser(prog="mtal", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse ratings and write a snapshot")
    p.add_argument("--data", required=True, help="source file or directory")
    p.add_argument("--format", default="ml100k",
                   choices=["ml100k", "ml1m", "csv", "tab_separated",
                            "double_colon_separated"])
    p.add_argument("--out", required=True, help="snapshot output path")
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("run", help="run an experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None,
                   help="run a single seed instead of the configured list")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("eval", help="replay a run's prediction stage")
    p.add_argument("--run", required=True, help="cmd_run output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--test", default=None, help="override test snapshot")
    p.set_defaults(fn=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
