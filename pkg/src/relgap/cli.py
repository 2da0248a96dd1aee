"""``relgap verify|pretrain|transfer --config FILE ...``

Exit status: 0 success, 1 failed check or aborted experiment, 2 usage or
parse error.
"""
from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from functools import partial

import numpy as np

from . import experiments as ex
from .config import ConfigError, apply_overrides, build_config, parse_seeds, read_config
from .mdpio import ParseError, read_mdp
from .relativity import BOUND_NAMES, run_suite, slack_summary, write_reports_csv

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _map(fn, items, jobs):
    """Ordered map, in worker processes when ``jobs`` > 1; results come back in input order."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as pool:
        return list(pool.map(fn, items))


def _chunks(seq, n):
    k = max(1, -(-len(seq) // n))
    return [seq[i:i + k] for i in range(0, len(seq), k)]


# ---------------------------------------------------------------- verify

def _verify_chunk(args):
    name, seeds, t_max, kw, mdp = args
    return run_suite(name, seeds, t_max=t_max, mdp=mdp, **kw)


def cmd_verify(cfg, out, jobs, mdp=None, plots=False):
    vc = cfg.verify
    seeds = list(range(vc.instances))
    suites = {}
    failed = False
    rows = []
    for name in BOUND_NAMES:
        parts = _map(_verify_chunk, [(name, c, vc.t_max, vc.instance_kw(), mdp) for c in _chunks(seeds, jobs)], jobs)
        reports = [r for part in parts for r in part]
        suites[name] = reports
        write_reports_csv(os.path.join(out, f"verify_{name}.csv"), reports)
        s = slack_summary(reports)
        failed |= s["violations"] > 0
        rows.append((name, s["n"], s["violations"], s["min_slack"]))
        print(f"{name:15s} {'PASS' if s['violations'] == 0 else 'FAIL'}  instances={s['n']} "
              f"violations={s['violations']} min_slack={s['min_slack']:.3g}")
    ex.write_csv(os.path.join(out, "verify_summary.csv"), ("suite", "instances", "violations", "min_slack"), rows)
    if plots:
        from .plotting import figure_path, plot_slacks
        plot_slacks(figure_path(out, "verify_slacks"), suites)
    return EXIT_FAIL if failed else EXIT_OK


# ---------------------------------------------------------------- pretrain

def _pretrain_one(cfg, seed):
    if cfg.env == "tabular":
        source, _ = ex.tabular_pair(seed, cfg.tabular)
        res = ex.pretrain_tabular(seed, source, cfg.pretrain, cfg.tabular.horizon)
    else:
        source = cfg.cartpole
        res = ex.pretrain_cartpole(seed, source, cfg.pretrain)
    res.reference = ex.source_reference(cfg, seed, res.learner, source)
    return res


def _write_pretrain(out, seed, res, ckpt):
    ex.write_csv(os.path.join(out, f"pretrain_seed{seed}.csv"), ex.TRAIN_FIELDS, res.log)
    ex.save_learner(ckpt, res.learner, best_eval_return=res.best_score, reference_return=res.reference)


def cmd_pretrain(cfg, out, jobs, plots=False):
    results = _map(partial(_pretrain_one, cfg), cfg.seeds, jobs)
    for seed, res in zip(cfg.seeds, results):
        _write_pretrain(out, seed, res, cfg.checkpoint_path(out, seed))
        print(f"seed {seed}: best eval {res.best_score:.4g}, reference return {res.reference:.4g}")
    ex.write_csv(os.path.join(out, "pretrain_summary.csv"), ("seed", "best_eval_return", "reference_return"),
                 [(s, r.best_score, r.reference) for s, r in zip(cfg.seeds, results)])
    logs = [r.log for r in results]
    if all(logs):
        header, rows = ex.aggregate_training(logs)
        ex.write_csv(os.path.join(out, "pretrain_aggregate.csv"), header, rows)
        if plots:
            from .plotting import figure_path, plot_training
            plot_training(figure_path(out, "pretrain"), header, rows, title=f"pretraining ({cfg.env})")
    med = float(np.median([r.reference for r in results]))
    print(f"median reference return over {len(results)} seeds: {med:.4g}")
    return EXIT_OK


# ---------------------------------------------------------------- transfer

def _transfer_one(cfg, seed_ckpt):
    seed, ckpt = seed_ckpt
    learner = ex.load_learner(ckpt)[0] if ckpt else None
    return ex.run_transfer_seed(cfg, seed, learner)


def cmd_transfer(cfg, out, jobs, require_pretrained=False, plots=False):
    jobs_in = []
    for seed in cfg.seeds:
        path = cfg.checkpoint_path(out, seed)
        if os.path.exists(path):
            jobs_in.append((seed, path))
        elif require_pretrained:
            raise UsageError(f"--require-pretrained: no checkpoint for seed {seed} at {path}")
        else:
            jobs_in.append((seed, None))
    runs = _map(partial(_transfer_one, cfg), jobs_in, jobs)
    for (seed, ckpt), run in zip(jobs_in, runs):
        if ckpt is None:
            ex.write_csv(os.path.join(out, f"pretrain_seed{seed}.csv"), ex.TRAIN_FIELDS, run.pretrain_log)
            ex.save_learner(cfg.checkpoint_path(out, seed), run.learner, reference_return=run.reference)
    header, rows = ex.write_transfer_outputs(out, runs)
    for run in runs:
        steps = "never" if run.steps_to is None else str(run.steps_to)
        print(f"seed {run.seed}: reference {run.reference:.4g}, steps to {cfg.threshold_fraction:g}x: {steps}, "
              f"final eval {run.log.final_eval:.4g}, final model {run.log.rows[-1][4]:.4g}")
    reached = [r.steps_to for r in runs]
    finite = sorted(s if s is not None else float("inf") for s in reached)
    med = float(np.median(finite))
    print(f"{cfg.kind}: median steps to threshold {'never' if med == float('inf') else f'{med:g}'}")
    if plots:
        from .plotting import figure_path, plot_transfer
        thr = float(np.median([r.threshold for r in runs]))
        label = "TV gap" if cfg.kind == "tabular-transfer" else "pole length"
        plot_transfer(figure_path(out, "transfer"), header, rows, threshold=thr, title=cfg.kind, gap_label=label)
    return EXIT_OK


# ---------------------------------------------------------------- entry point

def build_parser():
    p = argparse.ArgumentParser(prog="relgap", description="Relativity-gap verification and policy transfer experiments.")
    p.add_argument("command", choices=("verify", "pretrain", "transfer"))
    p.add_argument("--config", required=True, help="key = value config file")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for seed-level parallelism")
    p.add_argument("--out", help="output directory (falls back to the config, then $RELGAP_OUT)")
    p.add_argument("--seed-list", nargs="+", help="seeds, e.g. 0 1 2, 0,1,2 or 0-7")
    p.add_argument("--mdp", help="verify: MDP file used as the source of every instance")
    p.add_argument("--require-pretrained", action="store_true", help="transfer: fail if a seed has no checkpoint")
    p.add_argument("--plots", action="store_true", help="also render PNG figures next to the CSV files")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    try:
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        raw = apply_overrides(read_config(args.config), rest)
        if args.seed_list:
            raw.setdefault("", {})["seeds"] = ",".join(str(s) for s in parse_seeds(args.seed_list))
        cfg = build_config(raw, kind=args.command)
        out = args.out or cfg.out or os.environ.get("RELGAP_OUT")
        if not out:
            raise UsageError("no output directory: pass --out, set 'out' in the config or RELGAP_OUT")
        try:
            os.makedirs(out, exist_ok=True)
        except OSError as exc:
            raise UsageError(f"cannot create output directory {out}: {exc.strerror}") from None
        if not os.access(out, os.W_OK):
            raise UsageError(f"output directory {out} is not writable")
        mdp = None
        if args.mdp:
            if args.command != "verify":
                raise UsageError("--mdp only applies to verify")
            mdp = read_mdp(args.mdp)
        if args.command == "verify":
            return cmd_verify(cfg, out, args.jobs, mdp, args.plots)
        if args.command == "pretrain":
            return cmd_pretrain(cfg, out, args.jobs, args.plots)
        return cmd_transfer(cfg, out, args.jobs, args.require_pretrained, args.plots)
    except (ConfigError, ParseError, UsageError) as exc:
        print(f"relgap: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"relgap: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FloatingPointError, ValueError) as exc:
        print(f"relgap: run aborted: {exc}", file=sys.stderr)
        return EXIT_FAIL


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
