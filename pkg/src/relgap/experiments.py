"""Per-seed experiment drivers shared by the command line and the acceptance tests."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .envs.cartpole import CartPoleEnv, CartPoleParams, Discretizer
from .envs.tabular import gridworld_pair, random_mdp_pair
from .mdp import TabularMdp, TabularPolicy, policy_evaluation
from .mdpio import read_checkpoint, write_checkpoint
from .config import CARTPOLE_METHOD
from .soft_rl import ReplayBuffer, SoftQLearner, TabularEnv, evaluate, pretrain, train_soft_q
from .transfer import RUN_FIELDS, CartPoleWorld, TabularWorld, TransferConfig, TransferLog, rpto_run

TRAIN_FIELDS = ("step", "episode_return", "soft_bellman_residual", "entropy")
EVAL_FIELDS = ("target_steps", "eval_return")
SUMMARY_FIELDS = ("seed", "reference_return", "threshold", "steps_to_threshold", "final_eval_return",
                  "final_pole_length_or_tv_gap")


@dataclass
class PretrainResult:
    learner: SoftQLearner
    best_score: float
    history: list = field(default_factory=list)   # (step, eval score)
    log: list = field(default_factory=list)       # TRAIN_FIELDS rows
    reference: float = 0.0


def tabular_pair(seed: int, setup) -> tuple[TabularMdp, TabularMdp]:
    if setup.pair == "gridworld":
        return gridworld_pair(gamma=setup.gamma)
    return random_mdp_pair(seed, setup.n_states, setup.n_actions, setup.gamma, setup.mix)


def pretrain_cartpole(seed: int, params: CartPoleParams, pc, discretizer: Discretizer | None = None) -> PretrainResult:
    pc = pc.resolved("cartpole")
    d = discretizer or Discretizer.uniform()
    env = CartPoleEnv(params, d)
    learner = SoftQLearner(env.n_states, 2, pc.gamma, pc.alpha, pc.lr, pc.polyak, pc.q_init)
    log = []
    best, score, history = pretrain(env, learner, np.random.default_rng(seed), pc.steps, CartPoleEnv(params, d),
                                    pc.eval_every, pc.eval_episodes, eval_seed=seed, batch_size=pc.batch_size,
                                    log=log, log_every=pc.log_every)
    return PretrainResult(best, score, history, log)


def pretrain_tabular(seed: int, mdp: TabularMdp, pc, horizon: int = 50) -> PretrainResult:
    """Soft Q-learning on a tabular source; the score is the exact return of the implied policy."""
    pc = pc.resolved("tabular")
    learner = SoftQLearner(mdp.n_states, mdp.n_actions, mdp.discount, pc.alpha, pc.lr, pc.polyak, pc.q_init)
    log = []
    rng = np.random.default_rng(seed)
    buffer = ReplayBuffer()
    env = TabularEnv(mdp, horizon)
    history = []
    done = 0
    while done < pc.steps:
        chunk = min(pc.eval_every, pc.steps - done)
        train_soft_q(env, learner, rng, chunk, buffer, batch_size=pc.batch_size, log=log, log_every=pc.log_every,
                     step_offset=done)
        done += chunk
        history.append((done, policy_evaluation(mdp, TabularPolicy(learner.policy())).j))
    score = history[-1][1] if history else policy_evaluation(mdp, TabularPolicy(learner.policy())).j
    return PretrainResult(learner, score, history, log)


def source_reference(cfg, seed: int, learner: SoftQLearner, source) -> float:
    """The pretrained policy's return in its own source: the bar transfer is measured against."""
    if isinstance(source, TabularMdp):
        return policy_evaluation(source, TabularPolicy(learner.policy())).j
    env = CartPoleEnv(source)
    return evaluate(env, learner, np.random.default_rng([seed, 5]), cfg.reference_episodes)


def save_learner(path, learner: SoftQLearner, **scalars):
    write_checkpoint(path, {"q": learner.q, "target_q": learner.target_q},
                     dict(alpha=learner.alpha, gamma=learner.gamma, lr=learner.lr, polyak=learner.polyak, **scalars))


def load_learner(path) -> tuple[SoftQLearner, dict]:
    matrices, scalars = read_checkpoint(path)
    for key in ("q", "target_q"):
        if key not in matrices:
            raise ValueError(f"{path}: checkpoint has no {key!r} matrix")
    for key in ("alpha", "gamma", "lr", "polyak"):
        if key not in scalars:
            raise ValueError(f"{path}: checkpoint has no {key!r} scalar")
    q = matrices["q"]
    learner = SoftQLearner(q.shape[0], q.shape[1], scalars["gamma"], scalars["alpha"], scalars["lr"], scalars["polyak"])
    learner.q = q.copy()
    learner.target_q = matrices["target_q"]
    return learner, scalars


@dataclass
class SeedRun:
    seed: int
    reference: float
    threshold: float
    log: TransferLog
    pretrain_log: list = field(default_factory=list)
    learner: SoftQLearner | None = None

    @property
    def steps_to(self):
        return self.log.steps_to(self.threshold)

    def summary_row(self):
        return (self.seed, self.reference, self.threshold, self.steps_to, self.log.final_eval, self.log.rows[-1][4])


def run_transfer_seed(cfg, seed: int, learner: SoftQLearner | None = None) -> SeedRun:
    """Pretrain (unless a learner is supplied) and run the configured transfer for one seed."""
    tc: TransferConfig = cfg.transfer
    pretrain_log = []
    if cfg.kind == "tabular-transfer":
        source, target = tabular_pair(seed, cfg.tabular)
        if learner is None:
            res = pretrain_tabular(seed, source, cfg.pretrain, cfg.tabular.horizon)
            learner, pretrain_log = res.learner, res.log
        world = TabularWorld(source, target, cfg.tabular.horizon)
        method = cfg.tabular.method
        ref_env = source
    else:
        source = cfg.cartpole
        if learner is None:
            res = pretrain_cartpole(seed, source, cfg.pretrain)
            learner, pretrain_log = res.learner, res.log
        world = CartPoleWorld(source, source.with_length(cfg.target_pole_length))
        method = CARTPOLE_METHOD[cfg.kind]
        ref_env = source
    if learner.q.shape[0] != (world.source.n_states if isinstance(world, TabularWorld) else world.discretizer.n_cells):
        raise ValueError("pretrained learner does not match the environment's state space")
    reference = source_reference(cfg, seed, learner, ref_env)
    log = rpto_run(world, learner, tc, np.random.default_rng([seed, 1]), method, eval_seed=seed)
    return SeedRun(seed, reference, cfg.threshold_fraction * reference, log, pretrain_log, learner)


# ---------------------------------------------------------------- aggregation and CSV

def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if not math.isfinite(v):
        raise FloatingPointError("refusing to write a non-finite value")
    return repr(v)


def write_csv(path, header, rows):
    """Header plus rows; None becomes an empty cell, NaN or inf aborts."""
    text = [",".join(header)]
    for row in rows:
        if len(row) != len(header):
            raise ValueError(f"row has {len(row)} fields, header has {len(header)}")
        text.append(",".join(_fmt(v) for v in row))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\n".join(text) + "\n")


def read_csv(path):
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def _median_iqr(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    q1, med, q3 = np.percentile(vals, [25, 50, 75])
    return float(med), float(q3 - q1)


def aggregate_transfer(logs):
    """Median and IQR across seeds at each evaluation slot.

    Evaluations are labelled by slot (multiples of ``eval_every`` plus the
    final budget), so seeds line up. Run columns take the last telemetry row
    at or before the slot.
    """
    n_slots = min(len(log.evals) for log in logs)
    metrics = ("eval_return",) + RUN_FIELDS[1:]
    header = ("target_steps",) + tuple(f"{m}_{s}" for m in metrics for s in ("median", "iqr"))
    rows = []
    for k in range(n_slots):
        per_metric = {m: [] for m in metrics}
        for log in logs:
            steps, value = log.evals[k]
            per_metric["eval_return"].append(value)
            last = None
            for r in log.rows:
                if r[0] > steps:
                    break
                last = r
            for j, m in enumerate(RUN_FIELDS[1:], start=1):
                per_metric[m].append(None if last is None else last[j])
        row = [logs[0].evals[k][0]]
        for m in metrics:
            row.extend(_median_iqr(per_metric[m]))
        rows.append(tuple(row))
    return header, rows


def aggregate_training(logs):
    """Median and IQR of each training column across seeds, per logged step."""
    n = min(len(log) for log in logs)
    header = ("step",) + tuple(f"{m}_{s}" for m in TRAIN_FIELDS[1:] for s in ("median", "iqr"))
    rows = []
    for i in range(n):
        row = [logs[0][i][0]]
        for j in range(1, len(TRAIN_FIELDS)):
            row.extend(_median_iqr([log[i][j] for log in logs]))
        rows.append(tuple(row))
    return header, rows


def write_transfer_outputs(out_dir, runs):
    os.makedirs(out_dir, exist_ok=True)
    for run in runs:
        write_csv(os.path.join(out_dir, f"run_seed{run.seed}.csv"), RUN_FIELDS, run.log.rows)
        write_csv(os.path.join(out_dir, f"eval_seed{run.seed}.csv"), EVAL_FIELDS, run.log.evals)
    header, rows = aggregate_transfer([r.log for r in runs])
    write_csv(os.path.join(out_dir, "aggregate.csv"), header, rows)
    write_csv(os.path.join(out_dir, "summary.csv"), SUMMARY_FIELDS, [r.summary_row() for r in runs])
    return header, rows
