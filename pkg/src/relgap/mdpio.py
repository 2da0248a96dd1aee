"""Line-oriented text formats for MDPs, policies and checkpoints.

MDP::

    mdp <n_states> <n_actions> <gamma>
    rho <n_states floats>
    P <s> <a> <n_states floats>     # one line per (s, a)
    R <s> <a> <n_states floats>     # one line per (s, a)

Policy::

    policy <n_states> <n_actions>
    <n_actions floats>               # one row per state

Checkpoints reuse the same idea: ``matrix <name> <rows> <cols>`` followed by
the rows, and ``scalar <name> <value>``. Floats are written with ``repr`` so
a write/read round trip is exact. ``#`` starts a comment anywhere on a line.
"""
from __future__ import annotations

import functools

import numpy as np

from .mdp import TabularMdp, TabularPolicy


class ParseError(ValueError):
    def __init__(self, lineno, msg, path=None):
        where = f"{path}:{lineno}" if path else f"line {lineno}"
        super().__init__(f"{where}: {msg}")
        self.lineno = lineno
        self.msg = msg
        self.path = path


def _with_path(fn):
    # Helpers raise without knowing the file; attach it once at the top.
    @functools.wraps(fn)
    def wrapper(text, path=None):
        try:
            return fn(text, path)
        except ParseError as exc:
            if path is None or exc.path is not None:
                raise
            raise ParseError(exc.lineno, exc.msg, path) from None
    return wrapper


def _lines(text):
    for i, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield i, line.split()


def _floats(tokens, n, lineno):
    if len(tokens) != n:
        raise ParseError(lineno, f"expected {n} numbers, got {len(tokens)}")
    try:
        return [float(t) for t in tokens]
    except ValueError as exc:
        raise ParseError(lineno, f"bad number ({exc})") from None


def _int(tok, lineno, what):
    try:
        return int(tok)
    except ValueError:
        raise ParseError(lineno, f"bad {what} {tok!r}") from None


@_with_path
def parse_mdp(text: str, path=None) -> TabularMdp:
    it = iter(_lines(text))
    try:
        lineno, head = next(it)
    except StopIteration:
        raise ParseError(0, "empty MDP file", path) from None
    if head[0] != "mdp" or len(head) != 4:
        raise ParseError(lineno, "expected header 'mdp <n_states> <n_actions> <gamma>'", path)
    n_s = _int(head[1], lineno, "n_states")
    n_a = _int(head[2], lineno, "n_actions")
    gamma = _floats(head[3:], 1, lineno)[0]
    if n_s < 1 or n_a < 1:
        raise ParseError(lineno, "sizes must be positive", path)

    rho = None
    p = np.full((n_s, n_a, n_s), np.nan)
    r = np.full((n_s, n_a, n_s), np.nan)
    last = lineno
    for lineno, tok in it:
        last = lineno
        kind = tok[0]
        if kind == "rho":
            rho = _floats(tok[1:], n_s, lineno)
        elif kind in ("P", "R"):
            if len(tok) < 3:
                raise ParseError(lineno, f"'{kind}' line needs state and action indices", path)
            s = _int(tok[1], lineno, "state")
            a = _int(tok[2], lineno, "action")
            if not (0 <= s < n_s and 0 <= a < n_a):
                raise ParseError(lineno, f"index ({s}, {a}) out of range", path)
            (p if kind == "P" else r)[s, a] = _floats(tok[3:], n_s, lineno)
        else:
            raise ParseError(lineno, f"unknown record {kind!r}", path)
    if rho is None:
        raise ParseError(last, "missing 'rho' line", path)
    if np.isnan(p).any():
        raise ParseError(last, "missing 'P' lines for some (s, a)", path)
    if np.isnan(r).any():
        raise ParseError(last, "missing 'R' lines for some (s, a)", path)
    try:
        return TabularMdp(p, r, rho, gamma)
    except ValueError as exc:
        raise ParseError(last, str(exc), path) from None


def read_mdp(path) -> TabularMdp:
    with open(path, encoding="utf-8") as fh:
        return parse_mdp(fh.read(), path=str(path))


def _row(values):
    return " ".join(repr(float(v)) for v in values)


def format_mdp(mdp: TabularMdp) -> str:
    out = [f"mdp {mdp.n_states} {mdp.n_actions} {mdp.discount!r}", "rho " + _row(mdp.initial_dist)]
    for s in range(mdp.n_states):
        for a in range(mdp.n_actions):
            out.append(f"P {s} {a} " + _row(mdp.transition[s, a]))
    for s in range(mdp.n_states):
        for a in range(mdp.n_actions):
            out.append(f"R {s} {a} " + _row(mdp.reward[s, a]))
    return "\n".join(out) + "\n"


def write_mdp(path, mdp: TabularMdp):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_mdp(mdp))


@_with_path
def parse_policy(text: str, path=None) -> TabularPolicy:
    rows = list(_lines(text))
    if not rows or rows[0][1][0] != "policy" or len(rows[0][1]) != 3:
        raise ParseError(rows[0][0] if rows else 0, "expected header 'policy <n_states> <n_actions>'", path)
    lineno, head = rows[0]
    n_s = _int(head[1], lineno, "n_states")
    n_a = _int(head[2], lineno, "n_actions")
    body = rows[1:]
    if len(body) != n_s:
        raise ParseError(body[-1][0] if body else lineno, f"expected {n_s} policy rows, got {len(body)}", path)
    probs = [_floats(tok, n_a, ln) for ln, tok in body]
    try:
        return TabularPolicy(probs)
    except ValueError as exc:
        raise ParseError(lineno, str(exc), path) from None


def format_policy(pi: TabularPolicy) -> str:
    return f"policy {pi.n_states} {pi.n_actions}\n" + "".join(_row(r) + "\n" for r in pi.probs)


def format_checkpoint(matrices: dict, scalars: dict | None = None) -> str:
    out = []
    for name, value in (scalars or {}).items():
        out.append(f"scalar {name} {float(value)!r}")
    for name, m in matrices.items():
        m = np.atleast_2d(np.asarray(m, dtype=float))
        out.append(f"matrix {name} {m.shape[0]} {m.shape[1]}")
        out.extend(_row(r) for r in m)
    return "\n".join(out) + "\n"


@_with_path
def parse_checkpoint(text: str, path=None):
    matrices, scalars = {}, {}
    rows = list(_lines(text))
    i = 0
    while i < len(rows):
        lineno, tok = rows[i]
        if tok[0] == "scalar" and len(tok) == 3:
            scalars[tok[1]] = _floats(tok[2:], 1, lineno)[0]
            i += 1
        elif tok[0] == "matrix" and len(tok) == 4:
            n, m = _int(tok[2], lineno, "rows"), _int(tok[3], lineno, "cols")
            body = rows[i + 1:i + 1 + n]
            if len(body) != n:
                raise ParseError(lineno, f"matrix {tok[1]} truncated", path)
            matrices[tok[1]] = np.array([_floats(t, m, ln) for ln, t in body])
            i += 1 + n
        else:
            raise ParseError(lineno, f"unknown record {tok[0]!r}", path)
    return matrices, scalars


def write_checkpoint(path, matrices, scalars=None):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_checkpoint(matrices, scalars))


def read_checkpoint(path):
    with open(path, encoding="utf-8") as fh:
        return parse_checkpoint(fh.read(), path=str(path))
