#!/usr/bin/env python3
"""Render harness CSV outputs (convergence, snapshots, energy traces) to images."""

import argparse
import csv
import math
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

SCHEMAS = {
    "convergence": ["steps", "k", "l2_error", "observed_order", "energy_violations", "wallclock_s"],
    "snapshot1d": ["x", "initial", "final"],
    "snapshot2d": ["x", "y", "initial", "final"],
    "energy-trace": ["steps", "step", "time", "energy"],
}


class SchemaError(Exception):
    pass


def read_csv(path, kind):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise SchemaError(f"{path}: empty file, expected header {','.join(SCHEMAS[kind])}")
    header = [h.strip() for h in rows[0]]
    if header != SCHEMAS[kind]:
        raise SchemaError(f"{path}: header {','.join(header)} does not match {','.join(SCHEMAS[kind])}")
    body = []
    for n, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise SchemaError(f"{path}:{n}: expected {len(header)} fields, got {len(row)}")
        try:
            body.append([float(v) if v.strip() else math.nan for v in row])
        except ValueError as e:
            raise SchemaError(f"{path}:{n}: {e}") from None
    data = np.array(body, dtype=float).reshape(len(body), len(header))
    return {name: data[:, i] for i, name in enumerate(header)}


def series_label(path):
    p = Path(path)
    return p.parent.name or p.stem


def plot_convergence(paths, ax):
    anchor = None
    for path in paths:
        d = read_csv(path, "convergence")
        ok = np.isfinite(d["l2_error"]) & (d["l2_error"] > 0) & (d["k"] > 0)
        if not ok.any():
            continue
        k, e = d["k"][ok], d["l2_error"][ok]
        ax.loglog(k, e, "o-", label=series_label(path))
        if anchor is None:
            anchor = (k, e)
    if anchor is not None:
        k, e = anchor
        i = int(np.argmin(k))
        for p, style in ((2, (0, (4, 3))), (3, (0, (1, 2)))):
            ax.loglog(k, e[i] * (k / k[i]) ** p, color="0.4", linestyle="--" if p == 2 else ":", linewidth=1,
                      label=f"slope {p}")
        ax.legend()
    ax.set_xlabel("time step k")
    ax.set_ylabel("L2 error")
    ax.grid(True, which="both", linewidth=0.3)


def plot_snapshot1d(path, ax):
    d = read_csv(path, "snapshot1d")
    ax.plot(d["x"], d["initial"], color="black", label="initial")
    ax.plot(d["x"], d["final"], color="0.6", label="final")
    ax.set_xlabel("x")
    ax.set_ylabel("u")
    if len(d["x"]):
        ax.legend()


def plot_snapshot2d(path, ax):
    d = read_csv(path, "snapshot2d")
    ax.set_aspect("equal")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    if not len(d["x"]):
        return
    xs, ys = np.unique(d["x"]), np.unique(d["y"])
    if len(xs) * len(ys) != len(d["x"]):
        raise SchemaError(f"{path}: nodes do not form a tensor grid")
    order = np.lexsort((d["x"], d["y"]))
    shape = (len(ys), len(xs))
    u0 = d["initial"][order].reshape(shape)
    u1 = d["final"][order].reshape(shape)
    level = 0.5 * (np.nanmin(u0) + np.nanmax(u0))
    ax.contour(xs, ys, u0, levels=[level], colors="black")
    ax.contour(xs, ys, u1, levels=[level], colors="0.6")


def plot_energy(path, ax):
    d = read_csv(path, "energy-trace")
    for n in np.unique(d["steps"]):
        m = d["steps"] == n
        ax.plot(d["time"][m], d["energy"][m], label=f"{int(n)} steps")
    ax.set_xlabel("t")
    ax.set_ylabel("energy")
    if len(d["steps"]):
        ax.legend()


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--kind", required=True, choices=sorted(SCHEMAS))
    parser.add_argument("--in", dest="inputs", required=True, action="append",
                        help="input CSV (repeat for several convergence series)")
    parser.add_argument("--out", required=True, help="output image path")
    args = parser.parse_args(argv)

    for p in args.inputs:
        if not Path(p).is_file():
            print(f"error: {p}: no such file", file=sys.stderr)
            return 2
    if args.kind != "convergence" and len(args.inputs) != 1:
        print(f"error: --kind {args.kind} takes exactly one input", file=sys.stderr)
        return 2

    fig, ax = plt.subplots(figsize=(6, 4.5))
    try:
        if args.kind == "convergence":
            plot_convergence(args.inputs, ax)
        elif args.kind == "snapshot1d":
            plot_snapshot1d(args.inputs[0], ax)
        elif args.kind == "snapshot2d":
            plot_snapshot2d(args.inputs[0], ax)
        else:
            plot_energy(args.inputs[0], ax)
    except SchemaError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    fig.tight_layout()
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(args.out, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return 0


if __name__ == "__main__":
    sys.exit(main())
