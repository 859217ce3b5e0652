#!/usr/bin/env python3
"""Synthetic run directory and golden report.csv for the report command.

    python3 report_oracle.py generate FIXTURE_DIR GOLDEN_CSV
    python3 report_oracle.py report FIXTURE_DIR
    python3 report_oracle.py pairs < pairs.json

`generate` writes random curves in the run-directory layout and the report
computed from them; `report` prints the report of an existing directory;
`pairs` reads curve pairs as JSON and prints smoothed values, peaks,
times to peak, scores and rates computed by brute force.
Only the standard library is used.
"""

import csv
import io
import json
import math
import os
import random
import sys

ALGOS = ["maml", "rl2", "varibad"]
MODES = ["default", "ga", "cmt", "scratch_expert", "scratch_meta"]
SPACES = ["nav_dense:left", "nav_dense:right"]
SEEDS = [0, 1, 2]
BUDGET = 2000
STEP = 200


def slug(key):
    out = []
    for c in key:
        if c == ":":
            out.append("-")
        elif c == ",":
            out.append("_")
        elif c in "[]":
            continue
        elif c.isalnum() or c in "_-.":
            out.append(c)
        else:
            out.append("_")
    return "".join(out)


def smooth(ys, w=5):
    left = (w - 1) // 2
    right = w - 1 - left
    out = []
    for i in range(len(ys)):
        lo = max(0, i - left)
        hi = min(len(ys) - 1, i + right)
        acc = 0.0
        for j in range(lo, hi + 1):
            acc += ys[j]
        out.append(acc / (hi - lo + 1))
    return out


def time_to_peak(frames, sm, budget):
    peak = max(sm)
    if peak > 0:
        th = (1 - 0.02) * peak
    elif peak < 0:
        th = (1 + 0.02) * peak
    else:
        th = peak - 0.02 * (peak - min(sm))
    for f, v in zip(frames, sm):
        if v >= th:
            return f / max(budget, 1)
    raise AssertionError("unreachable")


def c_score(meta, scratch, r0):
    pm, ps = max(meta), max(scratch)
    den = ps - r0
    spread = max(pm - min(meta), ps - min(scratch), abs(pm - r0))
    if den == 0 or abs(den) < 1e-6 * spread:
        return None
    return (pm - r0) / den


def c_rate(fs, scratch, fm, meta, budget):
    return min(time_to_peak(fs, scratch, budget), 1.0) / (min(time_to_peak(fm, meta, budget), 1.0) + 0.01)


def mean(v):
    acc = 0.0
    for x in v:
        acc += x
    return acc / len(v)


def read_curve(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [int(r["frame"]) for r in rows], [float(r["mean_return"]) for r in rows]


def load(root):
    runs = []
    for dirpath, _, files in os.walk(root):
        if "run.json" in files:
            with open(os.path.join(dirpath, "run.json")) as f:
                meta = json.load(f)
            meta["curve"] = read_curve(os.path.join(dirpath, "curve.csv"))
            runs.append(meta)
    return runs


def fmt(x):
    return "%.6f" % x


def report(root):
    runs = load(root)
    base = {}
    for r in runs:
        if r["mode"] in ("scratch_expert", "scratch_meta"):
            train = None if r["mode"] == "scratch_meta" else r["train_space"]
            base[(r["algo"], r["mode"], train, r["test_space"], r["seed"])] = r
    groups = {}
    for r in runs:
        if r["mode"] in ("scratch_expert", "scratch_meta"):
            continue
        bmode = "scratch_expert" if r["mode"] in ("default", "ga") else "scratch_meta"
        btrain = None if bmode == "scratch_meta" else r["train_space"]
        b = base[(r["algo"], bmode, btrain, r["test_space"], r["seed"])]
        key = (r["algo"], r["mode"], r["train_space"], r["test_space"])
        groups.setdefault(key, []).append((r, b))
    order = sorted(groups, key=lambda k: (ALGOS.index(k[0]), MODES.index(k[1]), k[2], k[3]))
    out = io.StringIO()
    out.write("algo,mode,train_space,test_space,seed_count,c_score,c_rate,defined\n")
    for key in order:
        pairs = sorted(groups[key], key=lambda p: p[0]["seed"])
        budget = pairs[0][0]["budget"]
        r0 = mean([b["curve"][1][0] for _, b in pairs])
        scores, rates = [], []
        for r, b in pairs:
            fm, ym = r["curve"]
            fs, ys = b["curve"]
            sm, ss = smooth(ym), smooth(ys)
            scores.append(c_score(sm, ss, r0))
            rates.append(c_rate(fs, ss, fm, sm, budget))
        score = None if any(s is None for s in scores) else mean(scores)
        rate = mean(rates)
        out.write(",".join([
            key[0], key[1], key[2], key[3], str(len(pairs)),
            "" if score is None else fmt(score), fmt(rate),
            "false" if score is None else "true",
        ]) + "\n")
    return out.getvalue()


def ramp(rng, n):
    r0 = rng.uniform(-120.0, -80.0)
    gain = rng.uniform(10.0, 90.0)
    tau = rng.uniform(0.5, 6.0)
    return [r0 + gain * (1 - math.exp(-i / tau)) + rng.gauss(0.0, 3.0) for i in range(n)]


def write_run(root, algo, mode, train, test, seed, ys):
    if mode == "scratch_meta":
        d = os.path.join(root, "baselines", algo, slug(test), mode, str(seed))
        run_id = "%s/%s/%s/%d" % (algo, test, mode, seed)
    else:
        d = os.path.join(root, "cells", algo, slug(train) + "__" + slug(test), mode, str(seed))
        run_id = "%s/%s/%s/%s/%d" % (algo, train, test, mode, seed)
    os.makedirs(d, exist_ok=True)
    with open(os.path.join(d, "curve.csv"), "w", newline="") as f:
        f.write("run_id,seed,frame,mean_return\n")
        for i, y in enumerate(ys):
            f.write("%s,%d,%d,%r\n" % (run_id, seed, i * STEP, y))
    meta = {
        "algo": algo, "mode": mode, "train_space": train, "test_space": test,
        "seed": seed, "budget": BUDGET, "run_id": run_id, "task": None,
        "frames": BUDGET, "rewarded_episodes": 0, "grad_norms": [], "initial_return": ys[0],
    }
    with open(os.path.join(d, "run.json"), "w") as f:
        json.dump(meta, f, indent=2)
        f.write("\n")


def generate(root, golden):
    rng = random.Random(20240611)
    n = BUDGET // STEP + 1
    modes = {"maml": ["ga", "cmt"], "rl2": ["default", "ga", "cmt"], "varibad": ["default", "ga"]}
    for algo in ALGOS:
        for tr in SPACES:
            for te in SPACES:
                for seed in SEEDS:
                    if algo == "varibad" and tr != te:
                        # flat expert: undefined score; instant meta curve: maximal rate
                        write_run(root, algo, "scratch_expert", tr, te, seed, [-50.0] * n)
                        for m in modes[algo]:
                            write_run(root, algo, m, tr, te, seed, [-40.0] * n)
                        continue
                    write_run(root, algo, "scratch_expert", tr, te, seed, ramp(rng, n))
                    for m in modes[algo]:
                        write_run(root, algo, m, tr, te, seed, ramp(rng, n))
        if "cmt" in modes[algo]:
            for te in SPACES:
                for seed in SEEDS:
                    write_run(root, algo, "scratch_meta", None, te, seed, ramp(rng, n))
    # strictly increasing expert against an immediately converged adapter
    for seed in SEEDS:
        tr = te = SPACES[0]
        write_run(root, "varibad", "scratch_expert", tr, te, seed, [-100.0 + 5.0 * i * i for i in range(n)])
        write_run(root, "varibad", "ga", tr, te, seed, [-30.0] * n)
    with open(golden, "w", newline="") as f:
        f.write(report(root))


def brute_smooth(ys, w=5):
    half = w // 2
    out = []
    for i in range(len(ys)):
        window = [ys[j] for j in range(i - half, i + half + 1) if 0 <= j < len(ys)]
        out.append(sum(window) / len(window))
    return out


def brute_time(frames, sm, budget):
    peak = max(sm)
    if peak > 0:
        th = 0.98 * peak
    elif peak < 0:
        th = 1.02 * peak
    else:
        th = peak - 0.02 * (max(sm) - min(sm))
    hits = [f for f, v in zip(frames, sm) if v >= th]
    return hits[0] / budget


def pairs(doc):
    out = []
    for p in doc:
        fm, ym = p["meta_frames"], p["meta"]
        fs, ys = p["scratch_frames"], p["scratch"]
        budget = p["budget"]
        sm, ss = brute_smooth(ym), brute_smooth(ys)
        tm, ts = brute_time(fm, sm, budget), brute_time(fs, ss, budget)
        den = max(ss) - p["r0"]
        out.append({
            "meta_smooth": sm, "scratch_smooth": ss,
            "meta_peak": max(sm), "scratch_peak": max(ss),
            "meta_time": tm, "scratch_time": ts,
            "c_score": None if den == 0 else (max(sm) - p["r0"]) / den,
            "c_rate": min(ts, 1.0) / (min(tm, 1.0) + 0.01),
        })
    return out


if __name__ == "__main__":
    if len(sys.argv) == 4 and sys.argv[1] == "generate":
        generate(sys.argv[2], sys.argv[3])
    elif len(sys.argv) == 3 and sys.argv[1] == "report":
        sys.stdout.write(report(sys.argv[2]))
    elif len(sys.argv) == 2 and sys.argv[1] == "pairs":
        json.dump(pairs(json.load(sys.stdin)), sys.stdout)
    else:
        sys.exit(__doc__)
