"""Train every user-encoder variant on one synthetic dataset and compare them.

    python scripts/run_ablation.py --out results/ablation.csv
    python scripts/run_ablation.py --users 2000 --ads 400 --steps 200   # quick look
"""
import argparse
import csv
import json
import logging
import time

from mcsbn.experiment import ABLATION_VARIANTS, ablation_budget, check_ordering, evaluate_variant, prepare
from mcsbn.synthetic import SyntheticConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--users", type=int, default=10_000)
    ap.add_argument("--ads", type=int, default=2_000)
    ap.add_argument("--topics", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=600)
    ap.add_argument("--dim", type=int, default=128)
    ap.add_argument("--eval-every", type=int, default=60)
    ap.add_argument("--variants", default=",".join(ABLATION_VARIANTS + ("bow",)))
    ap.add_argument("--out", help="CSV with one row per variant")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = ablation_budget(max_steps=args.steps, d=args.dim, eval_every=args.eval_every, seed=args.seed)
    t0 = time.perf_counter()
    prep = prepare(SyntheticConfig(num_users=args.users, num_ads=args.ads, num_topics=args.topics, seed=args.seed), cfg)
    logging.info("prepared %d train / %d test examples, |V| = %d (%.0fs)",
                 len(prep.train), len(prep.test), len(prep.vocab), prep.seconds)
    rows = []
    for v in args.variants.split(","):
        res = evaluate_variant(v, prep, cfg)
        rows.append(res.row())
        print(json.dumps(rows[-1]), flush=True)
    if args.out:
        with open(args.out, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=sorted({k for r in rows for k in r}))
            w.writeheader()
            w.writerows(rows)
    aucs = {r["variant"]: r["auc"] for r in rows}
    if all(v in aucs for v in ABLATION_VARIANTS):
        check = check_ordering(aucs)
        for text, ok in check.checks:
            print(("ok   " if ok else "FAIL ") + text)
    print(f"total {time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
