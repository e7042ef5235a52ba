"""Hold out a pair of generator classes as unknowns and sweep the open-set threshold.

Reads the latents of a finished synthetic run plus the generator labels:

    python3 scripts/threshold_sweep.py --run runs/synth/run --labels runs/synth/data/labels.csv --unknown 6,7
"""

import argparse
from pathlib import Path

import numpy as np

from powerprof import openset, synth, workflow


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--run", required=True, help="pipeline output directory")
    ap.add_argument("--labels", required=True, help="labels.csv written by the generator")
    ap.add_argument("--unknown", default="6,7", help="comma-separated class ids held out as unknown")
    ap.add_argument("--grid", type=int, default=200)
    ap.add_argument("--out", default=None, help="CSV path (default: <run>/holdout_sweep.csv)")
    args = ap.parse_args()

    ids, Z = workflow.read_latents(Path(args.run) / workflow.ARTIFACTS["latents"])
    labels, _ = synth.read_labels(args.labels)
    y = np.array([labels[j] for j in ids])
    held = [int(c) for c in args.unknown.split(",")]

    known = np.flatnonzero(~np.isin(y, held))
    tr, te = openset.stratified_split(y[known], 0.2, seed=0)
    tr, te = known[tr], known[te]
    unk = np.flatnonzero(np.isin(y, held))
    u_val, u_test = unk[::2], unk[1::2]

    model = openset.train_closed(Z[tr], y[tr])
    sweep = openset.sweep_threshold(model, Z[te], y[te], Z[u_val], args.grid)
    out = Path(args.out) if args.out else Path(args.run) / "holdout_sweep.csv"
    sweep.write_csv(out)

    test_Z = np.vstack([Z[te], Z[u_test]])
    test_y = np.concatenate([y[te], y[u_test]])
    for name, tau in (("p95", model.train_p95), ("tau*", sweep.tau_star)):
        r = openset.evaluate(model, tau, test_Z, test_y)
        print(f"{name:>4} = {tau:.4f}: open-set {r['open_acc']:.3f}  closed-set {r['closed_acc']:.3f}")
    step = max(1, len(sweep.taus) // 10)
    for t, a in zip(sweep.normalized_taus[::step], sweep.accuracy[::step]):
        print(f"  tau/tau_max {t:.2f}  accuracy {a:.3f}  {'#' * int(40 * a)}")
    print(f"curve -> {out}")


if __name__ == "__main__":
    main()
