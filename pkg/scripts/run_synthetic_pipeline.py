"""Generate the 8-class synthetic set and push it through the full pipeline.

    python3 scripts/run_synthetic_pipeline.py --out runs/synth --seed 0
"""

import argparse
import json
import logging
from pathlib import Path

import numpy as np

from powerprof import cluster, synth, workflow


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/synth")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--per-class", type=int, default=250)
    ap.add_argument("--gan-epochs", type=int, default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")

    out = Path(args.out)
    ds = synth.generate_dataset(synth.default_specs(), args.per_class, seed=args.seed)
    profiles, _ = synth.write_dataset(out / "data", ds)
    gan_cfg = {} if args.gan_epochs is None else {"epochs": args.gan_epochs}
    cfg = workflow.PipelineConfig(out=str(out / "run"), seed=args.seed, profiles=str(profiles), gan=gan_cfg)
    manifest = workflow.run_pipeline(cfg)

    result = cluster.ClusterResult.load(out / "run" / "clusters.json")
    truth = np.array([ds.labels[j] for j in result.job_ids])
    h = cluster.homogeneity(truth, result.labels)
    print(json.dumps(manifest.summary, indent=1, default=float))
    print(f"homogeneity vs generator labels: {h:.3f}")


if __name__ == "__main__":
    main()
