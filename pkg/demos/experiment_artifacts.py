"""Tour of the experiment runner and the files it leaves behind.

The `goal-calib` command wraps `run_experiment`, which takes a validated
config plus an experiment name and writes every artifact under the output
directory: JSON reports, CSV series for plotting, per-chain sample files,
and a manifest tying them together with timings and a config hash. This
script drives the same machinery from Python with a deliberately tiny
setup, then reads the artifacts back.
"""

import json
import pathlib
import tempfile

from goalcalib import read_csv, run_experiment

config = {
    "application": "elliptic",
    "mesh": {"nx": 12, "ny": 12},
    "mcmc": {"chains": 2, "max_samples": 150, "seed": 9},
    "output": "unused-overridden-below",
}

with tempfile.TemporaryDirectory() as scratch:
    out = pathlib.Path(scratch)
    for experiment in ("verify", "calibrate"):
        manifest = run_experiment(config, experiment, output_dir=out / experiment)
        print(f"{experiment}: config hash {manifest.hash[:12]}")
        for phase, seconds in manifest.phases.items():
            print(f"  {phase:<18s} {seconds:8.3f} s")
        for name in manifest.artifacts:
            print(f"  wrote {name}")
        print()

    summary = json.loads((out / "calibrate" / "summary.json").read_text())
    print(f"posterior mean      {summary['mean']}")
    print(f"error ratio at mean {summary['error_ratio_at_mean']:.4f}")

    # Chain CSVs round-trip exactly: every float is written with enough
    # digits to reproduce the binary value.
    header, chain = read_csv(out / "calibrate" / "chain_0.csv")
    print(f"chain_0 columns     {header}")
    print(f"proposals recorded  {len(chain['sample_index'])}")
    print(f"final accepted tally {int(chain['accepted_count'][-1])}")
