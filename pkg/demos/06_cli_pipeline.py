"""
===========================
The command-line pipeline
===========================

Every step below is one ``oodforge`` invocation; the same commands work from
a shell.  Each output gets a ``.manifest.json`` naming its inputs.
"""
import json
import sys
import tempfile
from pathlib import Path

from oodforge.cli import main

work = Path(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="oodforge_"))
work.mkdir(exist_ok=True)
p = lambda name: str(work / name)  # noqa: E731

steps = [
    ["gen-data", "--preset", "fig5-in", "--n", "1000", "--seed", "7", "--out", p("in.csv")],
    ["gen-data", "--preset", "fig5-ood-near", "--n", "100", "--seed", "7", "--out", p("ood.csv")],
    ["gen-data", "--preset", "fig5-annulus", "--n", "500", "--seed", "8", "--out", p("far.csv")],
    ["train", "--loss", "confidence", "--beta", "1", "--in", p("in.csv"), "--ood", p("ood.csv"),
     "--epochs", "30", "--hidden", "64", "--lr", "0.005", "--batch", "64",
     "--out-ckpt", p("conf.ckpt"), "--report", p("conf.json")],
    ["eval", "--ckpt", p("conf.ckpt"), "--in", p("in.csv"), "--ood", p("far.csv"), "--report", p("eval.json")],
    ["map", "--ckpt", p("conf.ckpt"), "--resolution", "100", "--out", p("map")],
    ["histogram", "--ckpt", p("conf.ckpt"), "--data", p("in.csv"), p("far.csv"), "--out-dir", p("hist")],
]
for argv in steps:
    code = main(argv)
    print(f"oodforge {' '.join(a.replace(str(work) + '/', '') for a in argv)}  -> exit {code}")
    if code:
        raise SystemExit(code)

print(json.dumps(json.loads((work / "eval.json").read_text()), indent=2))
print("artifacts in", work)
