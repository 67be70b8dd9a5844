"""The command-line pipeline end to end, on a tiny dataset.

Generates data, trains all three networks for a couple of epochs, enrolls a
gallery, matches probes and evaluates.  With so little training most eyes are
likely no-detections; the point is the file flow, not the accuracy.  Swap the
epoch counts for the recipe defaults (drop --epochs) to get usable models.

    python3 demos/04_cli_round_trip.py /tmp/irisnet-demo
"""
import sys
from pathlib import Path

from irisnet.cli import main

out = Path(sys.argv[1] if len(sys.argv) > 1 else "irisnet-demo")
cfg = out / "run.ini"
out.mkdir(parents=True, exist_ok=True)
cfg.write_text("[run]\nscale = desk\nseed = 0\n\n[embedder]\nvariant = segmented\n")


def run(*argv):
    print("$ irisnet", " ".join(argv), flush=True)
    rc = main(list(argv))
    print(f"  -> exit {rc}")
    return rc


run("gen-data", "--config", str(cfg), "--out", str(out / "train"), "--identities", "6", "--per-identity", "8")
run("gen-data", "--config", str(cfg), "--out", str(out / "test"), "--identities", "6", "--per-identity", "4",
    "--first-pose", "500")
train, test = str(out / "train" / "manifest.csv"), str(out / "test" / "manifest.csv")
models = out / "models"
for cmd in ("train-detector", "train-segmenter", "train-embedder"):
    run(cmd, "--config", str(cfg), "--data", train, "--out", str(models), "--epochs", "2")

if run("enroll", "--config", str(cfg), "--data", train, "--models", str(models), "--out", str(out / "enroll")) == 0:
    run("match", "--config", str(cfg), "--data", test, "--models", str(models),
        "--gallery", str(out / "enroll" / "gallery.bin"), "--out", str(out / "match"))
    run("evaluate", "--config", str(cfg), "--data", test, "--models", str(models), "--out", str(out / "eval"))

print("\nfiles written:")
for p in sorted(out.rglob("*")):
    if p.is_file() and "images" not in p.parts and "masks" not in p.parts and "boxes" not in p.parts:
        print("  ", p.relative_to(out))
