"""End-to-end tour on a small synthetic dataset.

Generates data, checks it for a site shortcut, trains one model and classifies
the training specimens with it.  Everything goes through the CLI so the files
left behind in the output directory are the same ones a user would get.

    python demos/walkthrough.py [OUT_DIR]
"""
import csv
import sys
from pathlib import Path

from tripletnet.cli import main as tripletnet


def step(title):
    print(f"\n== {title}")


def run(*argv):
    code = tripletnet([str(a) for a in argv])
    print(f"(exit {code})")
    return code


def main(out=Path("demo_out")):
    out.mkdir(parents=True, exist_ok=True)

    step("generate 6 species, 10..30 specimens each, one leaky site column")
    (out / "gen.cfg").write_text("seed = 1\nclasses = 6\nclass_sizes = 10,12,15,20,25,30\n"
                                 "image_side = 16\nleakage = true\n")
    run("generate", "--config", out / "gen.cfg", "--out", out / "data")

    cfg = out / "data" / "dataset.cfg"
    cfg.write_text(cfg.read_text() + "config = 4\nepochs = 40\nconv_channels = 4,8,16\n"
                   "n_trees = 30\ncheckpoint = train/model.ckpt\n")

    step("validate")
    run("validate", "--config", cfg)

    step("probe: the site_code column identifies the species by itself")
    code = run("probe", "--config", cfg, "--out", out / "data" / "probe")
    assert code == 2  # leaky on purpose; the flagged columns are dropped before training

    step("train configuration 4 (images + measurements + dynamic-margin triplets)")
    run("train", "--config", cfg, "--out", out / "data" / "train")
    with open(out / "data" / "train" / "history.csv") as fh:
        hist = list(csv.DictReader(fh))
    for row in hist[::10] + hist[-1:]:
        print(f"  epoch {row['epoch']:>3}  lr {float(row['lr']):.2e}  loss {float(row['loss_total']):.3f}"
              f"  train acc {float(row['train_acc']):.3f}")

    step("classify the training specimens")
    run("classify", "--config", cfg, "--out", out / "data" / "classify")
    with open(out / "data" / "manifest.csv") as fh:
        truth = {r["id"]: r["species"] for r in csv.DictReader(fh)}
    with open(out / "data" / "classify" / "predictions.csv") as fh:
        preds = list(csv.DictReader(fh))
    hits = sum(truth[p["id"]] == p["predicted_species"] for p in preds)
    print(f"  {hits}/{len(preds)} correct, e.g. {preds[0]}")


if __name__ == "__main__":
    main(Path(sys.argv[1]) if len(sys.argv) > 1 else Path("demo_out"))
