"""Cross-validated comparison of the four model configurations.

Uses the library API rather than the CLI.  Measurements carry most of the
class signal here and images very little, so adding measurements (config 2)
should help most; the triplet terms matter more when images are informative.

    python demos/ablation.py [EPOCHS]
"""
import sys

from tripletnet.evaluation import SyntheticSpec, generate_synthetic, render_svg, run_ablation
from tripletnet.training import TrainConfig

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 6

spec = SyntheticSpec(n_classes=8, class_sizes=(5, 8, 12, 15, 20, 30, 40, 60), image_side=16,
                     separation=1.5, image_separation=0.5)
data = generate_synthetic(spec, seed=0).to_dataset()
print(f"{len(data)} specimens, {len(data.species)} species, {data.measurements.shape[1]} measurements")

result = run_ablation(data, k=5, seed=0, base=TrainConfig(epochs=epochs))
for rep, p in zip(result.reports, result.p_vs_prev):
    folds = " ".join(f"{a:.2f}" for a in rep.fold_accuracies)
    extra = "" if p is None else f"  p vs previous = {p:.4f}"
    print(f"config {rep.config}: mean {rep.mean:.3f} +/- {rep.std:.3f}  [{folds}]{extra}")

with open("ablation.svg", "w") as fh:
    fh.write(render_svg(result.reports))
print("wrote ablation.svg")
