"""
A miniature run of the whole experiment matrix.

Small images and few epochs, so it finishes in seconds.  The full default
run is ``hyqal run-matrix --set "seeds=[0,1,2,3,4]" --out results``.
"""
import sys
import tempfile
from pathlib import Path

from hyqal.pipeline import ExperimentConfig, run_matrix, summarize

SMALL = {
    "data": {"count": 192, "height": 32, "width": 32, "patients": 12},
    "split_ratios": [6, 1, 2, 3],
    "model": {"encoder": {"height": 32, "width": 32, "blocks": [[8, 2], [16, 2]], "feature_dim": 16},
              "quantum": {"qubits": 4, "layers": 2}},
    "baseline_encoder": {"height": 32, "width": 32, "blocks": [[8, 2]], "feature_dim": 16, "style": "simple"},
    "pretrain": {"epochs": 3},
    "finetune": {"epochs": 6},
    "seeds": [0, 1],
}


def main(out=None):
    cfg = ExperimentConfig.from_dict(SMALL)
    out = Path(out or tempfile.mkdtemp(prefix="hyqal-demo-"))
    records = run_matrix(cfg, out_dir=out)
    for variant, s in summarize(records).items():
        print(f"{variant:<20} AUC {s['auc_mean']:.3f} +- {s['auc_std']:.3f}  accuracy {s['accuracy_mean']:.3f}")
    print("reports in", out)


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else None)
