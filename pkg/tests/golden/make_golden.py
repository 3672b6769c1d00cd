"""Regenerate mlp_seed11.json. Refuses to write unless the gradient passes a
central-difference check."""

import json
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))
from conftest import golden_case  # noqa: E402

from sharpopt.models import mean_loss_gradient, per_instance_losses  # noqa: E402
from sharpopt.params import ParamVector  # noqa: E402


def main():
    spec, w, batch = golden_case()
    loss, grad, values = mean_loss_gradient(spec, w, batch)
    h = 1e-6
    for j in range(w.dim):
        e = np.zeros(w.dim)
        e[j] = h
        fd = (per_instance_losses(spec, ParamVector(w.layout, w.data + e), batch).mean()
              - per_instance_losses(spec, ParamVector(w.layout, w.data - e), batch).mean()) / (2 * h)
        if abs(fd - grad.data[j]) > 1e-7 * max(1.0, abs(fd)):
            raise SystemExit(f"coordinate {j}: autodiff {grad.data[j]} vs fd {fd}")
    out = {"losses": values.tolist(), "mean_loss": loss, "grad": grad.data.tolist()}
    Path(__file__).with_name("mlp_seed11.json").write_text(json.dumps(out, indent=1) + "\n")
    print(f"wrote golden file ({w.dim} gradient coordinates verified)")


if __name__ == "__main__":
    main()
