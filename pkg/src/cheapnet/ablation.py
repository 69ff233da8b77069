"""Temperature x branch-count sweeps of online distillation."""
import csv
import math
import os
from dataclasses import replace

from .train import run

GRID_HEADER = ("temperature", "branches", "seed", "epochs", "final_loss", "finite",
               "argmax_invariant", "best_student", "best_val_err", "teacher_val_err")


class Grid:
    def __init__(self):
        self.rows = []

    def complete(self, temperatures, branch_counts):
        have = {(r["temperature"], r["branches"]) for r in self.rows}
        return all((float(t), int(m)) in have for t in temperatures for m in branch_counts)

    def write(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(GRID_HEADER)
            for r in self.rows:
                w.writerow([_cell(r[k]) for k in GRID_HEADER])


def _cell(v):
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return f"{v:.6f}"
    return v


def sweep(arch, train_set, val_set, cfg, temperatures=(1.0, 4.0, 10.0), branch_counts=(1, 2, 4),
          out_dir=None, deterministic=True):
    """Train one OD run per (temperature, branches) cell and summarise each in a grid row.

    With ``out_dir`` every run's per-epoch metrics are also written to
    ``out_dir/t<temperature>_m<branches>/metrics.csv``.
    """
    grid = Grid()
    for t in temperatures:
        for m in branch_counts:
            c = replace(cfg, loss=replace(cfg.loss, scheme="od", temperature=float(t), branches=int(m)))
            result, _, _ = run(arch, train_set, val_set, c, deterministic=deterministic)
            met = result.metrics
            losses = met.column("loss") + [v for i in range(m) for v in met.column(f"s{i}_train_loss")]
            if out_dir is not None:
                cell = os.path.join(out_dir, f"t{t:g}_m{m}")
                os.makedirs(cell, exist_ok=True)
                met.write(os.path.join(cell, "metrics.csv"))
            grid.rows.append({
                "temperature": float(t), "branches": int(m), "seed": c.seed, "epochs": c.epochs,
                "final_loss": float(met.rows[-1]["loss"]),
                "finite": all(math.isfinite(v) for v in losses),
                "argmax_invariant": all(met.column("argmax_invariant")),
                "best_student": result.best, "best_val_err": float(result.best_val_err),
                "teacher_val_err": float(result.teacher_val_err),
            })
    return grid
