"""Report serialization: JSON, delimited tables, and rendered figures.

The benchmark path writes three artifacts side by side: the raw JSON
report, a CSV with one row per (model, extraction seed), and PNG figures
showing how signature and sign effort scale with layer width.
"""
from __future__ import annotations

import csv
import json
import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

BENCH_COLUMNS = [
    "model", "width", "params_layer2", "extraction_seed",
    "t_signature_s", "t_sign_s15_s", "t_sign_s200_s",
    "q_critpoint", "q_signature", "q_sign_s15", "q_sign_s200",
    "sign_ratio_s200_over_s15", "sign_share_of_signature_time",
]


def write_json(payload: dict, path: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(payload, fh, indent=2)
    os.replace(tmp, path)


def write_bench_csv(rows: list, path: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in BENCH_COLUMNS})
    os.replace(tmp, path)


def format_bench_table(summary: list) -> str:
    """Aligned text table of per-model means and variances."""
    header = (f"{'Model':>14} {'Params':>7} | {'Signature [s]':>22} | "
              f"{'Sign s=15 [s]':>22} | {'Sign s=200 [s]':>22} | {'Ratio':>7}")
    lines = [header, "-" * len(header)]
    for e in summary:
        lines.append(
            f"{e['model']:>14} {e['params_layer2']:>7} | "
            f"{e['t_signature_mean']:>11.3f} ±{e['t_signature_var']:>9.4f} | "
            f"{e['t_sign_s15_mean']:>11.4f} ±{e['t_sign_s15_var']:>9.5f} | "
            f"{e['t_sign_s200_mean']:>11.4f} ±{e['t_sign_s200_var']:>9.5f} | "
            f"x{e['sign_ratio_mean']:>6.2f}")
    return "\n".join(lines)


def summarize_bench(rows: list) -> list:
    by_model = {}
    for r in rows:
        by_model.setdefault(r["model"], []).append(r)
    out = []
    for model, rs in by_model.items():
        def col(name):
            return np.array([r[name] for r in rs], dtype=float)
        out.append({
            "model": model,
            "width": rs[0]["width"],
            "params_layer2": rs[0]["params_layer2"],
            "n_seeds": len(rs),
            "t_signature_mean": float(col("t_signature_s").mean()),
            "t_signature_var": float(col("t_signature_s").var()),
            "t_sign_s15_mean": float(col("t_sign_s15_s").mean()),
            "t_sign_s15_var": float(col("t_sign_s15_s").var()),
            "t_sign_s200_mean": float(col("t_sign_s200_s").mean()),
            "t_sign_s200_var": float(col("t_sign_s200_s").var()),
            "q_signature_mean": float(col("q_signature").mean()),
            "q_sign_s15_mean": float(col("q_sign_s15").mean()),
            "q_sign_s200_mean": float(col("q_sign_s200").mean()),
            "q_critpoint_mean": float(col("q_critpoint").mean()),
            "sign_ratio_mean": float(col("sign_ratio_s200_over_s15").mean()),
        })
    out.sort(key=lambda e: e["width"])
    return out


def render_bench_figures(summary: list, out_dir: str, prefix: str = "bench"):
    """Two PNGs: time vs width and queries vs width (log scale)."""
    os.makedirs(out_dir, exist_ok=True)
    widths = [e["width"] for e in summary]
    paths = []

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(widths, [e["t_signature_mean"] for e in summary],
            marker="s", label="signature")
    ax.plot(widths, [e["t_sign_s200_mean"] for e in summary],
            marker="^", label="sign s=200")
    ax.plot(widths, [e["t_sign_s15_mean"] for e in summary],
            marker="*", label="sign s=15")
    ax.set_xlabel("layer width")
    ax.set_ylabel("time [s]")
    ax.set_yscale("log")
    ax.grid(True, linestyle="--", alpha=0.5)
    ax.legend()
    ax.set_title("Signature vs sign recovery time (layer 2)")
    p = os.path.join(out_dir, f"{prefix}_times.png")
    fig.savefig(p, dpi=130, bbox_inches="tight")
    plt.close(fig)
    paths.append(p)

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(widths, [e["q_signature_mean"] + e["q_critpoint_mean"]
                     for e in summary], marker="s", label="signature+search")
    ax.plot(widths, [e["q_sign_s200_mean"] for e in summary],
            marker="^", label="sign s=200")
    ax.plot(widths, [e["q_sign_s15_mean"] for e in summary],
            marker="*", label="sign s=15")
    ax.set_xlabel("layer width")
    ax.set_ylabel("queries")
    ax.set_yscale("log")
    ax.grid(True, linestyle="--", alpha=0.5)
    ax.legend()
    ax.set_title("Signature vs sign recovery queries (layer 2)")
    p = os.path.join(out_dir, f"{prefix}_queries.png")
    fig.savefig(p, dpi=130, bbox_inches="tight")
    plt.close(fig)
    paths.append(p)
    return paths
