"""Curves and tables from training histories."""
from __future__ import annotations

from pathlib import Path
from typing import List, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

CURVE_METRICS = (("val_miou", "mIoU"), ("val_f1", "F1-score"))


def _label(path: Path, history) -> str:
    if history.label:
        return history.label
    return f"{path.parent.name} (X_l={history.x_l})"


def summary_rows(histories) -> List[dict]:
    rows = []
    for path, h in histories:
        last = h.records[-1] if h.records else {}
        best = max(h.records, key=lambda r: r["val_miou"]) if h.records else {}
        rows.append({"run": _label(Path(path), h), "x_l": h.x_l, "epochs": len(h.records),
                     "final_val_miou": last.get("val_miou"), "final_val_f1": last.get("val_f1"),
                     "best_val_miou": best.get("val_miou"), "best_epoch": best.get("epoch")})
    return rows


def format_table(rows) -> str:
    head = f"{'run':<28}{'X_l':>5}{'epochs':>8}{'final mIoU %':>14}{'final F1 %':>12}{'best mIoU %':>13}{'best ep':>9}"
    lines = [head]
    for r in rows:
        pct = lambda v: f"{100 * v:.2f}" if v is not None else "-"
        lines.append(f"{r['run']:<28}{str(r['x_l']):>5}{r['epochs']:>8}{pct(r['final_val_miou']):>14}"
                     f"{pct(r['final_val_f1']):>12}{pct(r['best_val_miou']):>13}{str(r['best_epoch']):>9}")
    return "\n".join(lines) + "\n"


def write_report(histories: Sequence[Tuple[Path, object]], out: Path) -> List[Path]:
    """Per-epoch curves for every history, metric-vs-X_l curves when the
    histories span several labeled counts, and a text table."""
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for key, name in CURVE_METRICS:
        fig, ax = plt.subplots(figsize=(6, 4))
        for path, h in histories:
            ax.plot([r["epoch"] for r in h.records], [r[key] for r in h.records],
                    label=_label(Path(path), h))
        ax.set_xlabel("epoch")
        ax.set_ylabel(f"validation {name}")
        ax.grid(alpha=0.3)
        ax.legend(fontsize=8)
        target = out / f"curve_{key}.png"
        fig.tight_layout()
        fig.savefig(target, dpi=100)
        plt.close(fig)
        written.append(target)

    rows = summary_rows(histories)
    xls = sorted({r["x_l"] for r in rows if r["x_l"] is not None})
    if len(xls) > 1:
        for key, name in CURVE_METRICS:
            fig, ax = plt.subplots(figsize=(6, 4))
            pts = sorted((h.x_l, h.records[-1][key]) for _, h in histories if h.records)
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o")
            ax.set_xlabel("X_l (labeled images)")
            ax.set_ylabel(f"final validation {name}")
            ax.grid(alpha=0.3)
            target = out / f"xl_{key}.png"
            fig.tight_layout()
            fig.savefig(target, dpi=100)
            plt.close(fig)
            written.append(target)

    table = out / "summary.txt"
    table.write_text(format_table(rows))
    written.append(table)
    return written
