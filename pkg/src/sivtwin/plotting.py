"""PNG rendering of report tables.  matplotlib is imported lazily."""
from __future__ import annotations

import io
from pathlib import Path

import numpy as np

from .io import atomic_write_bytes


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _groups(columns, rows):
    """Split rows on a leading text column; yields (label, numeric columns, array)."""
    if rows and isinstance(rows[0][0], str):
        labels = list(dict.fromkeys(r[0] for r in rows))
        for lab in labels:
            sub = [r[1:] for r in rows if r[0] == lab]
            yield lab, columns[1:], np.array(sub, dtype=float)
    else:
        yield None, columns, np.array(rows, dtype=float)


def _scatter_pairs(ax, columns, rows):
    # columns come in (x: cr, y: crf) pairs after the label column
    lab = [r[0] for r in rows]
    x = np.array([r[1] for r in rows], float)
    y = np.array([r[2] for r in rows], float)
    ax.loglog(x, y, "o")
    for l, a, b in zip(lab, x, y):
        ax.annotate(l, (a, b), fontsize=7)
    lim = [min(x.min(), y.min()) / 2, max(x.max(), y.max()) * 2]
    ax.plot(lim, lim, "k--", lw=0.8)
    ax.set_xlabel(columns[1])
    ax.set_ylabel(columns[2])


def render_table(name: str, columns, rows, out_dir) -> Path | None:
    """One PNG per table; returns its path, or None if nothing plottable."""
    if not rows:
        return None
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    if name.endswith("_scatter"):
        _scatter_pairs(ax, columns, rows)
    else:
        for lab, cols, a in _groups(list(columns), rows):
            if a.ndim != 2 or a.shape[1] < 2:
                continue
            if cols[:3] == ["bin_lo", "bin_hi", "count"]:
                ax.stairs(a[:, 2], np.append(a[:, 0], a[-1, 1]), label=lab)
                ax.set_xlabel(name.split("_", 1)[-1])
                ax.set_ylabel("count")
                continue
            if len(cols) > 2 and cols[2].startswith(("std_error", "rate_err")):
                ax.errorbar(a[:, 0], a[:, 1], a[:, 2], fmt=".", ms=3, label=lab)
            elif name.startswith(("fig2c_g2", "fig4_g2")):
                ax.plot(a[:, 0], a[:, 2], ".", ms=2, label=lab)
            else:
                ax.plot(a[:, 0], a[:, 1], ".-", ms=3, lw=0.8, label=lab)
            ax.set_xlabel(cols[0])
            ax.set_ylabel(cols[1] if not name.startswith(("fig2c_g2", "fig4_g2")) else "g2_corr")
        if name == "fig2e_decay":
            ax.set_yscale("log")
        if any(isinstance(r[0], str) for r in rows[:1]):
            ax.legend(fontsize=7)
    ax.set_title(name, fontsize=8)
    fig.tight_layout()
    path = Path(out_dir) / f"{name}.png"
    # no timestamp metadata, so identical data gives identical bytes
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=120, metadata={"Software": None})
    plt.close(fig)
    return atomic_write_bytes(path, buf.getvalue())


def render_tables(tables: dict, out_dir) -> list[Path]:
    out = []
    for name, (cols, rows) in tables.items():
        p = render_table(name, cols, rows, out_dir)
        if p is not None:
            out.append(p)
    return out
