"""Ablation grids over regime x encoding x PE x PEFT, and table-shaped printing."""

import dataclasses
import itertools
import logging
from pathlib import Path

from ..lm import ConfigError
from .config import RunConfig
from .engine import RESULT_COLUMNS, load_data, run_cell

log = logging.getLogger("mmgl")

AXES = ("regime", "encoding", "pe", "peft")


def expand_grid(base, axes):
    """Cells as ``(overrides, RunConfig | None, error | None)``; illegal cells carry their error."""
    unknown = set(axes) - set(AXES)
    if unknown:
        raise ValueError(f"unknown grid axes {sorted(unknown)}; expected a subset of {AXES}")
    names = [a for a in AXES if a in axes]
    cells = []
    for values in itertools.product(*(axes[a] for a in names)):
        overrides = dict(zip(names, values))
        dotted = {("pe.kind" if k == "pe" else "peft.kind" if k == "peft" else k): v
                  for k, v in overrides.items()}
        try:
            cfg = base.with_overrides(dotted)
            cfg.validate()
        except (ConfigError, ValueError) as exc:
            cells.append((overrides, None, str(exc)))
            continue
        cells.append((overrides, cfg, None))
    return cells


def run_grid(base, axes, out_dir, data=None):
    out = Path(out_dir)
    results_csv = out / "results.csv"
    rows, rejected = [], []
    datasets = {}
    for overrides, cfg, err in expand_grid(base, axes):
        if cfg is None:
            log.warning("rejected cell %s: %s", overrides, err)
            rejected.append((overrides, err))
            continue
        cfg = dataclasses.replace(cfg, out=str(out / "cells" / cfg.config_id))
        if data is None:
            key = cfg.regime
            if key not in datasets:
                datasets[key] = load_data(cfg)
            cell_data = datasets[key]
        else:
            cell_data = data
        rows.append(run_cell(cfg, cell_data, results_csv))
    return rows, rejected


def format_table(rows, varied=None):
    """Rows labelled by the varied axes, one column per metric."""
    if not rows:
        return "(no rows)"
    keys = [a for a in AXES if len({getattr(r, a) for r in rows}) > 1] if varied is None else varied
    keys = keys or ["config_id"]
    metrics = ("eval_loss", "bleu4", "rougeL", "cider", "trainable_params", "fraction")
    head = [*keys, *metrics]
    body = []
    for r in rows:
        body.append([str(getattr(r, k)) for k in keys] +
                    [f"{getattr(r, m):.4f}" if isinstance(getattr(r, m), float) else str(getattr(r, m))
                     for m in metrics])
    widths = [max(len(h), *(len(b[i]) for b in body)) for i, h in enumerate(head)]
    line = lambda cells: " | ".join(c.ljust(w) for c, w in zip(cells, widths))
    return "\n".join([line(head), "-+-".join("-" * w for w in widths), *map(line, body)])


__all__ = ["expand_grid", "run_grid", "format_table", "RESULT_COLUMNS", "RunConfig"]
