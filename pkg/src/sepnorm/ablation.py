"""Resumable ablation grid over normalization schemes, λ values and uniformity targets.

Each cell is one :class:`RunConfig`. Cells live under ``<out>/cells/<key>/``
where ``key`` hashes the run configuration together with the dataset digest, so
re-running a grid (or an overlapping one) trains only the cells that have no
``result.json`` yet.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

from .norm import NormScheme
from .train import RunConfig, data_key, run_cell, write_report

log = logging.getLogger(__name__)

DEFAULT_SCHEMES = ("share:ln", "share:bn", "sep:bn+ln", "sep:bn+bn")
DEFAULT_LAMBDAS = (0.0, 0.01, 0.1, 1.0)
DEFAULT_TARGETS = ("cls", "token", "both")
RESULT_FILE = "result.json"


@dataclass(frozen=True)
class GridSpec:
    schemes: tuple[str, ...] = DEFAULT_SCHEMES
    lambdas: tuple[float, ...] = DEFAULT_LAMBDAS
    targets: tuple[str, ...] = DEFAULT_TARGETS
    seeds: tuple[int, ...] = (0,)

    def cells(self, base: RunConfig) -> list[RunConfig]:
        """Grid cells in report order (scheme, λ, target, seed).

        With λ = 0 the uniformity term vanishes whatever the target, so those
        cells collapse to a single ``target="none"`` cell per scheme and seed.
        """
        out: list[RunConfig] = []
        seen = set()
        for scheme in self.schemes:
            enc = replace(base.encoder, norm_scheme=NormScheme.parse(scheme) if isinstance(scheme, str) else scheme)
            for lam in self.lambdas:
                for target in self.targets:
                    tgt = "none" if lam == 0 else target
                    obj = replace(base.objective, lam=float(lam), uniformity_target=tgt)
                    for seed in self.seeds:
                        cfg = RunConfig(enc, obj, base.optim, base.probe, seed)
                        ident = json.dumps(cfg.to_dict(), sort_keys=True)
                        if ident not in seen:
                            seen.add(ident)
                            out.append(cfg)
        return out


@dataclass
class AblationResult:
    rows: list[dict]
    trained: int
    report_path: Path
    cell_dirs: list[Path] = field(default_factory=list)


def _write_json_atomic(path: Path, payload: dict) -> None:
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(payload, sort_keys=True, indent=1))
    os.replace(tmp, path)


def load_cell(cell_dir: Path, cfg: RunConfig) -> dict | None:
    """The stored report row of a finished cell, or None if it must be (re)run."""
    path = cell_dir / RESULT_FILE
    if not path.exists():
        return None
    stored = json.loads(path.read_text())
    if stored.get("config") != cfg.to_dict():
        log.warning("cell %s holds a different configuration; retraining", cell_dir.name)
        return None
    return stored["row"]


def run_grid(grid: GridSpec, base: RunConfig, data_dir: str | Path, out_dir: str | Path,
             on_cell: Callable[[int, int, RunConfig, bool], None] | None = None) -> AblationResult:
    """Train and analyse every missing cell, then write ``<out>/report.csv``.

    ``on_cell(index, total, cfg, trained)`` is called after each cell.
    """
    out = Path(out_dir)
    (out / "cells").mkdir(parents=True, exist_ok=True)
    digest = data_key(data_dir)
    cells = grid.cells(base)
    rows, dirs, trained = [], [], 0
    for i, cfg in enumerate(cells):
        cell_dir = out / "cells" / cfg.key(digest)
        row = load_cell(cell_dir, cfg)
        fresh = row is None
        if fresh:
            log.info("cell %d/%d: %s lam=%g target=%s seed=%d", i + 1, len(cells), cfg.encoder.norm_scheme,
                     cfg.objective.lam, cfg.objective.uniformity_target, cfg.seed)
            row = run_cell(cfg, data_dir, cell_dir)
            _write_json_atomic(cell_dir / RESULT_FILE, {"config": cfg.to_dict(), "row": row})
            trained += 1
        rows.append(row)
        dirs.append(cell_dir)
        if on_cell is not None:
            on_cell(i, len(cells), cfg, fresh)
    report = out / "report.csv"
    write_report(report, rows)
    return AblationResult(rows, trained, report, dirs)
