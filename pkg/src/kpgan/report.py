"""Report emission: summary/convergence/score CSVs and dependency-free SVG plots.

Every output is a pure function of the run directories it reads, so emitting a
report twice gives byte-identical files.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from statistics import median

import numpy as np

from kpgan.checkpoint import Checkpoint
from kpgan.synthdata import heldout_samples
from kpgan.train import EVAL_SEED, GANState, RunRecord, iterations_to_threshold, load_task
from kpgan.transfer import TransferBlock, export_scores

WIDTH, HEIGHT = 800, 600
PALETTE = (
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf", "#393b79", "#637939", "#8c6d31", "#843c39", "#7b4173", "#3182bd",
)
SUMMARY_COLUMNS = ("label", "mode", "seed", "best_iteration", "best_frechet", "final_frechet",
                   "iterations_to_threshold")
CONVERGENCE_COLUMNS = ("label", "mode", "seed", "iteration", "mean_frechet", "mean_kmmd")
SCORE_COLUMNS = ("label", "seed", "layer", "param_type", "new_class", "rank", "source_class", "score")
SCATTER_POINTS = 300


@dataclass
class RunCell:
    """One finished run directory: cell.json + record.csv (+ best.ckpt)."""
    path: Path
    label: str
    mode: str
    seed: int
    record: RunRecord

    @property
    def best_checkpoint(self) -> Path:
        return self.path / "best.ckpt"


def discover_cells(root: str | Path, skip: Path | None = None) -> list[RunCell]:
    cells = []
    for meta_path in sorted(Path(root).rglob("cell.json")):
        if skip is not None and skip in meta_path.parents:
            continue
        meta = json.loads(meta_path.read_text())
        record_path = meta_path.parent / "record.csv"
        record = RunRecord.from_csv(record_path) if record_path.exists() else RunRecord(meta["label"])
        cells.append(RunCell(meta_path.parent, meta["label"], meta["mode"], int(meta["seed"]), record))
    cells.sort(key=lambda c: (c.label, c.mode, c.seed))
    return cells


def config_hash(root: str | Path, skip: Path | None = None) -> str:
    """Hash over every effective config file under root, in path order."""
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("config.ini")):
        if skip is not None and skip in p.parents:
            continue
        h.update(p.relative_to(root).as_posix().encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def _fmt(x: float) -> str:
    return f"{x:.2f}".rstrip("0").rstrip(".") if x == x else "nan"


class Svg:
    """Tiny fixed-canvas SVG writer."""

    def __init__(self, title: str, chash: str):
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}">',
            f"<!-- config-hash: {chash} -->",
            f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="#ffffff"/>',
            f'<text x="{WIDTH / 2}" y="24" font-size="16" text-anchor="middle">{_escape(title)}</text>',
        ]

    def add(self, element: str) -> None:
        self.parts.append(element)

    def text(self, x, y, s, size=12, anchor="start", color="#000000") -> None:
        self.add(f'<text x="{_fmt(x)}" y="{_fmt(y)}" font-size="{size}" text-anchor="{anchor}" '
                 f'fill="{color}">{_escape(s)}</text>')

    def render(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def _escape(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


class _Axes:
    def __init__(self, x0, x1, y0, y1, box=(70, 50, 760, 540), log_y=False):
        self.log_y = log_y
        if log_y:
            y0, y1 = math.log10(y0), math.log10(y1)
        if x1 == x0:
            x0, x1 = x0 - 1, x1 + 1
        if y1 == y0:
            y0, y1 = y0 - 1, y1 + 1
        self.lim = (x0, x1, y0, y1)
        self.box = box

    def map(self, x, y):
        x0, x1, y0, y1 = self.lim
        left, top, right, bottom = self.box
        if self.log_y:
            y = math.log10(max(y, 10 ** y0))
        return left + (x - x0) / (x1 - x0) * (right - left), bottom - (y - y0) / (y1 - y0) * (bottom - top)

    def frame(self, svg: Svg, xlabel: str, ylabel: str, ticks: int = 5) -> None:
        left, top, right, bottom = self.box
        x0, x1, y0, y1 = self.lim
        svg.add(f'<rect x="{left}" y="{top}" width="{right - left}" height="{bottom - top}" '
                f'fill="none" stroke="#444444"/>')
        for i in range(ticks + 1):
            fx = x0 + (x1 - x0) * i / ticks
            px = left + (right - left) * i / ticks
            svg.text(px, bottom + 16, _fmt(fx), 10, "middle")
            fy = y0 + (y1 - y0) * i / ticks
            py = bottom - (bottom - top) * i / ticks
            svg.text(left - 6, py + 4, _fmt(10 ** fy) if self.log_y else _fmt(fy), 10, "end")
        svg.text((left + right) / 2, bottom + 36, xlabel, 12, "middle")
        svg.text(16, (top + bottom) / 2, ylabel, 12, "middle")


def scatter_svg(real: np.ndarray, fake: np.ndarray, title: str, chash: str, color: str) -> str:
    pts = np.concatenate([real, fake])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    pad = 0.1 * max(float((hi - lo).max()), 1e-6)
    ax = _Axes(lo[0] - pad, hi[0] + pad, lo[1] - pad, hi[1] + pad)
    svg = Svg(title, chash)
    ax.frame(svg, "x0", "x1")
    for (x, y) in real:
        px, py = ax.map(x, y)
        svg.add(f'<circle cx="{_fmt(px)}" cy="{_fmt(py)}" r="2" fill="#bbbbbb"/>')
    for (x, y) in fake:
        px, py = ax.map(x, y)
        svg.add(f'<circle cx="{_fmt(px)}" cy="{_fmt(py)}" r="2" fill="{color}"/>')
    svg.text(600, 70, "real", 12, color="#888888")
    svg.text(600, 86, "generated", 12, color=color)
    return svg.render()


def convergence_svg(curves: dict[str, list[tuple[int, float]]], chash: str) -> str:
    svg = Svg("mean target Frechet distance vs iteration (median over seeds)", chash)
    pts = [p for c in curves.values() for p in c]
    if not pts:
        _Axes(0, 1, 0.01, 1, log_y=True).frame(svg, "iteration", "Frechet")
        return svg.render()
    xs, ys = [p[0] for p in pts], [max(p[1], 1e-6) for p in pts]
    ax = _Axes(0, max(xs), min(ys), max(ys), log_y=True)
    ax.frame(svg, "iteration", "Frechet (log)")
    for i, (name, curve) in enumerate(sorted(curves.items())):
        color = PALETTE[i % len(PALETTE)]
        path = " ".join(f"{_fmt(px)},{_fmt(py)}" for px, py in (ax.map(x, max(y, 1e-6)) for x, y in curve))
        svg.add(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="2"/>')
        svg.text(600, 70 + 16 * i, name, 12, color=color)
    return svg.render()


def _heat_color(value: float, vmax: float) -> str:
    """Diverging white-centred scale: blue for negative, red for positive."""
    t = 0.0 if vmax == 0 else max(-1.0, min(1.0, value / vmax))
    if t >= 0:
        r, g, b = 255, round(255 * (1 - t)), round(255 * (1 - t))
    else:
        r, g, b = round(255 * (1 + t)), round(255 * (1 + t)), 255
    return f"#{r:02x}{g:02x}{b:02x}"


def heatmap_svg(mats: list[tuple[np.ndarray, np.ndarray]], new_index: int, new_class: int,
                title: str, chash: str) -> str:
    """Layers (rows) x source classes (columns), gamma and beta side by side."""
    svg = Svg(title, chash)
    layers, n = len(mats), mats[0][0].shape[1]
    vmax = max(float(np.abs(m[new_index]).max()) for pair in mats for m in pair)
    panel_w, top, bottom = 330, 70, 540
    cw, ch = panel_w / n, (bottom - top) / layers
    for p, name in enumerate(("gamma", "beta")):
        left = 60 + p * (panel_w + 60)
        svg.text(left + panel_w / 2, top - 10, f"{name} scores, class {new_class}", 12, "middle")
        for l in range(layers):
            row = mats[l][p][new_index]
            for i in range(n):
                x, y = left + i * cw, top + l * ch
                svg.add(f'<rect x="{_fmt(x)}" y="{_fmt(y)}" width="{_fmt(cw)}" height="{_fmt(ch)}" '
                        f'fill="{_heat_color(float(row[i]), vmax)}" stroke="#ffffff" '
                        f'data-layer="{l}" data-source="{i}" data-value="{float(row[i])!r}"/>')
            svg.text(left - 6, top + (l + 0.5) * ch + 4, f"L{l}", 10, "end")
        for i in range(n):
            svg.text(left + (i + 0.5) * cw, bottom + 16, str(i), 10, "middle")
    svg.text(WIDTH / 2, 580, f"colour scale: |score| up to {_fmt(vmax)}", 11, "middle")
    return svg.render()


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def emit_report(root: str | Path, out_dir: str | Path, tau: float = 0.15, top_k: int = 3) -> list[Path]:
    """Write summary.csv, convergence.csv, scores_topk.csv and SVGs for every
    run cell found under ``root``. Returns the written paths."""
    root, out_dir = Path(root), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cells = discover_cells(root, skip=out_dir)
    chash = config_hash(root, skip=out_dir)
    written: list[Path] = []

    summary, convergence, scores = [], [], []
    for cell in cells:
        rec = cell.record
        if rec.points:
            best_it, best_val = rec.best("frechet")
            its = iterations_to_threshold(rec, "frechet", tau)
            summary.append([cell.label, cell.mode, cell.seed, best_it, repr(best_val),
                            repr(rec.points[-1].mean("frechet")), "" if its is None else its])
        for p in rec.points:
            convergence.append([cell.label, cell.mode, cell.seed, p.iteration,
                                repr(p.mean("frechet")), repr(p.mean("kmmd"))])
        if cell.best_checkpoint.exists():
            state = GANState.from_checkpoint(Checkpoint.load(cell.best_checkpoint))
            if isinstance(state.block, TransferBlock):
                k = min(top_k, state.block.config.num_old)
                for row in export_scores(state.block, k):
                    scores.append([cell.label, cell.seed, *row[:5], repr(row[5])])
    for name, header, rows in (("summary.csv", SUMMARY_COLUMNS, summary),
                               ("convergence.csv", CONVERGENCE_COLUMNS, convergence),
                               ("scores_topk.csv", SCORE_COLUMNS, scores)):
        _write_csv(out_dir / name, header, rows)
        written.append(out_dir / name)

    # median curve per label over seeds, on the iterations all seeds share
    by_label: dict[str, list[RunCell]] = {}
    for cell in cells:
        by_label.setdefault(cell.label, []).append(cell)
    curves = {}
    for label, group in by_label.items():
        series = [dict(c.record.curve("frechet")) for c in group if c.record.points]
        if not series:
            continue
        shared = sorted(set.intersection(*(set(s) for s in series)))
        curves[label] = [(it, median(s[it] for s in series)) for it in shared]
    path = out_dir / "convergence.svg"
    path.write_text(convergence_svg(curves, chash))
    written.append(path)

    # scatter per (label, class) and heatmaps, from the lowest seed of each label
    for label, group in sorted(by_label.items()):
        cell = min(group, key=lambda c: c.seed)
        if not cell.best_checkpoint.exists():
            continue
        ckpt = Checkpoint.load(cell.best_checkpoint)
        state, task = GANState.from_checkpoint(ckpt), load_task(ckpt)
        classes = state.active_classes
        fake = state.generate(classes, SCATTER_POINTS, EVAL_SEED)
        for c in classes:
            real = heldout_samples(task, c, SCATTER_POINTS, EVAL_SEED)
            path = out_dir / f"scatter_{label}_class{c}.svg"
            path.write_text(scatter_svg(real, fake[c], f"{label}: class {c} (seed {cell.seed})", chash,
                                        PALETTE[c % len(PALETTE)]))
            written.append(path)
        if isinstance(state.block, TransferBlock):
            mats = state.block.score_matrices()
            n = state.block.config.num_old
            for j in range(state.block.config.num_new):
                path = out_dir / f"scores_{label}_class{n + j}.svg"
                path.write_text(heatmap_svg(mats, j, n + j, f"{label}: similarity scores (seed {cell.seed})", chash))
                written.append(path)
    return written
