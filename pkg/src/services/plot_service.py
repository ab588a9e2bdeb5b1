"""
Plot Service for AMOC Lab
Handles deterministic SVG figures for sweeps, training curves, variant bars and embeddings
"""

import json
import os
from enum import Enum

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np
import structlog

from src.errors import ArgumentError, FormatError
from src.models.report import RobustnessReport
from src.services.checkpoint_service import load_embeddings
from src.services.evaluation_service import pca_project
from src.services.training_service import read_metrics

log = structlog.get_logger()

# fixed element ids and no creation date keep the SVG text stable
SVG_RC = {'svg.hashsalt': 'amoc-lab', 'svg.fonttype': 'none'}
SVG_METADATA = {'Date': None}

LOSS_KEYS = ('loss', 'ccc', 'adversarial')


class PlotKind(Enum):
    EPS_CURVE = "eps-curve"
    LOSS_CURVES = "loss-curves"
    VARIANT_BARS = "variant-bars"
    EMBEDDING_SCATTER = "embedding-scatter"
    SWEEP_CURVE = "sweep-curve"


def _label(path, fallback):
    return fallback or os.path.splitext(os.path.basename(path))[0]


def _eps_curve(ax, paths):
    for i, path in enumerate(paths):
        report = RobustnessReport.load(path)
        if not report.curve:
            raise FormatError(f"{path}: report has no epsilon curve")
        eps = [e * 255.0 for e, _ in report.curve]
        acc = [a for _, a in report.curve]
        ax.plot(eps, acc, marker='o', gid=f'curve-{i}', label=_label(path, report.label))
    ax.set_xlabel('epsilon (x/255)')
    ax.set_ylabel('accuracy (%)')


def _loss_curves(ax, paths):
    index = 0
    for path in paths:
        records = read_metrics(path)
        epochs = [r['epoch'] for r in records]
        for key in LOSS_KEYS:
            if records and key in records[0]:
                ax.plot(epochs, [r[key] for r in records], marker='o', gid=f'curve-{index}',
                        label=f"{_label(path, '')}:{key}")
                index += 1
    ax.set_xlabel('epoch')
    ax.set_ylabel('loss')


def _variant_bars(ax, paths):
    reports = [RobustnessReport.load(path) for path in paths]
    columns = ['clean', *reports[0].attacks]
    positions = np.arange(len(reports))
    width = 0.8 / len(columns)
    for j, column in enumerate(columns):
        values = [r.clean if column == 'clean' else r.attacks.get(column, 0.0) for r in reports]
        ax.bar(positions + j * width, values, width, gid=f'bars-{column}', label=column)
    ax.set_xticks(positions + width * (len(columns) - 1) / 2)
    ax.set_xticklabels([_label(p, r.label) for p, r in zip(paths, reports)])
    ax.set_ylabel('accuracy (%)')


def _embedding_scatter(ax, paths):
    matrix, labels, _ = load_embeddings(paths[0])
    coords, ratio = pca_project(matrix, 2)
    ax.scatter(coords[:, 0], coords[:, 1], c=labels, cmap='tab10', s=6, gid='embedding-points')
    ax.set_xlabel(f'PC1 ({100 * ratio[0]:.1f}%)')
    ax.set_ylabel(f'PC2 ({100 * ratio[1]:.1f}%)')


def _sweep_curve(ax, paths):
    records = []
    for path in paths:
        with open(path) as handle:
            records.extend(json.load(handle))
    if not records:
        raise ArgumentError("sweep file holds no records")
    values = []
    for record in records:
        if record['value'] not in values:
            values.append(record['value'])
    positions = np.arange(len(values))
    for i, metric in enumerate(('robust', 'clean')):
        means = [np.mean([r[metric] for r in records if r['value'] == v]) for v in values]
        ax.plot(positions, means, marker='o', gid=f'curve-{i}', label=metric)
    ax.set_xticks(positions)
    ax.set_xticklabels([str(v) for v in values])
    ax.set_xlabel(records[0]['param'])
    ax.set_ylabel('accuracy (%)')


DRAWERS = {
    PlotKind.EPS_CURVE: _eps_curve,
    PlotKind.LOSS_CURVES: _loss_curves,
    PlotKind.VARIANT_BARS: _variant_bars,
    PlotKind.EMBEDDING_SCATTER: _embedding_scatter,
    PlotKind.SWEEP_CURVE: _sweep_curve,
}


def emit_plots(reports, kind, out):
    """Render one SVG of the requested kind; `out` is a .svg path or a directory"""
    if not reports:
        raise ArgumentError("no report files given")
    try:
        kind = PlotKind(kind)
    except ValueError:
        raise ArgumentError(f"unsupported plot kind {kind!r}; choose from {[k.value for k in PlotKind]}")
    if str(out).endswith('.svg'):
        path = str(out)
    else:
        path = os.path.join(out, f"{kind.value}.svg")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)

    with matplotlib.rc_context(SVG_RC):
        fig, ax = plt.subplots(figsize=(6, 4))
        try:
            DRAWERS[kind](ax, list(reports))
            if kind != PlotKind.EMBEDDING_SCATTER:
                ax.legend(loc='best', fontsize=7)
            ax.grid(True, alpha=0.3)
            fig.tight_layout()
            fig.savefig(path, format='svg', metadata=SVG_METADATA)
        finally:
            plt.close(fig)
    log.info("plot_written", kind=kind.value, path=path, inputs=len(reports))
    return path
