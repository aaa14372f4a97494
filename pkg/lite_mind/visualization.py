"""Plotly figures for retrieval heatmaps, filter libraries and training curves"""
import logging
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd
import plotly.graph_objects as go
from plotly.subplots import make_subplots

from lite_mind.backbone import FilterBlock
from lite_mind.constants import CURVE_COLORS, FILTER_COLORSCALE, HEATMAP_COLORSCALE, STYLES
from lite_mind.utils import create_colorbar_dict

logger = logging.getLogger(__name__)


def _update_figure_layout(fig: go.Figure, title: str) -> None:
    fig.update_layout(
        title=dict(text=title, font=dict(size=STYLES['HEADER']['size'])),
        height=STYLES['FIGURE']['height'],
        plot_bgcolor=STYLES['FIGURE']['plot_bgcolor'],
        paper_bgcolor=STYLES['FIGURE']['paper_bgcolor'],
        showlegend=True,
    )


def similarity_heatmap(similarity: np.ndarray, ids: Optional[Sequence[str]] = None,
                       block: Optional[int] = None) -> go.Figure:
    """Voxel-by-image cosine similarity; `block` adds a zoomed top-left sub-block"""
    similarity = np.asarray(similarity)
    min_val, max_val = float(similarity.min()), float(similarity.max())
    labels = list(ids) if ids is not None else [str(i) for i in range(similarity.shape[0])]
    panels = [('All test pairs', similarity, labels)]
    if block:
        block = min(block, similarity.shape[0])
        panels.append((f'First {block} pairs', similarity[:block, :block], labels[:block]))
    fig = make_subplots(rows=1, cols=len(panels), subplot_titles=[title for title, _, _ in panels],
                        horizontal_spacing=0.12)
    for col, (_, values, names) in enumerate(panels, start=1):
        fig.add_trace(
            go.Heatmap(
                z=values, x=names, y=names,
                colorscale=HEATMAP_COLORSCALE, zmin=min_val, zmax=max_val,
                colorbar=create_colorbar_dict(min_val, max_val, 'Cosine', x_position=1.02),
                showscale=col == len(panels),
                hovertemplate='voxel: %{y}<br>image: %{x}<br>cosine: %{z:.3f}<extra></extra>',
            ),
            row=1, col=col,
        )
        fig.update_yaxes(autorange='reversed', title_text='Voxel embedding', row=1, col=col)
        fig.update_xaxes(title_text='Image embedding', row=1, col=col)
    _update_figure_layout(fig, 'Retrieval similarity')
    return fig


def filter_library_figure(block: FilterBlock, index: int = 0) -> go.Figure:
    """Real and imaginary parts of each filter k_m, tokens by channels"""
    filters = block.filters.detach().cpu().numpy()
    count = filters.shape[0]
    limit = float(np.abs(filters).max()) or 1.0
    fig = make_subplots(
        rows=2, cols=count,
        subplot_titles=[f'k{m + 1} {part}' for part in ('real', 'imag') for m in range(count)],
        vertical_spacing=0.15, horizontal_spacing=0.05,
    )
    for row, part in enumerate((0, 1), start=1):
        for m in range(count):
            fig.add_trace(
                go.Heatmap(
                    z=filters[m, :, :, part],
                    colorscale=FILTER_COLORSCALE, zmin=-limit, zmax=limit,
                    colorbar=create_colorbar_dict(-limit, limit, 'Weight'),
                    showscale=row == 1 and m == count - 1,
                ),
                row=row, col=m + 1,
            )
    fig.update_xaxes(title_text='Channel')
    fig.update_yaxes(title_text='Frequency')
    _update_figure_layout(fig, f'Filter library of block {index}')
    return fig


def loss_curve_figure(curve: pd.DataFrame) -> go.Figure:
    """Train loss on the left axis, eval top-1 on the right"""
    fig = make_subplots(specs=[[{'secondary_y': True}]])
    fig.add_trace(
        go.Scatter(x=curve['epoch'], y=curve['train_loss'], mode='lines+markers',
                   name='train loss', line=dict(color=CURVE_COLORS['train_loss'])),
        secondary_y=False,
    )
    for column, name in (('eval_top1_fwd', 'top-1 voxel to image'), ('eval_top1_bwd', 'top-1 image to voxel')):
        if curve[column].notna().any():
            fig.add_trace(
                go.Scatter(x=curve['epoch'], y=curve[column], mode='lines+markers', name=name,
                           line=dict(color=CURVE_COLORS[column], dash='dot')),
                secondary_y=True,
            )
    fig.update_xaxes(title_text='Epoch')
    fig.update_yaxes(title_text='Loss', secondary_y=False)
    fig.update_yaxes(title_text='Top-1 accuracy', range=[0, 1], secondary_y=True)
    _update_figure_layout(fig, 'Training curve')
    return fig


def write_figure(fig: go.Figure, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.write_html(str(path), include_plotlyjs='cdn')
    logger.info(f"Wrote figure to {path}")
    return path
