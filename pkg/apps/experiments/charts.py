"""
Geometry for the SVG report templates (bars, lines, grayscale rasters)
"""

import math
from typing import Sequence

WIDTH = 640
HEIGHT = 400
MARGIN = {'left': 70, 'right': 150, 'top': 40, 'bottom': 60}
PALETTE = ('#1f77b4', '#ff7f0e', '#2ca02c', '#d62728', '#9467bd', '#8c564b', '#e377c2', '#7f7f7f')


def _plot_box() -> dict:
    return {
        'left': MARGIN['left'],
        'top': MARGIN['top'],
        'width': WIDTH - MARGIN['left'] - MARGIN['right'],
        'height': HEIGHT - MARGIN['top'] - MARGIN['bottom'],
    }


def _ticks(low: float, high: float, count: int = 5) -> list:
    if high == low:
        return [low]
    return [low + (high - low) * i / (count - 1) for i in range(count)]


def _fmt(value: float) -> str:
    return f'{value:.4g}'


def bar_chart(labels: Sequence[str], values: Sequence[float], title: str, y_label: str,
              reference: float = None) -> dict:
    """Bars from zero; an optional dashed reference line (e.g. ratio 1)"""
    box = _plot_box()
    top_value = max(list(values) + ([reference] if reference is not None else []) + [0.0]) or 1.0
    slot = box['width'] / max(len(values), 1)
    scale = box['height'] / (top_value * 1.1)
    bottom = box['top'] + box['height']
    bars = []
    for index, (label, value) in enumerate(zip(labels, values)):
        height = max(value, 0.0) * scale
        bars.append({
            'x': round(box['left'] + index * slot + slot * 0.15, 2),
            'y': round(bottom - height, 2),
            'width': round(slot * 0.7, 2),
            'height': round(height, 2),
            'label': label,
            'label_x': round(box['left'] + (index + 0.5) * slot, 2),
            'value': _fmt(value),
            'color': PALETTE[index % len(PALETTE)],
        })
    ticks = [{'y': round(bottom - t * scale, 2), 'text': _fmt(t)} for t in _ticks(0.0, top_value * 1.1)]
    context = {'width': WIDTH, 'height': HEIGHT, 'box': box, 'bottom': bottom, 'bars': bars,
               'ticks': ticks, 'title': title, 'y_label': y_label, 'reference': None}
    if reference is not None:
        context['reference'] = {'y': round(bottom - reference * scale, 2), 'text': _fmt(reference)}
    return context


def line_chart(series: dict, title: str, x_label: str, y_label: str, log_y: bool = False) -> dict:
    """
    Polylines for ``series`` mapping name -> (xs, ys)

    With ``log_y`` non-positive values are dropped before the log10 transform.
    """
    box = _plot_box()
    transformed = {}
    for name, (xs, ys) in series.items():
        pairs = [(x, y) for x, y in zip(xs, ys) if math.isfinite(y) and (not log_y or y > 0)]
        transformed[name] = [(x, math.log10(y) if log_y else y) for x, y in pairs]
    points = [p for pairs in transformed.values() for p in pairs]
    if not points:
        points = [(0.0, 0.0)]
    x_low, x_high = min(p[0] for p in points), max(p[0] for p in points)
    y_low, y_high = min(p[1] for p in points), max(p[1] for p in points)
    x_span = (x_high - x_low) or 1.0
    y_span = (y_high - y_low) or 1.0

    def project(x, y):
        return (round(box['left'] + (x - x_low) / x_span * box['width'], 2),
                round(box['top'] + box['height'] - (y - y_low) / y_span * box['height'], 2))

    lines = []
    for index, (name, pairs) in enumerate(transformed.items()):
        coords = [project(x, y) for x, y in pairs]
        lines.append({
            'name': name,
            'points': ' '.join(f'{x},{y}' for x, y in coords),
            'color': PALETTE[index % len(PALETTE)],
            'legend_y': box['top'] + 18 * index,
        })
    y_ticks = [{'y': project(x_low, t)[1], 'text': _fmt(10 ** t if log_y else t)} for t in _ticks(y_low, y_high)]
    x_ticks = [{'x': project(t, y_low)[0], 'text': _fmt(t)} for t in _ticks(x_low, x_high)]
    return {'width': WIDTH, 'height': HEIGHT, 'box': box, 'bottom': box['top'] + box['height'],
            'right': box['left'] + box['width'], 'lines': lines, 'y_ticks': y_ticks, 'x_ticks': x_ticks,
            'title': title, 'x_label': x_label, 'y_label': y_label}


def raster(grid: Sequence[Sequence[float]], title: str, cell: int = 32) -> dict:
    """Grayscale cells, brightest at the grid maximum; a flat grid renders black"""
    values = [v for row in grid for v in row]
    low, high = min(values), max(values)
    span = high - low
    cells = []
    for r, row in enumerate(grid):
        for c, value in enumerate(row):
            level = int(round(255 * (value - low) / span)) if span > 0 else 0
            cells.append({'x': c * cell, 'y': 30 + r * cell, 'size': cell, 'gray': f'rgb({level},{level},{level})',
                          'value': _fmt(value)})
    columns = len(grid[0]) if grid else 0
    return {'width': columns * cell, 'height': 30 + len(grid) * cell, 'cells': cells, 'title': title}
