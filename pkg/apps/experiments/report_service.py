"""
Report Service
Writes a subcommand's CSV / JSON-lines data files, renders SVG charts from the
CSV files it just wrote, and closes the run with manifest.json.
"""
import logging
from collections import OrderedDict
from pathlib import Path
from typing import Iterable, Optional, Sequence

from django.conf import settings
from django.template.loader import render_to_string

from . import charts
from .manifest import RunManifest, canonical_json, read_csv, write_csv, write_jsonl, write_manifest_json

logger = logging.getLogger(__name__)


class ReportService:
    """Service to write the artifacts of one subcommand run"""

    def __init__(self, subcommand: str, resolved: dict, out: Optional[str] = None):
        self.directory = Path(out) if out else Path(settings.OUTPUT_DIR) / subcommand
        self.directory.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest(subcommand=subcommand, resolved=resolved, seed=resolved.get('seed', 0))

    def path(self, name: str) -> Path:
        return self.directory / name

    def _register(self, path: Path) -> Path:
        self.manifest.artifacts.append(path.name)
        logger.info(f"Wrote {path}")
        return path

    def csv(self, name: str, columns: Sequence[str], rows: Iterable[Sequence]) -> Path:
        return self._register(write_csv(self.path(name), self.manifest, columns, rows))

    def jsonl(self, name: str, records: Iterable[dict]) -> Path:
        return self._register(write_jsonl(self.path(name), self.manifest, records))

    def register(self, path: Path) -> Path:
        """Record an artifact written by someone else (e.g. a checkpoint)"""
        return self._register(Path(path))

    def _svg(self, name: str, template: str, context: dict) -> Path:
        path = self.path(name)
        context = {**context, 'manifest': canonical_json(self.manifest.header())}
        path.write_text(render_to_string(template, context), encoding='utf-8')
        return self._register(path)

    def bar_svg(self, name: str, csv_path: Path, label_column: str, value_column: str, title: str,
                reference: Optional[float] = None) -> Path:
        _, rows = read_csv(csv_path)
        context = charts.bar_chart(
            [row[label_column] for row in rows], [float(row[value_column]) for row in rows],
            title, value_column, reference,
        )
        return self._svg(name, 'reports/bar_chart.svg', context)

    def line_svg(self, name: str, csv_path: Path, x_column: str, y_columns: Sequence[str], title: str,
                 series_column: Optional[str] = None, log_y: bool = False) -> Path:
        """
        One polyline per ``series_column`` value and y column

        Series are named ``<series>`` for a single y column, else ``<series>:<column>``.
        """
        _, rows = read_csv(csv_path)
        series = OrderedDict()
        for row in rows:
            group = row[series_column] if series_column else ''
            for column in y_columns:
                if row[column] in ('', 'None'):
                    continue
                key = (group if len(y_columns) == 1 else f'{group}:{column}'.lstrip(':')) or column
                xs, ys = series.setdefault(key, ([], []))
                xs.append(float(row[x_column]))
                ys.append(float(row[column]))
        context = charts.line_chart(series, title, x_column, ', '.join(y_columns), log_y)
        return self._svg(name, 'reports/line_chart.svg', context)

    def raster_svg(self, name: str, csv_path: Path, title: str) -> Path:
        """Grayscale raster of a row,col,value CSV grid"""
        _, rows = read_csv(csv_path)
        height = max(int(row['row']) for row in rows) + 1
        width = max(int(row['col']) for row in rows) + 1
        grid = [[0.0] * width for _ in range(height)]
        for row in rows:
            grid[int(row['row'])][int(row['col'])] = float(row['value'])
        return self._svg(name, 'reports/raster.svg', charts.raster(grid, title))

    def finish(self) -> Path:
        return write_manifest_json(self.directory, self.manifest)
