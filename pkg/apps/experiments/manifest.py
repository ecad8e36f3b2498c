"""
Run manifests and the CSV / JSON-lines writers that embed them

Data files carry only the deterministic part of the manifest (config hash,
seed, tool version, subcommand, resolved config); timestamps and artifact paths
go to ``manifest.json`` alone, so identical configs produce identical data files.
"""

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from django.conf import settings
from django.utils import timezone

logger = logging.getLogger(__name__)

CSV_MANIFEST_PREFIX = '# manifest: '


def canonical_json(value) -> str:
    return json.dumps(value, sort_keys=True, separators=(',', ':'), allow_nan=True)


def config_hash(resolved: dict) -> str:
    """sha256 of the canonical JSON bytes of a resolved config"""
    return hashlib.sha256(canonical_json(resolved).encode('utf-8')).hexdigest()


@dataclass
class RunManifest:
    subcommand: str
    resolved: dict
    seed: int
    tool_version: str = field(default_factory=lambda: settings.TOOL_VERSION)
    started_at: str = field(default_factory=lambda: timezone.now().isoformat())
    finished_at: str = ''
    artifacts: list = field(default_factory=list)

    @property
    def config_hash(self) -> str:
        return config_hash(self.resolved)

    def header(self) -> dict:
        """The part of the manifest embedded in data files"""
        return {
            'subcommand': self.subcommand,
            'config_hash': self.config_hash,
            'seed': self.seed,
            'tool_version': self.tool_version,
            'config': self.resolved,
        }

    def to_dict(self) -> dict:
        return {
            **self.header(),
            'started_at': self.started_at,
            'finished_at': self.finished_at,
            'artifacts': self.artifacts,
        }


def write_csv(path: Path, manifest: RunManifest, columns: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', newline='', encoding='utf-8') as handle:
        handle.write(CSV_MANIFEST_PREFIX + canonical_json(manifest.header()) + '\n')
        writer = csv.writer(handle, lineterminator='\n')
        writer.writerow(columns)
        for row in rows:
            writer.writerow(row)
    return path


def read_csv(path: Path) -> tuple:
    """
    Returns:
        (manifest header dict or None, list of row dicts with string values)
    """
    header = None
    lines = []
    with Path(path).open(newline='', encoding='utf-8') as handle:
        for line in handle:
            if line.startswith(CSV_MANIFEST_PREFIX):
                header = json.loads(line[len(CSV_MANIFEST_PREFIX):])
            elif not line.startswith('#'):
                lines.append(line)
    return header, list(csv.DictReader(lines))


def write_jsonl(path: Path, manifest: RunManifest, records: Iterable[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', encoding='utf-8') as handle:
        handle.write(canonical_json({'manifest': manifest.header()}) + '\n')
        for record in records:
            handle.write(canonical_json(record) + '\n')
    return path


def read_jsonl(path: Path) -> tuple:
    with Path(path).open(encoding='utf-8') as handle:
        records = [json.loads(line) for line in handle if line.strip()]
    if records and 'manifest' in records[0]:
        return records[0]['manifest'], records[1:]
    return None, records


def write_manifest_json(directory: Path, manifest: RunManifest) -> Path:
    manifest.finished_at = timezone.now().isoformat()
    path = Path(directory) / 'manifest.json'
    path.write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + '\n', encoding='utf-8')
    logger.info(f"Wrote manifest {path}")
    return path
