'''
Report files: `<stem>.json` (machine-readable, via EvalReportSerializer),
`<stem>.txt` (aligned table plus per-fold detail) and, for reports with a
numeric axis, `<stem>_series.csv`.
'''
from __future__ import annotations

import csv
import json
from pathlib import Path

from rawspeech_app.evaluation import EvalReport, format_fold_table, format_table
from rawspeech_app.exceptions import ConfigError
from rawspeech_app.serializers import EvalReportSerializer

SERIES_COLUMNS = ['length_s', 'mean_uar', 'std_uar']


def report_to_dict(report: EvalReport) -> dict:
    return json.loads(json.dumps(EvalReportSerializer(report).data))


def report_from_dict(data: dict) -> EvalReport:
    serializer = EvalReportSerializer(data=data)

    if not serializer.is_valid():
        raise ConfigError(f'Invalid report document: {serializer.errors}')

    return serializer.save()


def write_series(report: EvalReport, path: Path) -> Path:
    with path.open('w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(SERIES_COLUMNS)
        for value, mean, std in report.series:
            writer.writerow([repr(value), repr(mean), repr(std)])
    return path


def write_report(report: EvalReport, out_dir: str | Path, stem: str = 'report') -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    paths = {'json': out_dir / f'{stem}.json', 'table': out_dir / f'{stem}.txt'}

    paths['json'].write_text(json.dumps(report_to_dict(report), indent=2, sort_keys=True) + '\n', encoding='utf-8')

    text = format_table(report)
    for row in report.rows:
        text += f'\n== {row.label} ==\n' + format_fold_table(row)
    paths['table'].write_text(text, encoding='utf-8')

    if report.series:
        paths['series'] = write_series(report, out_dir / f'{stem}_series.csv')

    return paths


def read_report(path: str | Path) -> EvalReport:
    path = Path(path)

    try:
        data = json.loads(path.read_text(encoding='utf-8'))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f'Cannot read report {path}: {exc}') from None

    return report_from_dict(data)
