"""Run summaries, rolling averages and the CSV/JSON metric files."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .fedsim import RoundRecord

CSV_HEADER = ("round", "strategy", "client_id", "accuracy_local", "accuracy_global", "agg_err_norm")


@dataclass(frozen=True)
class ExperimentSummary:
    best_eval_accuracy: float | None
    best_round: int | None
    per_round: tuple[RoundRecord, ...]
    config_echo: dict[str, Any] = field(default_factory=dict)


def summarize(records: Sequence[RoundRecord], config_echo: dict[str, Any] | None = None) -> ExperimentSummary:
    """Best global accuracy and the (first) round index that reached it."""
    records = tuple(records)
    if not records:
        return ExperimentSummary(None, None, records, dict(config_echo or {}))
    best = max(records, key=lambda r: r.global_eval_accuracy)
    return ExperimentSummary(best.global_eval_accuracy, best.round_index, records, dict(config_echo or {}))


def rolling_average(series: Sequence[float], window: int) -> list[float]:
    """Trailing mean; the first ``window - 1`` points average the available prefix."""
    if window < 1:
        raise ValueError(f"window must be at least 1, got {window}")
    values = np.asarray(series, dtype=float)
    sums = np.concatenate([[0.0], np.cumsum(values)])
    idx = np.arange(len(values))
    lo = np.maximum(0, idx + 1 - window)
    return list((sums[idx + 1] - sums[lo]) / (idx + 1 - lo))


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def csv_rows(records: Sequence[RoundRecord]) -> list[tuple[str, ...]]:
    rows = []
    for rec in records:
        for client, acc in enumerate(rec.per_client_eval_accuracy):
            rows.append((str(rec.round_index), rec.strategy, str(client), _fmt(acc),
                         _fmt(rec.global_eval_accuracy), _fmt(rec.aggregation_err_norm)))
    return rows


def format_csv(records: Sequence[RoundRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    writer.writerows(csv_rows(records))
    return buf.getvalue()


def parse_csv(text: str) -> list[dict[str, Any]]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_HEADER:
        raise ValueError(f"unexpected metrics header {reader.fieldnames}")
    out = []
    for row in reader:
        out.append({
            "round": int(row["round"]),
            "strategy": row["strategy"],
            "client_id": int(row["client_id"]),
            "accuracy_local": float(row["accuracy_local"]),
            "accuracy_global": float(row["accuracy_global"]),
            "agg_err_norm": float(row["agg_err_norm"]),
        })
    return out


def summary_dict(summary: ExperimentSummary) -> dict[str, Any]:
    per_round = []
    for rec in summary.per_round:
        d = asdict(rec)
        d["per_client_eval_accuracy"] = list(rec.per_client_eval_accuracy)
        per_round.append(d)
    return {
        "best_eval_accuracy": summary.best_eval_accuracy,
        "best_round": summary.best_round,
        "config": summary.config_echo,
        "per_round": per_round,
    }


def format_json(payload: Any) -> str:
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def _write(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write metrics file {path}: {exc.strerror}") from exc


def write_metrics(summary: ExperimentSummary, prefix: str | Path) -> tuple[Path, Path]:
    """Write ``<prefix>.csv`` and ``<prefix>.json``; return both paths."""
    csv_path, json_path = Path(f"{prefix}.csv"), Path(f"{prefix}.json")
    _write(csv_path, format_csv(summary.per_round))
    _write(json_path, format_json(summary_dict(summary)))
    return csv_path, json_path


def write_comparison(summaries: dict[str, ExperimentSummary], prefix: str | Path) -> tuple[Path, Path]:
    """Merged CSV over several strategies plus a JSON keyed by strategy."""
    records = [rec for name in summaries for rec in summaries[name].per_round]
    csv_path, json_path = Path(f"{prefix}.csv"), Path(f"{prefix}.json")
    _write(csv_path, format_csv(records))
    _write(json_path, format_json({name: summary_dict(s) for name, s in summaries.items()}))
    return csv_path, json_path


def summary_line(summary: ExperimentSummary, label: str = "") -> str:
    head = f"{label}: " if label else ""
    if summary.best_round is None:
        return f"{head}no rounds run"
    return f"{head}best accuracy {summary.best_eval_accuracy:.4f} at round {summary.best_round}"
