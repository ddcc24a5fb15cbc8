"""Side-by-side comparison of measured metrics with the published tables."""

from __future__ import annotations

import json
from pathlib import Path

from .errors import ReportError
from .train_eval import Metrics

METRIC_KEYS = ("rmse", "mae", "mape", "r2")
ALIASES = {"ELC": "ECL", "ETTH1": "ETTH"}
OURS = "ours"


def load_baselines(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def canonical_dataset(name: str, baselines: dict) -> str:
    lookup = {k.upper(): k for k in baselines}
    key = name.upper()
    key = ALIASES.get(key, key)
    if key not in lookup:
        raise ReportError(f"unknown dataset {name!r}; baselines cover {sorted(baselines)}")
    return lookup[key]


def _ours_row(m: Metrics | dict) -> dict:
    d = m.to_dict() if isinstance(m, Metrics) else dict(m)
    return {"rmse": d["rmse"], "mae": d["mae"], "mape": d["mape_percent"], "r2": d["r_squared"]}


def _ratio(a, b):
    if a is None or b is None or b == 0:
        return None
    return a / b


def _fmt(v) -> str:
    return "n/a" if v is None else f"{v:.4f}"


def report(metrics_by_dataset: dict, baselines_path, protocol: dict | None = None,
           strict: bool = True) -> tuple[str, dict]:
    """Build the comparison as ``(text_table, json_document)``.

    Every published row is listed; measured rows and their ratio to the
    published model appear for datasets present in ``metrics_by_dataset``.
    MAPE is in percent throughout. With ``strict=False`` a dataset the
    baselines do not cover is listed under ``unmatched`` with no ratios
    instead of raising.
    """
    baselines = load_baselines(baselines_path)
    ours, unmatched = {}, {}
    for name, m in metrics_by_dataset.items():
        try:
            ours[canonical_dataset(name, baselines)] = _ours_row(m)
        except ReportError:
            if strict:
                raise
            unmatched[name] = _ours_row(m)
    doc: dict = {"protocol": protocol or {}, "datasets": {}}
    lines = [f"{'dataset':<9} {'model':<16} " + " ".join(f"{k:>10}" for k in METRIC_KEYS)]
    for ds_name, models in baselines.items():
        entry = {"published": models}
        for model_name, row in models.items():
            lines.append(f"{ds_name:<9} {model_name:<16} " + " ".join(f"{_fmt(row.get(k)):>10}" for k in METRIC_KEYS))
        if ds_name in ours:
            mine = ours[ds_name]
            entry[OURS] = mine
            lines.append(f"{ds_name:<9} {OURS:<16} " + " ".join(f"{_fmt(mine[k]):>10}" for k in METRIC_KEYS))
            ratios = {}
            for model_name, row in models.items():
                ratios[model_name] = {k: _ratio(mine[k], row.get(k)) for k in METRIC_KEYS}
                label = f"ours/{model_name}"
                lines.append(
                    f"{ds_name:<9} {label:<16} " + " ".join(f"{_fmt(ratios[model_name][k]):>10}" for k in METRIC_KEYS)
                )
            entry["ratios"] = ratios
        doc["datasets"][ds_name] = entry
    for name, mine in unmatched.items():
        lines.append(f"{name:<9} {OURS:<16} " + " ".join(f"{_fmt(mine[k]):>10}" for k in METRIC_KEYS))
    if unmatched:
        doc["unmatched"] = unmatched
    if protocol:
        lines.append("protocol: " + ", ".join(f"{k}={v}" for k, v in sorted(protocol.items())))
    return "\n".join(lines), doc


def write_report(text: str, doc: dict, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(text + "\n", encoding="utf-8")
    (out / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
