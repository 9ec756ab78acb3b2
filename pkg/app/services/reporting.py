"""
Result files. Every CSV starts with a `# config_hash=...,master_seed=...` line
and every JSON file carries the same two keys, so artifacts are traceable to
the run that produced them. Nothing time-dependent is written.
"""

import json
import logging
import math
from pathlib import Path
from typing import Dict, Iterable, Sequence

import pandas as pd

from app.schemas import EpisodeRecord, MetricsSummary

logger = logging.getLogger(__name__)

EPISODE_COLUMNS = ["seed", "pnl", "return", "terminal_inv", "map", "n_trades"]

# Row labels of the distributional comparison table.
PNL_ROWS = [
    ("Mean PnL", "mean"),
    ("Std PnL", "std"),
    ("Skewness PnL", "skewness"),
    ("Kurtosis PnL", "kurtosis"),
    ("Jarque Bera PnL", "jarque_bera"),
    ("JB p-value PnL", "jarque_bera_pvalue"),
    ("10th percentile PnL", "p10"),
    ("20th percentile PnL", "p20"),
    ("80th percentile PnL", "p80"),
    ("90th percentile PnL", "p90"),
]
INVENTORY_ROWS = [
    ("Mean terminal inv.", "mean"),
    ("Std terminal inv.", "std"),
    ("Skewness terminal inv.", "skewness"),
    ("Kurtosis terminal inv.", "kurtosis"),
    ("Jarque Bera terminal inv.", "jarque_bera"),
    ("JB p-value terminal inv.", "jarque_bera_pvalue"),
    ("10th percentile terminal inv.", "p10"),
    ("20th percentile terminal inv.", "p20"),
    ("80th percentile terminal inv.", "p80"),
    ("90th percentile terminal inv.", "p90"),
]


class RunStamp:
    """Provenance written into every artifact of a run."""

    def __init__(self, config_hash: str, master_seed: int):
        self.config_hash = config_hash
        self.master_seed = master_seed

    @property
    def comment(self) -> str:
        return f"# config_hash={self.config_hash},master_seed={self.master_seed}\n"

    def as_dict(self) -> Dict:
        return {"config_hash": self.config_hash, "master_seed": self.master_seed}


def write_csv(frame: pd.DataFrame, path: Path, stamp: RunStamp) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        fh.write(stamp.comment)
        frame.to_csv(fh, index=False, float_format="%.10g", lineterminator="\n")
    logger.info("wrote %s (%d rows)", path, len(frame))
    return path


def _json_safe(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    return value


def write_json(payload: Dict, path: Path, stamp: RunStamp) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = {**stamp.as_dict(), **_json_safe(payload)}
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    logger.info("wrote %s", path)
    return path


def episodes_frame(records: Iterable[EpisodeRecord]) -> pd.DataFrame:
    rows = [
        {
            "seed": r.seed,
            "pnl": r.pnl,
            "return": r.episode_return,
            "terminal_inv": r.terminal_inventory,
            "map": r.map,
            "n_trades": r.n_trades,
        }
        for r in records
    ]
    return pd.DataFrame(rows, columns=EPISODE_COLUMNS)


def summary_table(summaries: Dict[str, MetricsSummary]) -> Dict[str, Dict[str, float]]:
    """{row label: {controller: value}}, keyed by the comparison-table row names."""
    table: Dict[str, Dict[str, float]] = {}

    def put(label: str, name: str, value: float):
        table.setdefault(label, {})[name] = value

    for name, s in summaries.items():
        put("Mean episode return", name, s.mean_return)
        for label, attr in PNL_ROWS:
            put(label, name, getattr(s.pnl, attr))
        for label, attr in INVENTORY_ROWS:
            put(label, name, getattr(s.inventory, attr))
        put("Abs. mean terminal inv.", name, s.abs_mean_terminal_inventory)
        put("Sharpe ratio", name, s.sharpe)
        put("MAP", name, s.map)
        put("(Mean PnL)/MAP", name, s.pnl_to_map)
        put("Mean number of trades", name, s.mean_trades)
    return table


def render_text_report(summaries: Dict[str, MetricsSummary], stamp: RunStamp) -> str:
    names = list(summaries)
    table = summary_table(summaries)
    width = max(len(label) for label in table) + 2
    lines = [stamp.comment.rstrip(), "".ljust(width) + "".join(n.rjust(14) for n in names)]
    for label, values in table.items():
        lines.append(label.ljust(width) + "".join(f"{values[n]:14.4f}" for n in names))
    return "\n".join(lines) + "\n"


def write_summary(summaries: Dict[str, MetricsSummary], out_dir: Path, stamp: RunStamp) -> Sequence[Path]:
    """summary.txt (human readable) and summary.json (same row names)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    text_path = out_dir / "summary.txt"
    text_path.write_text(render_text_report(summaries, stamp))
    json_path = write_json({"summary": summary_table(summaries)}, out_dir / "summary.json", stamp)
    return text_path, json_path
