import json
import logging
from pathlib import Path
from typing import Any, Dict, List

import pandas as pd
import plotly.graph_objects as go
from plotly.subplots import make_subplots

from shared.config import EVALS_FILE, TRAIN_LOG_FILE
from shared.models import CheckResult, ContourRecord, MetricReport, TrainLog

LOG_COLUMNS = ["iteration", "inner_loss", "outer_loss"]


class ReportService:
    """Writes run artifacts: CSV tables, JSON records and standalone HTML charts"""

    def __init__(self, output_dir: Path):
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.logger = logging.getLogger(__name__)

    def _save_json(self, file_path: Path, data: Dict[str, Any]) -> Path:
        try:
            with open(file_path, "w", encoding="utf-8") as f:
                json.dump(data, f, indent=2, ensure_ascii=False, default=str)
                f.write("\n")
        except Exception as e:
            self.logger.error(f"Error saving {file_path}: {str(e)}")
            raise
        return file_path

    def _save_csv(self, file_path: Path, table: pd.DataFrame) -> Path:
        try:
            table.to_csv(file_path, index=False, float_format="%.6f", lineterminator="\n")
        except Exception as e:
            self.logger.error(f"Error saving {file_path}: {str(e)}")
            raise
        return file_path

    def _save_html(self, file_path: Path, figure: go.Figure, div_id: str) -> Path:
        # fixed div id and a CDN script tag keep the file byte-identical across runs
        figure.write_html(str(file_path), include_plotlyjs="cdn", div_id=div_id, full_html=True)
        return file_path

    # Training artifacts
    def write_train_log(self, log: TrainLog) -> Dict[str, Path]:
        table = pd.DataFrame([r.model_dump() for r in log.iterations], columns=LOG_COLUMNS)
        csv_path = self._save_csv(self.output_dir / TRAIN_LOG_FILE, table)
        evals = {
            "best_iteration": log.best_iteration,
            "best_dice": log.best_dice,
            "evals": [e.model_dump() for e in log.evals],
        }
        json_path = self._save_json(self.output_dir / EVALS_FILE, evals)
        return {"log": csv_path, "evals": json_path}

    def write_report(self, report: MetricReport, name: str = "report.json") -> Path:
        return self._save_json(self.output_dir / name, report.model_dump(mode="json"))

    def write_contour(self, record: ContourRecord, name: str = "contour.json") -> Path:
        return self._save_json(self.output_dir / name, record.model_dump(mode="json"))

    # Protocol tables
    def write_ablation(self, table: pd.DataFrame, stem: str = "ablation") -> Dict[str, Path]:
        csv_path = self._save_csv(self.output_dir / f"{stem}.csv", table)

        figure = make_subplots(rows=1, cols=3, subplot_titles=("Dice", "ASSD (px)", "HD (px)"))
        for arm, rows in table.groupby("arm", sort=False):
            for col, metric in enumerate(("dice", "assd", "hd"), start=1):
                figure.add_trace(
                    go.Scatter(
                        x=rows["size"],
                        y=rows[metric],
                        error_y=dict(type="data", array=rows[f"{metric}_std"]),
                        mode="lines+markers",
                        name=arm,
                        legendgroup=arm,
                        showlegend=col == 1,
                    ),
                    row=1,
                    col=col,
                )
        figure.update_xaxes(title_text="training set size", type="log")
        figure.update_layout(title="Training set size vs. segmentation quality")
        html_path = self._save_html(self.output_dir / f"{stem}.html", figure, f"{stem}-chart")
        self.logger.info(f"Ablation table written to {csv_path}")
        return {"csv": csv_path, "html": html_path}

    def write_jitter(self, table: pd.DataFrame, stem: str = "jitter") -> Dict[str, Path]:
        csv_path = self._save_csv(self.output_dir / f"{stem}.csv", table)
        figure = go.Figure(
            go.Scatter(
                x=table["fraction"],
                y=table["dice_mean"],
                error_y=dict(type="data", array=table["dice_std"]),
                mode="lines+markers",
                name="dice",
            )
        )
        figure.update_layout(
            title="Center jitter vs. Dice",
            xaxis_title="jitter (fraction of object radius)",
            yaxis_title="mean validation Dice",
        )
        html_path = self._save_html(self.output_dir / f"{stem}.html", figure, f"{stem}-chart")
        self.logger.info(f"Jitter table written to {csv_path}")
        return {"csv": csv_path, "html": html_path}

    def write_checks(self, results: List[CheckResult], stem: str = "checks") -> Path:
        path = self._save_json(self.output_dir / f"{stem}.json", {
            "passed": all(r.passed for r in results),
            "checks": [r.model_dump() for r in results],
        })
        self.logger.info(f"{sum(r.passed for r in results)}/{len(results)} checks passed, written to {path}")
        return path
