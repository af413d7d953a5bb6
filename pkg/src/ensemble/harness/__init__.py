"""Scenario catalog, run reports and the command line front end."""

from .report import ScenarioReport, fold_counts, read_trace_csv, report_emit
from .scenarios import Plan, build, scenario_catalog, scenario_doc

__all__ = ["Plan", "ScenarioReport", "build", "fold_counts", "read_trace_csv", "report_emit", "scenario_catalog", "scenario_doc"]
