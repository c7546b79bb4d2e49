"""Experiment runner: configs, records, ablation suites, reports and figures."""

from .runner import (ExperimentRecord, ablation_suite, compare, export_activations, run_experiment,
                     run_probe)
from .spec import ExperimentSpec, build_spec, load_config

__all__ = ["ExperimentRecord", "ExperimentSpec", "ablation_suite", "build_spec", "compare",
           "export_activations", "load_config", "run_experiment", "run_probe"]
