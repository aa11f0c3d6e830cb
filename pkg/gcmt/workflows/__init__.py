from gcmt.workflows.experiments import ExperimentReport, run_ablation, run_multi_source, run_sweep

__all__ = ["ExperimentReport", "run_ablation", "run_multi_source", "run_sweep"]
