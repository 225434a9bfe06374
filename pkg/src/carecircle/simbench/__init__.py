"""Synthetic corpus generation and the evaluation harness."""
from .config import ConfigError, SignalParams, SimConfig, load_config
from .corpus import (CircleSpec, CorpusError, SubjectStream, SyntheticCorpus, build_store, calibration, corpus_digest,
                     generate_circle, generate_corpus, load_corpus, write_corpus)
from .evals import (Injection, RunPlan, binomial_interval, compare_briefings, inject_misconfig, run_compat_eval,
                    run_exposure_eval, run_fidelity_eval, run_misconfig_eval)
from .report import EvalReport, render_tables
from .world import World, build_world, provision

__all__ = [n for n in dir() if not n.startswith("_")]
