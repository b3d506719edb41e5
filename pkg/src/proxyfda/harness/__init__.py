"""Desk-scale fine-tuning experiments on synthetic concept worlds."""
from .config import ExperimentConfig, apply_overrides, load_config, parse_config
from .encoder import Encoder
from .experiment import load_reports, run_experiment, summarize, write_summary
from .probe import ProbeConfig, ProbeError, delta_lp, linear_probe
from .train import RunConfig, RunReport, finetune, load_checkpoint, save_checkpoint
from .world import World, WorldSpec, generate_world, overlap_pool
