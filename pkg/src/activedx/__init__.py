"""Distillation pipeline for multi-turn diagnostic agents.

Turns clinical case files into interactive environments, samples
tree-structured reason-act trajectories from teacher models, filters them
with knowledge-graph metrics, and emits chat-format training records plus
an offline evaluation harness.
"""

__version__ = "0.1.0"

PIPELINE_VERSION = __version__
