"""Shared-backbone multi-task ViT engine with per-task low-rank experts."""

from .backbone import Backbone, BackboneConfig, backbone_forward, init_random_backbone
from .engine import TaskRequest, collate, run_flow
from .evaluation import DearInputs, dear
from .experts import Expert, Registry, new_expert
from .numerics import BACKEND

__all__ = [
    "BACKEND", "Backbone", "BackboneConfig", "DearInputs", "Expert", "Registry", "TaskRequest",
    "backbone_forward", "collate", "dear", "init_random_backbone", "new_expert", "run_flow",
]
