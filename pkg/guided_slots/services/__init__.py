"""
Training and evaluation services.

Services implement the workflows of a run by:
- Rendering scenes and building prompts
- Turning diffusion attention into pseudo masks
- Matching slots to segments and computing the objective
- Running the training phases, evaluation, probes and plots

Services take their networks from a ModelBundle and their files from repositories.
"""

from guided_slots.services.evaluation_service import EvaluationService
from guided_slots.services.mask_service import MaskService
from guided_slots.services.metric_service import EvalAccumulator
from guided_slots.services.plot_service import emit_plots
from guided_slots.services.probe_service import ProbeService
from guided_slots.services.scene_service import SceneService
from guided_slots.services.training_service import TrainingService

__all__ = [
    "SceneService",
    "MaskService",
    "EvalAccumulator",
    "ProbeService",
    "EvaluationService",
    "TrainingService",
    "emit_plots",
]
