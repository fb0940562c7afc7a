"""
Data access layer (repositories).

Repositories handle all file storage:
- GLTENSR1 tensor files and attention-stack directories
- Dataset manifests
- Run directories (config, metrics log, checkpoints, qualitative samples)

No training or evaluation logic should exist in repositories.
"""

from guided_slots.repositories.dataset_repository import Dataset, read_dataset, write_dataset
from guided_slots.repositories.run_repository import RunRepository, load_checkpoint
from guided_slots.repositories.tensor_repository import read_attn_stack, read_tensor, write_attn_stack, write_tensor

__all__ = [
    "write_tensor",
    "read_tensor",
    "write_attn_stack",
    "read_attn_stack",
    "Dataset",
    "write_dataset",
    "read_dataset",
    "RunRepository",
    "load_checkpoint",
]
