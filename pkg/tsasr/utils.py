import logging
import random
from typing import Optional

import numpy as np
import torch

from tsasr.models import StnoMask
from tsasr.types import ArrayLike

logger = logging.getLogger(__name__)

DTYPE = torch.float64


def seed_everything(seed: int) -> torch.Generator:
    """Seed python, numpy and torch, and return a dedicated torch generator.

    Args:
        seed: Global seed

    Returns:
        A CPU generator seeded with the same value, for shuffles that must not
        depend on how many random numbers the model initialisation consumed.
    """
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    generator = torch.Generator()
    generator.manual_seed(seed)
    return generator


def configure_logging(verbosity: int = 0) -> None:
    level = logging.WARNING
    if verbosity == 1:
        level = logging.INFO
    elif verbosity >= 2:
        level = logging.DEBUG
    logging.basicConfig(
        level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s"
    )


def configure_threads(threads: Optional[int]) -> None:
    if threads is not None and threads > 0:
        torch.set_num_threads(threads)
        logger.debug(f"Using {threads} torch threads")


def as_tensor(values: ArrayLike | StnoMask) -> torch.Tensor:
    """Convert arrays, tensors or STNO masks to float64 tensors."""
    if isinstance(values, StnoMask):
        values = values.values
    if isinstance(values, torch.Tensor):
        return values.to(DTYPE)
    return torch.as_tensor(np.asarray(values), dtype=DTYPE)
