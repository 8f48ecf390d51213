from typing import Union

import numpy as np
import numpy.typing as npt
import torch

# Common aliases used across the package
FloatArray = npt.NDArray[np.float64]
ArrayLike = Union[torch.Tensor, FloatArray]
