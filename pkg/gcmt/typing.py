from typing import Dict

import numpy as np
import numpy.typing as npt

Matrix = npt.NDArray[np.float64]
IndexArray = npt.NDArray[np.int64]

# Named parameters of one network, e.g. `encoder.0.weight` -> Matrix.
ParamDict = Dict[str, Matrix]
