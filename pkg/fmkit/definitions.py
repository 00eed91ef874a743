import os

import torch

# float64 keeps finite-difference checks meaningful; benchmarks may cast to float32
DTYPE = torch.float64

DEVICE = os.environ.get('FMKIT_DEVICE', 'cpu')

# the frame-level front-end emits one frame every 20 ms
FRAME_RATE = 50

LAYER_NORM_EPS = 1e-5

# two-sided 95% normal quantile for the EER confidence interval
Z_95 = 1.96

DEFAULT_DURATION_EDGES = (3., 4., 5., 6.)
