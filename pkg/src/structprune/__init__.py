"""Second-order structured pruning on small numpy networks."""
from ._accel import backend_name
from .arch import (apply_mask, CompactNet, count_approx, count_exact, count_report, CountReport,
                   detect_bottlenecks, expand, layer_ratios, PrunedArch, widen_uniform)
from .autodiff import forward, gradient, hvp, jacobian, jvp, loss
from .data import Batch, subsample, synthetic_images
from .errors import (ConfigurationError, DataError, DimensionError, InputError, StructPruneError,
                     StructuralError, UnsupportedModelError)
from .models import build, load_checkpoint, ModelSpec, Network, save_checkpoint
from .saliency import q_matrix, QMatrix, SaliencyVector, sosp_h_saliency
from .selection import PruningMask, select, SelectionPolicy
from .structures import segment, Segmentation

__version__ = "0.1.0"
