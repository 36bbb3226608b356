from .net import (RectifierArch, RectifierNet, RectifierShapeError, ReferenceSet, bridge, rectify,
                  stc_attention, to_nchw, to_nhwc)
from .train import (EmptyDatasetError, RectifierPair, RectifierTrainConfig, make_degradation_pairs,
                    perceptual_proxy, sobel_magnitude, temporal_window, train_rectifier)
from .variants import (IdentityRectifier, LearnedRectifier, OracleRectifier, RectifierError,
                       RectifyContext, make_rectifier)
