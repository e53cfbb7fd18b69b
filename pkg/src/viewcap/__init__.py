"""Multi-view shape captioning with partially noised continuous text diffusion.

The library turns a handful of rendered views of a symbolic 3D shape into a
natural-language caption.  Views and caption tokens are embedded into a joint
latent sequence; a Gaussian diffusion process noises only the caption segment
while the view segment stays clean and conditions a transformer denoiser.
Captions are read off per view by minimum-Bayes-risk selection over sampled
candidates, then fused across views by latent pooling and a final rounding
to the vocabulary.
"""

__version__ = "0.1.0"

from .config import RunConfig
from .metrics import MetricsReport, bleu, cider, compute_metrics_report, distinct_n, rouge_l
from .schedule import NoiseSchedule, build_schedule, posterior_coeffs, respace

__all__ = [
    "MetricsReport",
    "NoiseSchedule",
    "RunConfig",
    "bleu",
    "build_schedule",
    "cider",
    "compute_metrics_report",
    "distinct_n",
    "posterior_coeffs",
    "respace",
    "rouge_l",
    "__version__",
]
