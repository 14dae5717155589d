"""2D traffic micro-simulation with gradient-based adversarial scenario
generation, black-box attack baselines, and imitation-policy fine-tuning."""

__version__ = "0.1.0"

from advtraffic.backend import backend_name

__all__ = ["backend_name", "__version__"]
