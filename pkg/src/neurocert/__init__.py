"""Neural certificate synthesis with a sound interval verifier."""
__version__ = "0.1.0"

from .cegis import CegisConfig, CegisResult, check_certificate, probability_bound, run_cegis  # noqa: E402
from .errors import NeurocertError  # noqa: E402
from .learner import TrainConfig  # noqa: E402
from .model import validate_problem  # noqa: E402
from .rules import compile_rules, vc_interval, vc_violation  # noqa: E402
from .verifier import VerifierConfig, falsify_random, verify_all, verify_vc  # noqa: E402

__all__ = [
    "CegisConfig", "CegisResult", "NeurocertError", "TrainConfig", "VerifierConfig",
    "check_certificate", "compile_rules", "falsify_random", "probability_bound",
    "run_cegis", "validate_problem", "vc_interval", "vc_violation", "verify_all", "verify_vc",
]
