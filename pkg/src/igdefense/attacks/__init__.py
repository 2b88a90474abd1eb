from .base import AttackError, AttackResult, ThreatModel, merge_results
from .cascade import autoattack_lite_attack
from .gradient import apgd, apgd_eot, apgd_targeted, fgsm, pgd
from .losses import LossSpec, UnsupportedLossError, loss_value
from .registry import ATTACKS, AttackConfig, ResultCache, register_attack, run_attack
from .square import square_attack

__all__ = [
    "ATTACKS", "AttackConfig", "AttackError", "AttackResult", "LossSpec", "ResultCache", "ThreatModel",
    "UnsupportedLossError", "apgd", "apgd_eot", "apgd_targeted", "autoattack_lite_attack", "fgsm",
    "loss_value", "merge_results", "pgd", "register_attack", "run_attack", "square_attack",
]
