"""Untargeted attack generators and the attack registry.

Built-in attacks: ``pgd`` (l-inf), ``cw`` and ``ddn`` (l2) and the detector-aware
``cw_paca``. Further attacks (for example l1 attacks) plug in via ``register_attack``.
"""

from confdetect.attacks.base import (
    ATTACK_DEFAULTS,
    AttackConfig,
    AttackGenerator,
    AttackResult,
    build_result,
    get_attack,
    list_attacks,
    register_attack,
    run_attack,
    unregister_attack,
    verify_records,
)
from confdetect.attacks.cw import cw_attack, cw_generate, cw_paca_attack, cw_paca_generate
from confdetect.attacks.ddn import DDN, ddn_attack, ddn_generate
from confdetect.attacks.pgd import pgd_attack, pgd_generate

BUILTIN_ATTACKS = ("pgd", "cw", "ddn", "cw_paca")

for _name, _generator in zip(BUILTIN_ATTACKS, (pgd_generate, cw_generate, ddn_generate, cw_paca_generate), strict=True):
    if _name not in list_attacks():
        register_attack(_name, _generator)

__all__ = [
    "ATTACK_DEFAULTS",
    "BUILTIN_ATTACKS",
    "DDN",
    "AttackConfig",
    "AttackGenerator",
    "AttackResult",
    "build_result",
    "cw_attack",
    "cw_paca_attack",
    "ddn_attack",
    "get_attack",
    "list_attacks",
    "pgd_attack",
    "register_attack",
    "run_attack",
    "unregister_attack",
    "verify_records",
]
