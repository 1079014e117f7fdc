from .core import (ADDITION_ONLY_FAMILIES, DEFAULT_ALPHAS, DEFAULT_LAMBDA_GRID, FAMILIES,
                   AttackConfig, AttackResult, Criterion, ManipulationSpace, ModelCriterion,
                   box_bounds, criterion_j, feasible_grad, mark_evasion, normalized_direction,
                   parse_norm, project, random_thresholds, round_discretize)
from .gradient import (i_max_ma, max_ma, orthogonal_direction, orthogonal_pgd, pgd_attack,
                       rfgsm_attack, sma_attack)
from .greedy import greedy_flip_attack
from .mimicry import draw_guides, mimicry_attack
from .search import attack_records, lambda_search, run_attack, write_jsonl

__all__ = [
    "ADDITION_ONLY_FAMILIES", "DEFAULT_ALPHAS", "DEFAULT_LAMBDA_GRID", "FAMILIES",
    "AttackConfig", "AttackResult", "Criterion", "ManipulationSpace", "ModelCriterion",
    "box_bounds", "criterion_j", "feasible_grad", "mark_evasion", "normalized_direction",
    "parse_norm", "project", "random_thresholds", "round_discretize",
    "i_max_ma", "max_ma", "orthogonal_direction", "orthogonal_pgd", "pgd_attack",
    "rfgsm_attack", "sma_attack", "greedy_flip_attack", "draw_guides", "mimicry_attack",
    "attack_records", "lambda_search", "run_attack", "write_jsonl",
]
