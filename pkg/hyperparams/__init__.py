"""
Centralized Hyperparameter Registry

Fixed and tuned presets for every algorithm, keyed as
``<algorithm>/<variant>/<dataset>/<architecture>``. Experiment files inherit
the matching entry as their defaults.
"""

import copy
from typing import Any, Dict, List, Optional

from errors import UnknownSpecError

from .bp import BP_HYPERPARAMS
from .cafo import CAFO_HYPERPARAMS
from .ff import FF_HYPERPARAMS
from .mf import MF_HYPERPARAMS
from .search_spaces import SEARCH_SPACES

# Unified hyperparameter registry
HYPERPARAM_REGISTRY = {
    **BP_HYPERPARAMS,
    **FF_HYPERPARAMS,
    **CAFO_HYPERPARAMS,
    **MF_HYPERPARAMS,
}

DEFAULT_VARIANTS = {'bp': 'default', 'ff': 'adamw', 'cafo': 'rand', 'mf': 'default'}


def registry_key(algorithm: str, dataset: str, architecture: str, variant: Optional[str] = None) -> str:
    variant = variant or DEFAULT_VARIANTS.get(algorithm, 'default')
    return f"{algorithm}/{variant}/{dataset}/{architecture}"


def get_hyperparams(algorithm: str, dataset: str, architecture: str,
                    variant: Optional[str] = None) -> Dict[str, Any]:
    """
    Preset for one configuration.

    Returns:
        dict with ``batch_size``, ``early_stopping`` and ``hyperparameters`` (a copy)

    Raises:
        UnknownSpecError: no preset for this combination
    """
    key = registry_key(algorithm, dataset, architecture, variant)
    if key not in HYPERPARAM_REGISTRY:
        raise UnknownSpecError(f"no hyperparameter preset '{key}'")
    return copy.deepcopy(HYPERPARAM_REGISTRY[key])


def has_hyperparams(algorithm: str, dataset: str, architecture: str, variant: Optional[str] = None) -> bool:
    return registry_key(algorithm, dataset, architecture, variant) in HYPERPARAM_REGISTRY


def get_search_space(algorithm: str) -> Dict[str, tuple]:
    if algorithm not in SEARCH_SPACES:
        raise UnknownSpecError(f"no search space for '{algorithm}'")
    return dict(SEARCH_SPACES[algorithm])


def get_available_configurations() -> List[str]:
    return sorted(HYPERPARAM_REGISTRY)
