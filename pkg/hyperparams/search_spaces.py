"""
Random-search spaces per algorithm.

Each entry maps a hyperparameter name to ``('log_uniform', low, high)`` or
``('int_uniform', low, high)`` (inclusive).
"""

SEARCH_SPACES = {
    'bp': {
        'lr': ('log_uniform', 1e-5, 1e-2),
        'weight_decay': ('log_uniform', 1e-6, 1e-3),
    },
    'ff': {
        'ff_lr': ('log_uniform', 2e-4, 5e-3),
        'ff_weight_decay': ('log_uniform', 1e-4, 1e-3),
        'downstream_lr': ('log_uniform', 2e-3, 5e-2),
        'downstream_weight_decay': ('log_uniform', 1e-3, 1e-2),
    },
    'cafo': {
        'predictor_lr': ('log_uniform', 2e-4, 5e-3),
        'predictor_weight_decay': ('log_uniform', 1e-7, 1e-4),
        'block_lr': ('log_uniform', 2e-5, 5e-4),
        'block_weight_decay': ('log_uniform', 1e-7, 1e-4),
    },
    'mf': {
        'lr': ('log_uniform', 1e-5, 1e-2),
        'epochs_per_layer': ('int_uniform', 5, 30),
    },
}
