"""Mono-Forward presets: Adam without weight decay, per-layer epoch cap, patience 3."""


def _mf(lr, epochs_per_layer):
    return {
        'batch_size': 128,
        'early_stopping': {'metric': 'val_loss', 'patience': 3, 'min_delta': 0.0},
        'hyperparameters': {
            'lr': lr,
            'weight_decay': 0.0,
            'epochs_per_layer': epochs_per_layer,
            'patience': 3,
            'min_delta': 0.0,
        },
    }


MF_HYPERPARAMS = {
    'mf/default/mnist/mlp_2x1000': _mf(0.001570297088405539, 14),
    'mf/default/fashion_mnist/mlp_2x1000': _mf(0.0003873086262136253, 12),
    'mf/default/cifar10/mlp_3x2000': _mf(0.0003241756767272183, 15),
    'mf/default/cifar100/mlp_3x2000': _mf(0.00017277890583771544, 8),
}
