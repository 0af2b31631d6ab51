"""
Backpropagation baselines.

AdamW learning rate and weight decay for every fair-baseline configuration.
Patience, min_delta and the epoch cap are shipped defaults; batch size follows
the algorithm each baseline is compared against (100 for Forward-Forward,
128 otherwise).
"""

BP_EARLY_STOPPING = {'metric': 'val_acc', 'patience': 10, 'min_delta': 0.0}


def _bp(lr, weight_decay, batch_size=128):
    return {
        'batch_size': batch_size,
        'early_stopping': dict(BP_EARLY_STOPPING),
        'hyperparameters': {
            'optimizer': 'adamw',
            'lr': lr,
            'weight_decay': weight_decay,
            'momentum': 0.0,
            'max_epochs': 100,
        },
    }


_MNIST_FF_BASELINE = (0.0001329291894316216, 0.0007114476009343421)

BP_HYPERPARAMS = {
    # Forward-Forward baselines
    'bp/default/mnist/mlp_3x1000': _bp(*_MNIST_FF_BASELINE, batch_size=100),
    'bp/default/mnist/mlp_4x2000': _bp(*_MNIST_FF_BASELINE, batch_size=100),
    'bp/default/fashion_mnist/mlp_4x2000': _bp(0.0002040628171913876, 4.186646492145325e-06, batch_size=100),

    # Cascaded-Forward baselines
    'bp/default/mnist/cnn_3block': _bp(0.001570297088405539, 6.251373574521755e-05),
    'bp/default/fashion_mnist/cnn_3block': _bp(0.000564093098959669, 8.597071465954117e-06),
    'bp/default/cifar10/cnn_3block': _bp(0.0067628739201322655, 4.7418070637518205e-06),
    'bp/default/cifar100/cnn_3block': _bp(0.0003201243830098061, 5.880350745731698e-05),

    # Mono-Forward baselines
    'bp/default/mnist/mlp_2x1000': _bp(0.00019762189340280086, 7.4763120622522945e-06),
    'bp/default/fashion_mnist/mlp_2x1000': _bp(0.00021316290979390737, 2.7122805865833542e-05),
    'bp/default/cifar10/mlp_3x2000': _bp(8.11587582031004e-05, 2.0847447927718932e-05),
    'bp/default/cifar100/mlp_3x2000': _bp(0.00010362161015212055, 9.105881789069153e-06),
}
