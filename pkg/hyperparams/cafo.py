"""
Cascaded-Forward presets for the 3-block CNN.

``epochs_per_block`` caps every phase (each predictor, and DFA block
pre-training); ``patience`` applies to each phase's own early stopping.
Block learning rate and weight decay are only used by the ``dfa`` variant.
"""


def _cafo(predictor_lr, predictor_wd, epochs_per_block, patience, block_lr=0.0, block_wd=0.0):
    return {
        'batch_size': 128,
        'early_stopping': {'metric': 'val_loss', 'patience': patience, 'min_delta': 0.0},
        'hyperparameters': {
            'predictor_lr': predictor_lr,
            'predictor_weight_decay': predictor_wd,
            'epochs_per_block': epochs_per_block,
            'patience': patience,
            'block_lr': block_lr,
            'block_weight_decay': block_wd,
        },
    }


_CIFAR_RAND = (0.00024111676098423975, 6.3583588566762514e-06)
_CIFAR_DFA_BLOCK = (0.0001373784595532798, 2.938027938703532e-07)
_CIFAR_DFA_PREDICTOR = (0.0006677511008261821, 1.5702970884055385e-05)

CAFO_HYPERPARAMS = {
    'cafo/rand/mnist/cnn_3block': _cafo(0.00042136234742798395, 1.6585525961391826e-06, 227, 8),
    'cafo/dfa/mnist/cnn_3block': _cafo(0.00025391813833013565, 2.0840357948896564e-06, 12, 5,
                                       0.0004977965859721583, 9.594431243311431e-07),
    'cafo/rand/fashion_mnist/cnn_3block': _cafo(0.0013737845955327983, 2.937538457632828e-07, 145, 8),
    'cafo/dfa/fashion_mnist/cnn_3block': _cafo(0.0003304463634024569, 3.967605077052991e-05, 85, 6,
                                               0.0001384690524742107, 1.3311216080736884e-05),
    'cafo/rand/cifar10/cnn_3block': _cafo(*_CIFAR_RAND, 733, 8),
    'cafo/dfa/cifar10/cnn_3block': _cafo(*_CIFAR_DFA_PREDICTOR, 147, 8, *_CIFAR_DFA_BLOCK),
    'cafo/rand/cifar100/cnn_3block': _cafo(*_CIFAR_RAND, 1220, 10),
    'cafo/dfa/cifar100/cnn_3block': _cafo(*_CIFAR_DFA_PREDICTOR, 1271, 10, *_CIFAR_DFA_BLOCK),
}
