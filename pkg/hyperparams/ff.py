"""
Forward-Forward presets.

Variant is the optimizer: ``adamw`` or ``sgd`` (momentum 0.9 for the layers and
the downstream classifier). Threshold, peer normalization, epoch cap, patience
and min_delta are shared by every configuration.
"""

FF_EARLY_STOPPING = {'metric': 'val_acc', 'patience': 20, 'min_delta': 0.01}

FF_SHARED = {
    'threshold_mode': 'dynamic',
    'threshold': 2.0,
    'include_first_layer': True,
    'embed_value': None,
    'length_norm_eps': 1e-8,
    'peer_factor': 0.03,
    'peer_momentum': 0.9,
    'max_epochs': 100,
}


def _ff(optimizer, ff_lr, ff_wd, ds_lr, ds_wd, momentum=0.0):
    hp = dict(FF_SHARED)
    hp.update(
        optimizer=optimizer,
        ff_lr=ff_lr, ff_weight_decay=ff_wd, ff_momentum=momentum,
        downstream_lr=ds_lr, downstream_weight_decay=ds_wd, downstream_momentum=momentum,
    )
    return {'batch_size': 100, 'early_stopping': dict(FF_EARLY_STOPPING), 'hyperparameters': hp}


FF_HYPERPARAMS = {
    'ff/adamw/mnist/mlp_3x1000': _ff('adamw', 0.0004759134394296565, 0.0004169096909947932,
                                     0.010727571797342173, 0.0061527185182837065),
    'ff/sgd/mnist/mlp_3x1000': _ff('sgd', 0.0019075980272792064, 0.0005229088821652552,
                                   0.03234998392840941, 0.0047668064095875455, momentum=0.9),
    'ff/adamw/mnist/mlp_4x2000': _ff('adamw', 0.0005253511034001832, 0.0004227844165066995,
                                     0.0027075510107757122, 0.0035730744916099627),
    'ff/adamw/fashion_mnist/mlp_4x2000': _ff('adamw', 0.0003722230492626773, 0.0003583569744251919,
                                             0.011120232890144957, 0.0051200359925764015),
}
