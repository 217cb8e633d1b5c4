"""Neural network primitives: autodiff tensors, layers, losses, optimizers."""
