import contextlib

import torch.nn as nn


@contextlib.contextmanager
def frozen(module: nn.Module):
    """Temporarily stop gradients from reaching ``module``'s parameters."""
    flags = [p.requires_grad for p in module.parameters()]
    for p in module.parameters():
        p.requires_grad_(False)
    try:
        yield module
    finally:
        for p, f in zip(module.parameters(), flags):
            p.requires_grad_(f)


@contextlib.contextmanager
def evaluating(module: nn.Module):
    was = module.training
    module.eval()
    try:
        yield module
    finally:
        module.train(was)
