"""SGD with step decay of the learning rate."""

from dataclasses import dataclass

import numpy as np

from .errors import GraphError


@dataclass
class OptimizerState:
    base_lr: float = 1e-3
    decay_factor: float = 0.1
    decay_every: int = 2500
    iteration: int = 0

    @property
    def current_lr(self) -> float:
        return self.base_lr * self.decay_factor ** (self.iteration // self.decay_every)


def sgd_step(params: dict, grads: dict, state: OptimizerState) -> OptimizerState:
    """Apply ``p -= lr * g`` in place to every parameter; bump the iteration.

    ``params`` and ``grads`` are name -> float32 array mappings with
    identical keys and shapes.
    """
    if params.keys() != grads.keys():
        raise GraphError(
            f"param/grad name mismatch: {sorted(params.keys() ^ grads.keys())}")
    lr = np.float32(state.current_lr)
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise GraphError(
                f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        p -= lr * g.astype(np.float32, copy=False)
    state.iteration += 1
    return state
