"""Optimizer construction, including slow/fast weight averaging.

The training loop only relies on the torch optimizer surface: step(),
zero_grad(), state_dict(), load_state_dict(). Anything honoring that
contract can be swapped in through build_optimizer.
"""

from __future__ import annotations

import torch

from .config import OptimizerSettings
from .errors import ConfigError


class Lookahead:
    """Keep a slow copy of the weights and pull it toward the fast weights
    every ``sync_period`` inner steps, then reset the fast weights onto it."""

    def __init__(self, inner: torch.optim.Optimizer, sync_period: int = 6,
                 alpha: float = 0.5):
        if sync_period < 1:
            raise ConfigError("sync_period must be at least 1")
        if not 0 < alpha <= 1:
            raise ConfigError("alpha must be in (0, 1]")
        self.inner = inner
        self.sync_period = sync_period
        self.alpha = alpha
        self.steps_taken = 0
        self._slow = [p.detach().clone() for p in self._fast_params()]

    def _fast_params(self) -> list[torch.Tensor]:
        return [p for group in self.inner.param_groups for p in group["params"]]

    @property
    def param_groups(self):
        return self.inner.param_groups

    def zero_grad(self, set_to_none: bool = True):
        self.inner.zero_grad(set_to_none=set_to_none)

    def step(self, closure=None):
        loss = self.inner.step(closure)
        self.steps_taken += 1
        if self.steps_taken % self.sync_period == 0:
            with torch.no_grad():
                for slow, fast in zip(self._slow, self._fast_params()):
                    slow.add_(fast - slow, alpha=self.alpha)
                    fast.copy_(slow)
        return loss

    def state_dict(self) -> dict:
        return {
            "inner": self.inner.state_dict(),
            "slow": [t.clone() for t in self._slow],
            "steps_taken": self.steps_taken,
        }

    def load_state_dict(self, state: dict):
        self.inner.load_state_dict(state["inner"])
        self._slow = [t.clone() for t in state["slow"]]
        self.steps_taken = int(state["steps_taken"])


def build_optimizer(settings: OptimizerSettings, params):
    params = list(params)
    if settings.algorithm == "radam_lookahead":
        inner = torch.optim.RAdam(params, lr=settings.learning_rate)
        return Lookahead(inner, settings.lookahead_sync, settings.lookahead_alpha)
    if settings.algorithm == "adam":
        return torch.optim.Adam(params, lr=settings.learning_rate)
    if settings.algorithm == "sgd":
        return torch.optim.SGD(params, lr=settings.learning_rate)
    raise ConfigError(f"unknown optimizer algorithm '{settings.algorithm}'")
