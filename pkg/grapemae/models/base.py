from typing import Dict, Iterator, List, Tuple

import numpy as np
from scipy.stats import truncnorm

from ..autodiff import Tensor, layer_norm, parameter
from ..errors import CheckpointError


def trunc_normal(rng: np.random.Generator, shape: Tuple[int, ...], std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated at two standard deviations."""
    return truncnorm.rvs(-2.0, 2.0, loc=0.0, scale=std, size=shape, random_state=rng)


class Module:
    """Common behavior for all model parts: named parameters, child modules, grads, state."""

    def __init__(self):
        self._params: Dict[str, Tensor] = {}
        self._children: Dict[str, "Module"] = {}

    # ---- Registration ----
    def add_param(self, name: str, data: np.ndarray) -> Tensor:
        p = parameter(data, name=name)
        self._params[name] = p
        return p

    def add_module(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    # ---- Traversal ----
    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_params(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    # ---- State ----
    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> List[str]:
        """Copy matching tensors in place; returns the names of parameters left untouched."""
        own = dict(self.named_parameters())
        offending = [
            f"{name}: checkpoint {tuple(np.shape(arr))} vs model {own[name].shape}"
            for name, arr in state.items()
            if name in own and tuple(np.shape(arr)) != own[name].shape
        ]
        missing = [name for name in own if name not in state]
        unexpected = [name for name in state if name not in own]
        if strict:
            offending += [f"{name}: missing from checkpoint" for name in missing]
            offending += [f"{name}: not in model" for name in unexpected]
        if offending:
            raise CheckpointError("checkpoint does not match the configured architecture", offending)
        for name, arr in state.items():
            if name in own:
                own[name].data[...] = arr
        return missing


class Linear(Module):
    """y = x·W + b with W stored as (in, out)."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.in_dim, self.out_dim = in_dim, out_dim
        self.weight = self.add_param("weight", trunc_normal(rng, (in_dim, out_dim)))
        self.bias = self.add_param("bias", np.zeros(out_dim)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.gamma = self.add_param("gamma", np.ones(dim))
        self.beta = self.add_param("beta", np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)
