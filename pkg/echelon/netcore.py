"""Dense ELU networks, reverse-mode gradients and Adam, on top of torch.

All tensors are float64 on CPU.

Two network containers are provided:

- :class:`DenseNet`: a plain affine/ELU stack (MLP actor, critic).
- :class:`SubnetBank`: ``K`` independent scalar-in/scalar-out DenseNets
  evaluated together with batched matmuls. The NAM actor houses its
  ``num_features * num_subnets`` shape subnets in one bank.

Gradients go through :class:`GradientTape`: record a scalar loss against a
set of named parameters, then :func:`backward` consumes the tape exactly once.
"""

from __future__ import annotations

import logging
import math
from typing import Iterable, Mapping, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from echelon.errors import ContractError, ProtocolError, TrainingError

logger = logging.getLogger(__name__)

DTYPE = torch.float64


def elu(x: torch.Tensor) -> torch.Tensor:
    return F.elu(x, alpha=1.0)


def make_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def _uniform(shape: Sequence[int], bound: float, generator: torch.Generator | None) -> torch.Tensor:
    return (torch.rand(tuple(shape), generator=generator, dtype=DTYPE) * 2.0 - 1.0) * bound


class DenseNet(nn.Module):
    """Affine layers with ELU between them and an identity output.

    ``widths`` lists every layer width including input and output, e.g.
    ``(33, 64, 64, 1)`` for the critic.
    """

    def __init__(self, widths: Sequence[int], *, generator: torch.Generator | None = None):
        super().__init__()
        widths = tuple(int(w) for w in widths)
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise ContractError(f"DenseNet needs >= 2 positive widths, got {widths}")
        self.widths = widths
        self.layers = nn.ModuleList(
            nn.Linear(a, b, dtype=DTYPE) for a, b in zip(widths[:-1], widths[1:])
        )
        self.reset_parameters(generator)

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        # Scaled uniform fan-in initialisation.
        with torch.no_grad():
            for layer in self.layers:
                bound = 1.0 / math.sqrt(layer.in_features)
                layer.weight.copy_(_uniform(layer.weight.shape, bound, generator))
                layer.bias.copy_(_uniform(layer.bias.shape, bound, generator))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.widths[0]:
            raise ContractError(f"DenseNet expects input width {self.widths[0]}, got {x.shape[-1]}")
        last = len(self.layers) - 1
        for k, layer in enumerate(self.layers):
            x = layer(x)
            if k < last:
                x = elu(x)
        return x

    def architecture(self) -> dict:
        return {"type": "dense", "widths": list(self.widths), "activation": "elu"}


class SubnetBank(nn.Module):
    """``num_units`` independent scalar DenseNets ``1 -> hidden... -> 1``.

    Unit ``k`` reads column ``k`` of the input; ``forward`` maps ``(B, K)`` to
    ``(B, K)``. Parameters of layer ``l`` are stored stacked as
    ``weight_l: (K, in, out)`` and ``bias_l: (K, out)``.
    """

    def __init__(
        self, num_units: int, hidden: Sequence[int], *, generator: torch.Generator | None = None
    ):
        super().__init__()
        if num_units < 1:
            raise ContractError(f"SubnetBank needs >= 1 unit, got {num_units}")
        self.num_units = int(num_units)
        self.widths = (1, *(int(h) for h in hidden), 1)
        self.weights = nn.ParameterList()
        self.biases = nn.ParameterList()
        for a, b in zip(self.widths[:-1], self.widths[1:]):
            self.weights.append(nn.Parameter(torch.empty(self.num_units, a, b, dtype=DTYPE)))
            self.biases.append(nn.Parameter(torch.empty(self.num_units, b, dtype=DTYPE)))
        self.reset_parameters(generator)

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        with torch.no_grad():
            for w, b in zip(self.weights, self.biases):
                bound = 1.0 / math.sqrt(w.shape[1])
                w.copy_(_uniform(w.shape, bound, generator))
                b.copy_(_uniform(b.shape, bound, generator))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.num_units:
            raise ContractError(f"SubnetBank expects {self.num_units} columns, got {x.shape[-1]}")
        h = x.unsqueeze(-1)  # (B, K, 1)
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = torch.einsum("bki,kio->bko", h, w) + b
            if k < last:
                h = elu(h)
        return h.squeeze(-1)

    def evaluate_units(self, start: int, stop: int, x: torch.Tensor) -> torch.Tensor:
        """Evaluate units ``start..stop-1`` on shared 1-D inputs; returns ``(B, stop - start)``."""

        if not 0 <= start < stop <= self.num_units:
            raise ContractError(f"subnet range [{start}, {stop}) outside [0, {self.num_units})")
        h = x.reshape(-1, 1, 1).expand(-1, stop - start, 1)
        last = len(self.weights) - 1
        for j, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = torch.einsum("bki,kio->bko", h, w[start:stop]) + b[start:stop]
            if j < last:
                h = elu(h)
        return h.squeeze(-1)

    def architecture(self) -> dict:
        return {
            "type": "subnet_bank",
            "units": self.num_units,
            "widths": list(self.widths),
            "activation": "elu",
        }


class GradientTape:
    """A recorded scalar loss and the named parameters to differentiate against.

    The torch graph behind ``output`` is freed by :func:`backward`; a second
    call raises :class:`ProtocolError`.
    """

    def __init__(
        self,
        output: torch.Tensor,
        params: Mapping[str, torch.Tensor] | Iterable[tuple[str, torch.Tensor]],
    ):
        if output.numel() != 1:
            raise ContractError(f"GradientTape records a scalar, got shape {tuple(output.shape)}")
        self.output = output
        self.params = dict(params)
        self.consumed = False


def backward(tape: GradientTape, loss_grad: float = 1.0) -> dict[str, torch.Tensor]:
    """Exact reverse-mode gradients of ``loss_grad * tape.output``."""

    if tape.consumed:
        raise ProtocolError("gradient tape already consumed; record a new forward pass")
    tape.consumed = True
    names = list(tape.params)
    tensors = [tape.params[n] for n in names]
    seed = torch.full_like(tape.output, float(loss_grad))
    grads = torch.autograd.grad(tape.output, tensors, grad_outputs=seed, allow_unused=True)
    tape.output = None  # type: ignore[assignment]
    return {
        n: (g.contiguous() if g is not None else torch.zeros_like(p))
        for n, p, g in zip(names, tensors, grads)
    }


class Adam:
    """Adam over a fixed set of named parameters, with optional global-norm clipping.

    Decay constants default to ``(0.9, 0.999)`` and ``eps=1e-8``.
    """

    def __init__(
        self,
        params: Mapping[str, nn.Parameter] | Iterable[tuple[str, nn.Parameter]],
        lr: float,
        *,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        max_grad_norm: float | None = None,
    ):
        self.params = dict(params)
        self.max_grad_norm = max_grad_norm
        self._opt = torch.optim.Adam(self.params.values(), lr=lr, betas=betas, eps=eps)
        self.step_count = 0

    @property
    def lr(self) -> float:
        return float(self._opt.param_groups[0]["lr"])

    def moments(self) -> dict[str, tuple[torch.Tensor, torch.Tensor]]:
        out = {}
        for name, p in self.params.items():
            st = self._opt.state.get(p)
            if st:
                out[name] = (st["exp_avg"], st["exp_avg_sq"])
        return out

    def step(self, grads: Mapping[str, torch.Tensor]) -> float | None:
        """Apply one update; returns the pre-clipping global gradient norm when clipping."""

        missing = set(self.params) - set(grads)
        if missing:
            raise ContractError(f"gradients missing for parameters: {sorted(missing)}")
        for name, g in grads.items():
            p = self.params.get(name)
            if p is None:
                raise ContractError(f"gradient for unknown parameter '{name}'")
            if g.shape != p.shape:
                raise ContractError(
                    f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)} ({name})"
                )
            if not torch.isfinite(g).all():
                raise TrainingError(f"non-finite gradient for parameter '{name}'", parameter=name)
            p.grad = g.detach().clone()
        norm = None
        if self.max_grad_norm is not None:
            norm = float(nn.utils.clip_grad_norm_(list(self.params.values()), self.max_grad_norm))
        self._opt.step()
        self._opt.zero_grad(set_to_none=True)
        self.step_count += 1
        return norm


def optimizer_step(optimizer: Adam, grads: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Functional form of :meth:`Adam.step`; returns the updated parameters."""

    optimizer.step(grads)
    return optimizer.params


def as_tensor(x) -> torch.Tensor:
    return torch.as_tensor(x, dtype=DTYPE)
