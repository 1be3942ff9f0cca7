"""
Policy and value networks as float64 torch modules.

Two fixed architectures: a diagonal Gaussian policy whose mean is a tanh MLP
with a state-independent log standard deviation, and a tanh MLP value
function. The training loop works with numpy arrays, so the helpers here take
and return arrays; gradients come from autograd and steps from torch.optim.Adam.
"""
import copy
import hashlib
import logging
from datetime import datetime
from typing import Optional, Sequence

import joblib
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.distributions import Normal
from torch.nn.utils import parameters_to_vector, vector_to_parameters

logger = logging.getLogger(__name__)

DTYPE = torch.float64
LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
CHECKPOINT_VERSION = 2


class NonFiniteError(ValueError):
    """Parameters, inputs or gradients contain NaN or inf."""


def _require_finite(values, what: str):
    if isinstance(values, torch.Tensor):
        finite = bool(torch.isfinite(values).all())
    else:
        finite = bool(np.all(np.isfinite(values)))
    if not finite:
        raise NonFiniteError(f"{what} contains non-finite values")


def as_tensor(x) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


class Mlp(nn.Module):
    """tanh hidden layers, linear output."""

    def __init__(self, sizes: Sequence[int]):
        super().__init__()
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"need at least input and output sizes, got {sizes}")
        self.layers = nn.ModuleList(nn.Linear(a, b, dtype=DTYPE) for a, b in zip(sizes[:-1], sizes[1:]))

    @property
    def sizes(self):
        return [self.layers[0].in_features] + [layer.out_features for layer in self.layers]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i != last:
                x = torch.tanh(x)
        return x


class GaussianPolicy(nn.Module):
    def __init__(self, sizes: Sequence[int], log_std):
        super().__init__()
        self.mean_net = Mlp(sizes)
        log_std = np.asarray(log_std, dtype=np.float64).reshape(-1)
        _require_finite(log_std, "log_std")
        if log_std.size != self.mean_net.sizes[-1]:
            raise ValueError(f"log_std has {log_std.size} entries for {self.mean_net.sizes[-1]} actions")
        self.log_std = nn.Parameter(torch.as_tensor(log_std.copy()))

    @property
    def act_dim(self) -> int:
        return self.log_std.numel()

    @property
    def std(self) -> np.ndarray:
        return self.log_std.detach().exp().numpy()

    def distribution(self, states: torch.Tensor) -> Normal:
        return Normal(self.mean_net(states), self.log_std.exp())

    def forward(self, states: torch.Tensor, actions: torch.Tensor) -> torch.Tensor:
        """Log-density of each action row."""
        return self.distribution(states).log_prob(actions).sum(-1)

    def clamp_log_std_(self):
        with torch.no_grad():
            self.log_std.clamp_(LOG_STD_MIN, LOG_STD_MAX)


# -- flat parameter views -----------------------------------------------------

def flat_params(module: nn.Module) -> np.ndarray:
    return parameters_to_vector(module.parameters()).detach().numpy().copy()


def with_flat(module: nn.Module, vec) -> nn.Module:
    """A copy of module holding the flat parameter vector vec."""
    vec = np.asarray(vec, dtype=np.float64).reshape(-1)
    size = sum(p.numel() for p in module.parameters())
    if vec.size != size:
        raise ValueError(f"flat vector has {vec.size} entries, expected {size}")
    _require_finite(vec, "flat parameters")
    clone = copy.deepcopy(module)
    with torch.no_grad():
        vector_to_parameters(torch.as_tensor(vec.copy()), clone.parameters())
    if isinstance(clone, GaussianPolicy):
        clone.clamp_log_std_()
    return clone


def flat_grad(objective: torch.Tensor, module: nn.Module) -> np.ndarray:
    """Gradient of a scalar tensor with respect to every parameter, flattened."""
    params = list(module.parameters())
    grads = torch.autograd.grad(objective, params, retain_graph=True, allow_unused=True)
    parts = [torch.zeros_like(p).reshape(-1) if g is None else g.reshape(-1) for p, g in zip(params, grads)]
    return torch.cat(parts).detach().numpy()


def params_checksum(module: nn.Module) -> str:
    return hashlib.sha256(np.ascontiguousarray(flat_params(module)).tobytes()).hexdigest()


# -- initialization -----------------------------------------------------------

def init_mlp(sizes: Sequence[int], rng: np.random.Generator, output_scale: float = 1.0) -> Mlp:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases; the last layer is scaled by output_scale."""
    net = Mlp(sizes)
    with torch.no_grad():
        for i, layer in enumerate(net.layers):
            bound = 1.0 / np.sqrt(layer.in_features)
            if i == len(net.layers) - 1:
                bound *= output_scale
            w = rng.uniform(-bound, bound, size=(layer.in_features, layer.out_features))
            layer.weight.copy_(torch.as_tensor(w.T.copy()))
            layer.bias.zero_()
    return net


def init_policy(obs_dim: int, act_dim: int, hidden_sizes: Sequence[int], rng: np.random.Generator,
                action_low, action_high, init_std_multiple: float = 1.0) -> GaussianPolicy:
    sizes = [obs_dim, *hidden_sizes, act_dim]
    half_range = 0.5 * (np.asarray(action_high, dtype=np.float64) - np.asarray(action_low, dtype=np.float64))
    log_std = np.clip(np.log(init_std_multiple * half_range), LOG_STD_MIN, LOG_STD_MAX)
    policy = GaussianPolicy(sizes, log_std)
    policy.mean_net = init_mlp(sizes, rng, output_scale=0.01)
    return policy


def init_value(obs_dim: int, hidden_sizes: Sequence[int], rng: np.random.Generator) -> Mlp:
    return init_mlp([obs_dim, *hidden_sizes, 1], rng)


# -- array-level forward passes -----------------------------------------------

def mlp_forward(net: Mlp, x) -> np.ndarray:
    with torch.no_grad():
        return net(as_tensor(np.atleast_2d(x))).numpy()


def policy_mean(policy: GaussianPolicy, states) -> np.ndarray:
    states = np.asarray(states, dtype=np.float64)
    out = mlp_forward(policy.mean_net, states)
    return out[0] if states.ndim == 1 else out


def policy_logprob(policy: GaussianPolicy, states, actions, weights=None, need_grad: bool = True):
    """
    Diagonal Gaussian log-density of actions, and the flat gradient of sum(weights * logprob).

    Accepts a single (state, action) pair or batches; a single pair gives a
    scalar log-density. The gradient is None when need_grad is False.
    """
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    single = states.ndim == 1
    S, A = np.atleast_2d(states), np.atleast_2d(actions)
    _require_finite(S, "states")
    _require_finite(A, "actions")

    if not need_grad:
        with torch.no_grad():
            logp = policy(as_tensor(S), as_tensor(A)).numpy()
        return (logp[0] if single else logp), None

    logp = policy(as_tensor(S), as_tensor(A))
    w = torch.ones_like(logp) if weights is None else as_tensor(np.atleast_1d(weights))
    grad = flat_grad((w * logp).sum(), policy)
    logp = logp.detach().numpy()
    return (logp[0] if single else logp), grad


def policy_sample(policy: GaussianPolicy, state, rng: np.random.Generator) -> np.ndarray:
    """mean(state) + std * xi with xi ~ N(0, I); the noise comes from the numpy generator."""
    mean = policy_mean(policy, state)
    return mean + policy.std * rng.standard_normal(mean.shape)


def value_forward(value: Mlp, states, weights=None):
    """Value estimates and the flat gradient of sum(weights * value)."""
    states = np.asarray(states, dtype=np.float64)
    single = states.ndim == 1
    S = np.atleast_2d(states)
    _require_finite(S, "states")
    out = value(as_tensor(S))[:, 0]
    w = torch.ones_like(out) if weights is None else as_tensor(np.atleast_1d(weights))
    grad = flat_grad((w * out).sum(), value)
    values = out.detach().numpy()
    return (values[0] if single else values), grad


def value_loss(value: Mlp, states, targets) -> torch.Tensor:
    """Mean squared error to targets."""
    S = as_tensor(np.atleast_2d(states))
    return F.mse_loss(value(S)[:, 0], as_tensor(targets).reshape(-1))


def value_mse(value: Mlp, states, targets):
    loss = value_loss(value, states, targets)
    return float(loss.detach()), flat_grad(loss, value)


# -- Adam ---------------------------------------------------------------------

class AdamState:
    """torch.optim.Adam bound to one module; eta is read and written through the param groups."""

    def __init__(self, module: nn.Module, eta: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(module.parameters())
        self.optimizer = torch.optim.Adam(self.params, lr=eta, betas=betas, eps=eps)

    @classmethod
    def for_params(cls, module: nn.Module, eta: float) -> "AdamState":
        return cls(module, eta)

    @property
    def eta(self) -> float:
        return self.optimizer.param_groups[0]["lr"]

    @eta.setter
    def eta(self, value: float):
        for group in self.optimizer.param_groups:
            group["lr"] = value

    @property
    def step(self) -> int:
        steps = [state["step"] for state in self.optimizer.state.values() if "step" in state]
        return int(max(float(s) for s in steps)) if steps else 0


def adam_step(adam: AdamState, module: nn.Module, gradient):
    """
    One Adam descent step on module, in place; returns module.

    gradient is either a scalar loss tensor to backpropagate or a flat
    gradient vector in parameter order.
    """
    params = list(module.parameters())
    if len(params) != len(adam.params) or any(p is not q for p, q in zip(params, adam.params)):
        raise ValueError("optimizer does not hold this module's parameters")
    adam.optimizer.zero_grad()
    if isinstance(gradient, torch.Tensor) and gradient.dim() == 0:
        _require_finite(gradient.detach(), "loss")
        gradient.backward()
    else:
        g = np.asarray(gradient, dtype=np.float64).reshape(-1)
        size = sum(p.numel() for p in params)
        if g.size != size:
            raise ValueError(f"shape mismatch: params {size}, gradient {g.size}")
        pos = 0
        for p in params:
            p.grad = torch.as_tensor(g[pos:pos + p.numel()].copy()).view_as(p)
            pos += p.numel()
    for p in params:
        if p.grad is not None:
            _require_finite(p.grad, "gradient")
    adam.optimizer.step()
    if isinstance(module, GaussianPolicy):
        module.clamp_log_std_()
    for p in params:
        _require_finite(p.detach(), "parameters")
    return module


# -- persistence --------------------------------------------------------------

def _mlp_layers(net: Mlp) -> list:
    return [{"shape": list(layer.weight.shape), "weight": layer.weight.detach().numpy().tolist(),
             "bias": layer.bias.detach().numpy().tolist()}
            for layer in net.layers]


def _load_layers(net: Mlp, layers: list) -> Mlp:
    with torch.no_grad():
        for layer, doc in zip(net.layers, layers):
            weight = np.asarray(doc["weight"], dtype=np.float64).reshape(doc["shape"])
            _require_finite(weight, "weight")
            layer.weight.copy_(torch.as_tensor(weight))
            layer.bias.copy_(as_tensor(doc["bias"]))
    return net


def _sizes(layers: list) -> list:
    return [layers[0]["shape"][1]] + [layer["shape"][0] for layer in layers]


def export_json(policy: GaussianPolicy, value: Optional[Mlp] = None) -> dict:
    doc = {"format_version": CHECKPOINT_VERSION,
           "policy": {"layers": _mlp_layers(policy.mean_net),
                      "log_std": policy.log_std.detach().numpy().tolist()}}
    if value is not None:
        doc["value"] = {"layers": _mlp_layers(value)}
    return doc


def import_json(doc: dict):
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('format_version')}")
    layers = doc["policy"]["layers"]
    policy = GaussianPolicy(_sizes(layers), doc["policy"]["log_std"])
    _load_layers(policy.mean_net, layers)
    value = None
    if "value" in doc:
        value = _load_layers(Mlp(_sizes(doc["value"]["layers"])), doc["value"]["layers"])
    return policy, value


def save_checkpoint(path, policy: GaussianPolicy, value: Mlp, normalizer_state: dict, iteration: int):
    package = export_json(policy, value)
    package.update({
        "normalizer": normalizer_state,
        "iteration": iteration,
        "saved_at": datetime.now().isoformat(),
    })
    joblib.dump(package, path)
    logger.info(f"checkpoint saved to {path} (iteration {iteration})")


def load_checkpoint(path) -> dict:
    package = joblib.load(path)
    policy, value = import_json(package)
    return {"policy": policy, "value": value, "normalizer": package.get("normalizer"),
            "iteration": package.get("iteration"), "saved_at": package.get("saved_at")}
