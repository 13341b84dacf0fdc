"""
Feed-forward neural network regressor.
"""

import logging
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .. import FORMAT_VERSION
from ..errors import DivergenceError, ParameterError
from .base import Regressor

logger = logging.getLogger(__name__)

DTYPE = torch.float64


@dataclass(frozen=True)
class MlpConfig:
    layers: Tuple[int, ...] = (128, 128, 64, 32)
    """Number of neurons in each hidden layer."""
    dropout: Tuple[float, ...] = (0.2, 0.2, 0.0, 0.0)
    """Dropout rate after each hidden layer."""
    epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 1e-3
    lr_decay: float = 1.0
    """Multiplicative learning-rate decay applied after every epoch."""
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(int(n) for n in self.layers))
        object.__setattr__(
            self, "dropout", tuple(float(d) for d in self.dropout)
        )
        if not self.layers or any(n < 1 for n in self.layers):
            raise ParameterError(
                f"Need at least one hidden layer of positive size, got "
                f"{self.layers}"
            )
        if len(self.dropout) != len(self.layers):
            raise ParameterError(
                f"Got {len(self.dropout)} dropout rates for "
                f"{len(self.layers)} layers"
            )
        if any(not 0 <= d < 1 for d in self.dropout):
            raise ParameterError(
                f"Dropout must be in [0, 1), got {self.dropout}"
            )
        if self.epochs < 0 or self.batch_size < 1:
            raise ParameterError("epochs must be >= 0 and batch_size >= 1")
        if not self.learning_rate > 0 or not 0 < self.lr_decay <= 1:
            raise ParameterError("Invalid learning rate or decay")


def build_network(n_inputs: int, config: MlpConfig) -> nn.Sequential:
    """ReLU network with dropout after each hidden layer and a linear output.

    Weights use the default fan-in scaled uniform initialisation of
    :py:class:`torch.nn.Linear`, so they depend on the torch RNG state.
    """
    modules: List[nn.Module] = []
    width = n_inputs
    for size, rate in zip(config.layers, config.dropout):
        modules.append(nn.Linear(width, size, dtype=DTYPE))
        modules.append(nn.ReLU())
        if rate > 0:
            modules.append(nn.Dropout(rate))
        width = size
    modules.append(nn.Linear(width, 1, dtype=DTYPE))
    return nn.Sequential(*modules)


@contextmanager
def _single_thread():
    """Run torch on one intra-op thread, then restore the previous count."""
    previous = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(previous)


def _tensor(values) -> torch.Tensor:
    return torch.as_tensor(np.asarray(values, dtype=float), dtype=DTYPE)


@dataclass(eq=False)
class MlpModel:
    """A trained network and its training history."""

    config: MlpConfig
    network: nn.Sequential = field(repr=False)
    n_inputs: int
    columns: Optional[Tuple[str, ...]] = None
    loss_history: List[float] = field(default_factory=list)

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_inputs:
            raise ParameterError(
                f"Expected {self.n_inputs} columns, got shape {X.shape}"
            )
        self.network.eval()
        with torch.no_grad():
            return self.network(_tensor(X)).reshape(-1).numpy().copy()

    def to_dict(self) -> dict:
        """Portable JSON representation of the configuration and weights."""
        return {
            "format_version": FORMAT_VERSION,
            "model": "mlp",
            "config": asdict(self.config),
            "n_inputs": self.n_inputs,
            "columns": None if self.columns is None else list(self.columns),
            "state": {
                name: value.tolist()
                for name, value in self.network.state_dict().items()
            },
            "loss_history": list(self.loss_history),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MlpModel":
        if data.get("format_version") != FORMAT_VERSION:
            raise ParameterError(
                f"Unsupported model format {data.get('format_version')}"
            )
        config = MlpConfig(**data["config"])
        network = build_network(int(data["n_inputs"]), config)
        state = {
            name: torch.tensor(value, dtype=DTYPE)
            for name, value in data["state"].items()
        }
        network.load_state_dict(state)
        columns = data.get("columns")
        return cls(
            config=config,
            network=network,
            n_inputs=int(data["n_inputs"]),
            columns=None if columns is None else tuple(columns),
            loss_history=list(data.get("loss_history", [])),
        )


def mlp_train(
    X, y, config: Optional[MlpConfig] = None, columns=None
) -> MlpModel:
    """Train the network by mini-batch Adam on the mean squared error.

    Parameters
    ----------
    X : array_like
        Standardised features, shape (n, p).
    y : array_like
        Target.
    config : MlpConfig, optional
        Architecture and optimiser settings.
    columns : Sequence[str], optional
        Feature names.

    Returns
    -------
    MlpModel
        Trained model.

    Raises
    ------
    DivergenceError
        If the training loss becomes non-finite.
    """
    config = MlpConfig() if config is None else config
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    n, p = X.shape
    if len(y) != n:
        raise ParameterError(f"X has {n} rows but y has {len(y)}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ParameterError("MLP inputs must be finite")
    batch_size = config.batch_size
    if batch_size > n:
        logger.warning(
            f"Batch size {batch_size} exceeds {n} rows, using {n} instead"
        )
        batch_size = n

    inputs = _tensor(X)
    targets = _tensor(y).reshape(-1, 1)
    history = []
    with _single_thread(), torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        network = build_network(p, config)
        optimiser = torch.optim.Adam(
            network.parameters(), lr=config.learning_rate
        )
        scheduler = torch.optim.lr_scheduler.ExponentialLR(
            optimiser, gamma=config.lr_decay
        )
        loss_fn = nn.MSELoss()
        network.train()
        for epoch in range(config.epochs):
            order = torch.randperm(n)
            total = 0.0
            for start in range(0, n, batch_size):
                batch = order[start : start + batch_size]
                optimiser.zero_grad()
                loss = loss_fn(network(inputs[batch]), targets[batch])
                if not torch.isfinite(loss):
                    raise DivergenceError(
                        f"Training loss is {loss.item()} at epoch {epoch}",
                        epoch,
                    )
                loss.backward()
                optimiser.step()
                total += loss.item() * len(batch)
            scheduler.step()
            history.append(total / n)
            if epoch % 50 == 0 or epoch == config.epochs - 1:
                logger.debug(f"Epoch {epoch}: loss {history[-1]:.6g}")
    network.eval()
    return MlpModel(
        config=config,
        network=network,
        n_inputs=p,
        columns=None if columns is None else tuple(columns),
        loss_history=history,
    )


def mlp_predict(model: MlpModel, X) -> np.ndarray:
    return model.predict(X)


def mlp_gradients(network: nn.Module, X, y) -> Dict[str, np.ndarray]:
    """Gradient of the mean squared error with respect to every parameter."""
    network.eval()
    network.zero_grad()
    loss = nn.functional.mse_loss(
        network(_tensor(X)), _tensor(y).reshape(-1, 1)
    )
    loss.backward()
    return {
        name: param.grad.detach().numpy().copy()
        for name, param in network.named_parameters()
    }


def mlp_gradient_check(
    config: MlpConfig, X, y, h: float = 1e-5
) -> float:
    """Compare back-propagated gradients with central differences.

    The network is built from ``config`` with dropout disabled.

    Returns
    -------
    float
        Largest ``|g_a - g_n| / max(1e-8, |g_a| + |g_n|)`` over all
        parameters.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    if len(y) > 20:
        raise ParameterError("Gradient check supports at most 20 samples")
    config = replace(config, dropout=tuple(0.0 for _ in config.layers))
    with _single_thread(), torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        network = build_network(X.shape[1], config)
    analytic = mlp_gradients(network, X, y)
    inputs = _tensor(X)
    targets = _tensor(y).reshape(-1, 1)

    def loss():
        with torch.no_grad():
            return nn.functional.mse_loss(network(inputs), targets).item()

    worst = 0.0
    for name, param in network.named_parameters():
        flat = param.data.view(-1)
        grad = analytic[name].reshape(-1)
        for i in range(flat.numel()):
            original = flat[i].item()
            flat[i] = original + h
            upper = loss()
            flat[i] = original - h
            lower = loss()
            flat[i] = original
            numeric = (upper - lower) / (2 * h)
            error = abs(grad[i] - numeric) / max(
                1e-8, abs(grad[i]) + abs(numeric)
            )
            worst = max(worst, error)
    logger.debug(f"Gradient check max relative error {worst:.3g}")
    return worst


class MlpRegressor(Regressor):
    """MLP wrapped for the cross-validation harness."""

    name = "mlp"

    def __init__(
        self,
        columns: Optional[Sequence[str]] = None,
        config: Optional[MlpConfig] = None,
    ):
        super().__init__(columns)
        self.config = MlpConfig() if config is None else config

    def fit(self, X, y, coordinates=None) -> "MlpRegressor":
        self.result = mlp_train(X, y, self.config, columns=self.columns)
        return self

    def predict(self, X, coordinates=None) -> np.ndarray:
        return self.result.predict(X)

    def summary(self) -> dict:
        history = self.result.loss_history
        return {
            "layers": list(self.config.layers),
            "dropout": list(self.config.dropout),
            "epochs": self.config.epochs,
            "final_loss": history[-1] if history else None,
        }
