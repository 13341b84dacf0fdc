from dataclasses import dataclass, field
from typing import Any, Dict, Mapping, Sequence, Tuple, Type, Union

from ..errors import ParameterError
from .base import Regressor


class ModelDict(dict):
    """Dictionary of known models and their default keyword arguments."""

    def add_model(self, name: str, model_class: Type[Regressor], defaults):
        """Add a model to the dictionary.

        Parameters
        ----------
        name : str
            Name used to refer to the model.
        model_class : type
            Class that inherits from
            :py:class:`~dv_mobility.models.base.Regressor`.
        defaults : dict
            Default keyword arguments.
        """
        if name in self:
            raise ValueError(f"Model {name} is already registered")
        self[name] = (model_class, dict(defaults))


def get_model(
    model: Union[str, Type[Regressor]],
) -> Tuple[Type[Regressor], Dict[str, Any]]:
    """Get a model class from the known models.

    Parameters
    ----------
    model : str or type
        Name of the model or a class that inherits from
        :py:class:`~dv_mobility.models.base.Regressor`.

    Returns
    -------
    type
        Model class.
    dict
        Default keyword arguments for the model.
    """
    from . import known_models

    if isinstance(model, str):
        try:
            model_class, defaults = known_models[model.lower()]
        except KeyError:
            raise ParameterError(
                f"Unknown model {model!r}, choose from "
                f"{sorted(known_models)}"
            )
        return model_class, dict(defaults)
    if isinstance(model, type) and issubclass(model, Regressor):
        return model, {}
    raise ParameterError(f"Cannot interpret {model!r} as a model")


@dataclass(frozen=True)
class ModelSpec:
    """A model name plus the keyword arguments to construct it."""

    name: str
    options: Mapping[str, Any] = field(default_factory=dict)

    def build(self, columns: Sequence[str] = None) -> Regressor:
        model_class, kwargs = get_model(self.name)
        kwargs.update(self.options)
        return model_class(columns=columns, **kwargs)
