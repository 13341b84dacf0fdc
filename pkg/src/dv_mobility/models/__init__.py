from .forest import ForestModel
from .gwr import GwrModel
from .mlp import MlpRegressor
from .ols import OlsModel
from .utils import ModelDict

known_models = ModelDict()
known_models.add_model("ols", OlsModel, {})
known_models.add_model("gwr", GwrModel, {"kernel": "adaptive"})
known_models.add_model("rf", ForestModel, {})
known_models.add_model("forest", ForestModel, {})
known_models.add_model("mlp", MlpRegressor, {})
