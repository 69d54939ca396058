"""Latent neural-ODE sequence models with an energy-based prior.

Submodules import lazily so the CLI can pin thread counts before numpy
loads; ``from odeebm import Tensor`` etc. keep working via __getattr__.
"""

__version__ = "0.1.0"

_EXPORTS = {
    "Tensor": "tensor", "Tape": "tensor", "ShapeError": "tensor", "no_grad": "tensor",
    "MLP": "nn", "AdamState": "nn", "adam_step": "nn", "mlp_apply": "nn",
    "OdeFunc": "odeint", "SolverError": "odeint", "SolverSpec": "odeint",
    "ode_solve": "odeint", "ode_solve_dense": "odeint",
    "EbmPrior": "prior", "LangevinSpec": "langevin", "NumericalError": "langevin",
    "langevin_sample": "langevin",
    "LatentLayout": "generator", "GeneratorModel": "generator",
    "TimeSeries": "datasets", "DatasetSpec": "datasets", "DataError": "datasets",
    "ModelConfig": "training", "TrainConfig": "training", "TrainState": "training",
    "EvalProtocol": "evaluation",
    "ExperimentConfig": "config", "ConfigError": "config",
}


def __getattr__(name):
    if name in _EXPORTS:
        import importlib

        module = importlib.import_module(f".{_EXPORTS[name]}", __name__)
        return getattr(module, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
