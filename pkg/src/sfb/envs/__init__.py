"""Training and test environments: synthetic generators, MNIST ingestion, ColorMNIST."""
from .base import EnvDataset
from .cmnist import make_cmnist, noise_for_correlation
from .mnist import load_mnist_idx
from .synthetic import BayesOracle, bayes_oracle, gen_ac, gen_cedd, suboptimality_vs_bayes

__all__ = [
    "EnvDataset", "BayesOracle", "bayes_oracle", "gen_ac", "gen_cedd", "suboptimality_vs_bayes",
    "load_mnist_idx", "make_cmnist", "noise_for_correlation",
]
