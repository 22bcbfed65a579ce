"""Pointwise log densities from a score model.

First with exact Gaussian scores, where the closed form is known, then with
a network trained on a one-dimensional two-cluster sample.
"""

import numpy as np

from diffcard.config import Settings
from diffcard.density import GaussianScore, log_density
from diffcard.mlp import Mlp
from diffcard.pipeline import pointwise_density_config
from diffcard.schedule import DiffusionSchedule, PointCloud, mixture_log_density
from diffcard.score import ScoreModel, TrainConfig, train


def main():
    sched = DiffusionSchedule("VP")
    cfg = pointwise_density_config(Settings())

    exact = GaussianScore(sched, 0.3**2)
    x = np.array([[0.0], [0.3], [0.6]])
    print("exact scores:   ", np.round(log_density(exact, x, config=cfg), 4))
    print("closed form:    ", np.round(exact.log_pdf(x, sched.epsilon), 4))

    rng = np.random.default_rng(0)
    pts = np.concatenate([rng.normal(-0.8, 0.15, 1500), rng.normal(0.7, 0.25, 1500)])[:, None]
    cloud = PointCloud(pts)
    model = ScoreModel(sched, 1, Mlp([3, 48, 48, 3], "tanh", rng, out_scale=0.1),
                       Mlp([3, 32, 1], "tanh", rng, out_scale=0.1))
    model, _ = train(model, cloud, TrainConfig(epochs=10, steps_per_epoch=150))
    grid = np.linspace(-1.2, 1.2, 7)[:, None]
    print("trained network:", np.round(log_density(model, grid, config=cfg), 3))
    print("sample kernel:  ", np.round(mixture_log_density(sched, cloud, sched.epsilon, grid), 3))


if __name__ == "__main__":
    main()
