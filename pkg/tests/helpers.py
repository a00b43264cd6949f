import numpy as np

from cmust.data import TaskData, generate_synthetic
from cmust.msti import MSTIModel, ModelConfig


def tiny_setup(N=4, T_all=240, interval=30, K=1, seed=0, **overrides):
    sets = generate_synthetic(seed, K, N, T_all, interval_minutes=interval)
    data = [TaskData(d) for d in sets]
    cfg = ModelConfig.profile("tiny", num_nodes=N, slots_per_day=1440 // interval, **overrides)
    model = MSTIModel(cfg, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for d in data:
        model.set_prompt(d.name, rng.normal(size=model.prompt_shape))
    return model, data
