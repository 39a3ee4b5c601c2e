import hypothesis
import torch

torch.set_num_threads(1)

hypothesis.settings.register_profile(
    "default", max_examples=25, deadline=None, derandomize=True
)
hypothesis.settings.load_profile("default")
