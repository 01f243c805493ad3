import torch

torch.set_num_threads(1)  # canonical single-thread math everywhere in the suite
