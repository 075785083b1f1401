from .model import ArchConfig, NetworkParams, backward_pass, drn_forward, forward_pass, init_params
from .train import TrainConfig, train
