'''
Candidate-aware user modeling for news recommendation: MIND ingestion, a
small numpy autodiff, the CAUM model with BPR training, ranking metrics and
an amortized candidate scorer.
'''
from .config import ModelConfig, RunConfig, TrainConfig, build_config
from .errors import *
from .model import CaumModel, match_score

__version__ = '0.1.0'
