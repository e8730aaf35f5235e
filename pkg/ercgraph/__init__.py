from .cluster import SimilarityConfig, build_clusters, similarity
from .config import RunConfig
from .data import Dataset, SynthSpec, generate_synthetic, load_dataset, save_dataset, split
from .errors import ErcGraphError
from .graph import build_graph, graph_of_size
from .metrics import Metrics
from .model import ModelParams, TrainConfig, batch_loss, forward, predict
from .trainer import evaluate, load_checkpoint, run_gradcheck, save_checkpoint, train
