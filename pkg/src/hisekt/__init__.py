"""Knowledge-tracing pipeline: graph mining, peer retrieval, LLM-backed prediction."""

from .config import RunConfig, fingerprint, resolve_config
from .dataset import Dataset, Interaction, ingest, split
from .errors import HisektError
from .evaluation import EvalReport, PipelineContext, accuracy, auc, run_experiment
from .irt import IrtModel, Level, discretize, fit, probability
from .llm import LlmClient
from .mrhin import TEMPLATES, MetaPathTemplate, Mrhin, PathInstance, graph_distance, sample_instances
from .pathscore import PathScore, ScoredInstance, score, select_top_k

# NB: the prediction op itself stays at hisekt.predict.predict so the
# package attribute `predict` keeps naming the module.
from .predict import Prediction, PromptBundle, build_prompt, mock_predict
from .retrieval import (
    CandidateSet,
    FeatureVector,
    SimilarityModel,
    build_candidates,
    distance,
    encode,
    fit_similarity,
    top_s,
)

__version__ = "0.1.0"

__all__ = [
    "CandidateSet",
    "Dataset",
    "EvalReport",
    "FeatureVector",
    "HisektError",
    "Interaction",
    "IrtModel",
    "Level",
    "LlmClient",
    "MetaPathTemplate",
    "Mrhin",
    "PathInstance",
    "PathScore",
    "PipelineContext",
    "Prediction",
    "PromptBundle",
    "RunConfig",
    "ScoredInstance",
    "SimilarityModel",
    "TEMPLATES",
    "accuracy",
    "auc",
    "build_candidates",
    "build_prompt",
    "discretize",
    "distance",
    "encode",
    "fingerprint",
    "fit",
    "fit_similarity",
    "graph_distance",
    "ingest",
    "mock_predict",
    "probability",
    "resolve_config",
    "run_experiment",
    "sample_instances",
    "score",
    "select_top_k",
    "split",
    "top_s",
]
