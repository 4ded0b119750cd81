"""Zero-shot triplet extraction by template infilling with a small seq2seq model."""
from .data import Dataset, Example, FoldSpec, RelationSpec, Triplet, load_dataset, load_relations, split_folds
from .decoding import DecodeConfig, ScoredCandidate, allowed_tokens, beam_search, decode_relation
from .errors import DataError, LengthError, ParseError, TemplateError, TrainingDiverged, ZettError
from .model import MicroBackend, ModelConfig, ScoringBackend, Seq2Seq
from .pipeline import PredictionConfig, extract, predict_multi, predict_single
from .relfilter import FilterConfig, HashedBowEmbedder, filter_relations, similarity
from .templates import Template, mask, parse_output, validate_template
from .tokenizer import Vocabulary, build_vocab, decode, encode, tokenize
from .train import TrainConfig, train

__version__ = "0.1.0"
