"""Multi-talker acoustic model training with a permutation-invariant CE loss.

The package is a small numpy-only stack: a reverse-mode autodiff core, a
multi-head BLSTM senone classifier, the utterance-level permutation-invariant
cross-entropy objective, a synthetic two-talker mixture corpus generator, an
SGD/BPTT trainer, and best-permutation scoring.
"""

from .autodiff import Graph, ValueNode, backward, check_gradients
from .corpus import CorpusReader, CorpusSpec, gen_corpus
from .features import CmvnStats, FrameConfig, extract_features
from .mixer import MixtureSample, SourceUtterance, SpeakerProfile, build_speaker_pool, gen_utterance, mix_pair, snr_scale
from .model import (FeatureSequence, ModelConfig, ModelParams, PosteriorStreams,
                    blstm_layer, forward, init_params, load_checkpoint,
                    lstm_cell_step, save_checkpoint)
from .pit import (Assignment, CePairMatrix, LabelSequence, LossResult,
                  best_assignment, pairwise_ce_matrix, pit_gradient_check, pit_loss)
from .scoring import (ScoreReport, collapse_tokens, edit_distance, evaluate_corpus,
                      frame_decode, pairwise_score)
from .trainer import TrainConfig, TrainReport, clip_gradients, sgd_step, train, train_baseline

__version__ = "0.1.0"
