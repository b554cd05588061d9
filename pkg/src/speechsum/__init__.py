"""Long-input speech summarization toolkit.

Windowed/dilated self-attention kernels for very long feature
sequences, a joint CTC-attention encoder-decoder built on a minimal
f32 autodiff core, a two-stage pretrain/fine-tune training pipeline,
sequence metrics, and a synthetic long-input corpus generator.
"""

from .attention import (
    AttentionSpec,
    build_pattern,
    cross_attention,
    dense_mha,
    flops_estimate,
    keys_per_interior_query,
    restricted_mha_blocked,
    restricted_mha_reference,
    track_score_alloc,
)
from .data import ManifestRecord, SynthSpec, Vocabulary, build_vocab, generate_corpus
from .losses import JointLossSpec, ctc_loss, joint_loss, label_smoothed_ce
from .metrics import MetricReport, concept_prf, rouge_l, rouge_n, wer
from .model import (
    BeamResult,
    ModelConfig,
    beam_search,
    count_params,
    ctc_head,
    decode_teacher_forced,
    desk_config,
    encode,
    greedy_decode,
    init_params,
)
from .tensor import GradTape, Tensor, backward

__version__ = "0.1.0"
