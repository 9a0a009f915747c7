"""Word-expert sparse transformer toolkit.

Subword tokenization, knowledge-rich routing vocabularies, frequency-bucketed
expert dispatch, a desk-scale encoder-decoder trainer and the experiment
harness around them.
"""

from .bucketing import (
    BucketBoundaries,
    BucketPlan,
    BucketShape,
    FrequencyTable,
    ShapeSpec,
    count_frequencies,
    desk_default_shapes,
    make_plan,
    split_buckets,
)
from .checkpoint import load_checkpoint, load_model, save_checkpoint, save_model
from .data import (
    ModelBatch,
    PretrainBatcher,
    SpanCorruptionBatch,
    assemble_batch,
    make_span_batch,
    qa_batch,
)
from .expert_layer import (
    CommReport,
    DispatchPlan,
    ExpertPool,
    backward,
    clear_deactivation,
    comm_cost,
    forward,
    route,
    set_deactivation,
)
from .model import (
    Adam,
    AdamConfig,
    Model,
    ModelConfig,
    TrainingDiverged,
    count_flops,
    generate,
    match_dense_config,
    shared_gradient_check,
    train,
)
from .routing import (
    RoutingAssignment,
    RoutingHashTable,
    RoutingVocab,
    assign_routing_ids,
    build_hash_table,
    build_routing_vocab,
    extend_with_default,
)
from .subword import SubwordVocab, decode, encode, learn_vocab

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
