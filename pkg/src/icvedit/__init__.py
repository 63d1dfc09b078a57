"""Desk-scale instructional video editing.

A tiny video diffusion transformer is trained with rectified flow over
width-concatenated source/target latents; masked latent and attention
objectives steer the edit to the requested region. The package covers
synthetic paired-data generation, training, inference, and benchmark score
aggregation, all reproducible from seeds.
"""

from .errors import (
    CheckpointError,
    ConfigError,
    NumericsError,
    RaterError,
    RaterRangeError,
    RaterSchemaError,
    RaterTransportError,
    ShapeError,
    ShardError,
    ShardMagicError,
    ShardTruncatedError,
    ShardVersionError,
    TrainingError,
    UnsupportedTaskError,
    ValidationError,
)
from .instructions import COLORS, Instruction, SHAPES, STYLES, TASKS, encode_instruction
from .latents import (
    EditMask,
    InContextLatent,
    LatentGrid,
    PixelVideo,
    RegionPartition,
    binarize_mask,
    build_partition,
    concat_widthwise,
    decode_video,
    encode_video,
    split,
)
from .flow import (
    SamplerConfig,
    TimestepDistribution,
    euler_sample,
    noisy_interpolate,
    one_step_denoise,
    sample_initial_noise,
    sample_timestep,
    velocity_target,
)
from .losses import (
    LossBreakdown,
    LossConfig,
    attention_edit_loss,
    attention_global_loss,
    flow_matching_loss,
    latent_diff,
    latent_region_loss,
    total_loss,
)
from .model import (
    AttentionTrace,
    ForwardOutput,
    ModelConfig,
    VelocityTransformer,
    init_params,
    merge_lora,
)
from .datagen import (
    SamplePair,
    SceneSpec,
    ShardIndex,
    augment_cross_task,
    augment_reversible,
    derive_seed,
    generate_pair,
    generate_shard_pairs,
    read_shard,
    write_shard,
)
from .trainer import TrainConfig, TrainState, grad_check, run, train_step
from .editor import EditRequest, edit_video
from .scoring import (
    CategoryScores,
    MockRater,
    ProxyMetrics,
    ScoreCard,
    aggregate_benchmark,
    category_scores,
    overall_from_categories,
    proxy_metrics,
    rate_remote,
)

__version__ = "0.1.0"
