"""Video-diffusion lab: windowed attention, rectified flow, reward-gradient
fine-tuning, and token-length batching, all at desk scale."""

from .attention import (
    AttnKind,
    HybridSchedule,
    WindowSpec,
    banded_attention,
    build_schedule,
    flop_count,
    full_attention,
    head_groups,
    masked_attention,
    mswa,
    mswa_mask_oracle,
    receptive_field,
    schedule_receptive_field,
    stack_self_attention,
)
from .bucketing import (
    BucketPlan,
    CostModel,
    ManifestError,
    SampleMeta,
    TokenFormula,
    build_naive_plan,
    build_ttl_plan,
    load_manifest,
    simulate_throughput,
    token_length,
    write_manifest,
)
from .flow import (
    DecoderStub,
    DivergenceError,
    FlowSchedule,
    Prompt,
    RewardSpec,
    RewardTrainerConfig,
    add_noise,
    brightness_target,
    center_mass,
    combine_rewards,
    euler_sample,
    make_reward_spec,
    reward_finetune,
    rf_loss,
    smoothness,
    truncated_reward_objective,
    truncated_reward_parts,
)
from .grid import DIRECTIONS, GridDims, invert_permutation, lattice_positions, permutation_for
from .model import (
    DualStreamDiT,
    LoraAdapter,
    ModelConfig,
    TextFeatures,
    apply_lora,
    default_lora_targets,
    init_lora,
    load_checkpoint,
    lora_param_set,
    make_config,
    merge_lora,
    save_checkpoint,
)
from .numerics import (
    DTYPE,
    NonFiniteError,
    ParamSet,
    ShapeError,
    assert_finite,
    finite_diff_grad,
    grad,
    grad_rel_error,
    linear,
    matmul,
    randn,
    rmsnorm,
    softmax,
)
from .rope3d import DEFAULT_ALLOC, RopeConfig, apply_rope3d, rope_angles

__version__ = "0.1.0"
