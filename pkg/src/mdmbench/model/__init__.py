from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ModelConfig, toy_config
from .network import (
    MOD_CLS,
    MOD_DEPTH,
    MOD_RGB,
    AttentionRecord,
    MdmNet,
    TokenSequence,
    build_model,
    extract_attention,
    masked_l1_loss,
    predict,
)
from .optim import AdamState, adamw_step, clip_gradients, init_adam_state, lr_at
from .train import (
    TrainingDiverged,
    TrainResult,
    TrainSample,
    augment_sample,
    batch_loss,
    gradients,
    load_training_samples,
    train_loop,
)
