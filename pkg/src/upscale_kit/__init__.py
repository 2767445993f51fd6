"""upscale-kit: mechanical up-scaling of small decoder-only transformers.

Three surgery procedures — vocabulary extension with origin-token embedding
merging, block-level depth-up-scaling with skip connections, and
snapshot-initialized mixture-of-experts expansion — plus the minimal
reference transformer, checkpoint format, and training harness needed to
verify them at desk scale.
"""

from .config import ModelConfig
from .container import load_config, load_container, save_config, save_container
from .model import (Model, apply_rope, build_model, forward, load_model,
                    next_token_loss, param_count, save_model)
from .surgery import (BlockPlan, FfnSnapshot, dus_v1, dus_v2, expand_moe,
                      load_ffn_snapshot, make_plan, merge_token_embeddings,
                      retheta_and_unwindow, router_load, save_ffn_snapshot)
from .tensor import Tensor, backward
from .tokenizer import (Tokenizer, TpcReport, extend_vocab,
                        tokens_per_character, train_bpe)
from .training import (AdamConfig, AdamState, CorpusSource, PackedBatch,
                       TrainReport, adam_step, mix_corpora, pack_sequences,
                       train, warmup_schedule)

__version__ = "0.1.0"

__all__ = [
    "AdamConfig", "AdamState", "BlockPlan", "CorpusSource", "FfnSnapshot",
    "Model", "ModelConfig", "PackedBatch", "Tensor", "Tokenizer", "TpcReport",
    "TrainReport", "adam_step", "apply_rope", "backward", "build_model",
    "dus_v1", "dus_v2", "expand_moe", "extend_vocab", "forward",
    "load_config", "load_container", "load_ffn_snapshot", "load_model",
    "make_plan", "merge_token_embeddings", "mix_corpora", "next_token_loss",
    "pack_sequences", "param_count", "retheta_and_unwindow", "router_load",
    "save_config", "save_container", "save_ffn_snapshot", "save_model",
    "tokens_per_character", "train", "train_bpe", "warmup_schedule",
]
