"""Windowed-attention mixture-of-experts super-resolution for multispectral rasters."""

from .attention import (AttentionConfig, WindowAttention, cyclic_shift,
                        cyclic_shift_inverse, logcpb_coords, rpe_gather,
                        shift_attention_mask, window_partition, window_reverse)
from .config import (AttentionSettings, ModelConfig, TrainSettings,
                     config_from_dict, config_to_dict, default_moe, load_config)
from .data import (PairSample, RasterImage, batcher, load_pairs, msr_file_size,
                   normalize_bands, read_msr, read_png, save_pairs, synth_pairs,
                   write_msr, write_png)
from .errors import DataError, MoseError, NumericError, UsageError
from .losses import (LossWeights, SsimParams, mse_loss, ncc_loss,
                     ncc_per_channel, ssim_loss, ssim_per_channel,
                     total_loss_forward)
from .metrics import bicubic_resize, catmull_rom_kernel, ncc_metric, psnr, ssim_metric
from .model import Adam, Model, S2mlBlock, train_step
from .moe import (GateDecision, MoeConfig, MoeLayer, gate_topk, importance_loss,
                  mlp_param_count, moe_param_count)
from .numerics import (Param, ParameterSet, Rng, assert_finite, grad_check,
                       resolve_dtype, trunc_normal_init)

__version__ = "0.1.0"
