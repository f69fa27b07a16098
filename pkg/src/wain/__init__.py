"""Wavelet-prior-supervised contextual attention and axial transformers for image inpainting."""
from .attention import (AttentionRelation, PatchGrid, aggregate, cosine_relation, fold_patches,
                        patch_validity, unfold_patches)
from .axial import AxialBlock, AxialStack, MultiHeadAttention, add_axial_embeddings, axial_flop_estimate
from .generator import (Generator, GeneratorConfig, GeneratorOutput, extract_attention_heatmap,
                        load_checkpoint, save_checkpoint)
from .haar import WaveletPyramid, build_pyramid, haar_forward, haar_inverse
from .losses import (Discriminator, LossReport, LossWeights, adversarial_pair, balanced_l1,
                     perceptual_loss, random_extractor, style_loss, total_generator_loss)
from .masks import MaskSpec, irregular_mask, mask_ratio, region_mask, sample_training_mask
from .metrics import frechet_distance, hsv_emd, psnr, ssim
from .wpa import AggregatedPyramid, iht_chain_loss, wavelet_loss, wpa_aggregate

__version__ = "0.1.0"
