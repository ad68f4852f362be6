"""Desk-scale lab for training, filtering, and attacking sign classifiers."""

from .tensor import Tensor, dump_tensor, load_tensor, read_tensor, save_tensor
from .graph import (Graph, GraphError, OverflowGraphError, adam_init, adam_step,
                    backprop, forward_primitives)
from .regularizers import (LinearOperator, RegularizerSpec, build_avg_operator,
                           build_diff_matrix, build_diff_pseudoinverse,
                           build_hf_operator, linf_depthwise_penalty, tik_penalty,
                           tv, tv_batch_penalty)
from .model import (AdversarialTraining, ConvLayer, FilterBankSpec, ModelSpec,
                    TrainConfig, TrainedModel, build_classifier,
                    insert_filter_bank, load_model, remove_filter_bank,
                    save_model, train)
from .data import (Dataset, SynthSpec, default_sticker_mask, generate_synthetic,
                   load_dataset, load_image, load_mask, save_dataset, save_image)
from .attacks import (AttackConfig, AttackResult, Mask, SweepResult, dct_mask,
                      nps, pgd_attack, rp2_adaptive_attack, rp2_attack,
                      rp2_lowfreq_attack, sweep)
from .spectral import (ChannelSpectra, SpectrumImage, band_energy_split, dct2d,
                       dct_matrix, feature_spectrum_report, fft2d, idct2d,
                       ifft2d, spectrum_image)
from .harness import (EvalReport, ExperimentConfig, ModelBuild, ReportRow,
                      SweepConfig, accuracy, attack_success_rate, emit_report,
                      emit_scatter, l2_dissimilarity, run_experiment)

__version__ = "0.1.0"
