"""Contrastive representation learning with instance mixing.

A batch gets virtual labels (each instance is its own class), inputs and
virtual labels are interpolated pairwise, and any of the supported
contrastive objectives (N-pair, doubled-batch, momentum contrast with a
memory bank, bootstrap prediction, and their supervised variants) is trained
on the mixed batch. Includes a minimal float64 MLP engine, a two-stage
pretext/linear-probe pipeline, and the Frechet distance between embedding
distributions.
"""

from .augment import AugPolicy, MixSpec, ViewBatch, cutmix_op, inputmix, \
    make_views, mask_noise, mixup_op
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, SplitSpec, batches, load_csv, split, standardize, \
    synth_blobs
from .errors import (ConfigError, DataError, ImixError, LabelError,
                     NumericError, ShapeError, UsageError)
from .estimators import ContrastiveEncoder, LinearProbeClassifier
from .evaluation import (LinearProbe, export_embeddings, extract, fed,
                         probe_pinv, probe_sgd, top1)
from .losses import (LossOutput, MemoryBank, bank_push, byol, imix, moco,
                     moco_kplus1, mixup_sup, npair, simclr, sup_ce, sup_npair,
                     supclr)
from .mathcore import Rng, beta_sample, cosine_sim, dirichlet_sample, pinv, \
    psd_sqrt, sym_eig
from .nn import (Encoder, EncoderSpec, EncoderState, LayerSpec, Schedule,
                 ema_update, lr_at, sgd_step)
from .trainer import (PRESETS, MetricsRecord, RunConfig, RunResult,
                      pretext_step, run_eval, run_pretext)

__version__ = "0.1.0"
