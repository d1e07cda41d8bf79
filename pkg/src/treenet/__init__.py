"""Tree-NET: segmentation through compressed inputs and labels.

Three independently trained parts -- an input-compression autoencoder, a
label-compression autoencoder, and a bridge segmentation backbone working
entirely on their bottlenecks -- assemble into one end-to-end model that
needs a fraction of the original backbone's compute.
"""

from .assembly import AssembledTreeNet, MetricsReport, assemble, evaluate, predict
from .autoencoders import (AutoencoderSpec, TrainedAutoencoder, build_autoencoder,
                           decode_half, encode, train_autoencoder)
from .backbones import (BackboneSpec, BridgeTrainingSet, TrainedBridge,
                        build_backbone, materialize_bridge_set, train_bridge)
from .data import (DatasetConfig, SampleRecord, SplitIndex, generate_synthetic,
                   ingest_directory, make_split, prepare_dataset, resize_bilinear)
from .errors import (ConfigError, DataError, GraphError, LockError,
                     ShapeMismatchError, SpecError, StaleArtifactError,
                     TrainingDivergedError, TreeNetError)
from .layer_graph import LayerGraph, LayerNode, count_flops, count_params, trace_layer_graph
from .losses import (boundary_weights, composite_loss, euclidean_loss,
                     weighted_bce, weighted_iou_loss)
from .metrics import ConfusionCounts, accuracy, confusion, dice, iou
from .pipeline import (ExperimentConfig, PhaseArtifacts, PipelineResult,
                       make_desk_config, make_full_config, make_mini_config,
                       multiscale_batches, run_baseline, run_pipeline)
from .profiler import (EfficiencyRow, EfficiencyTable, compare, flop_ratios,
                       measure_peak_memory)
from .shapes import ShapeSpec
from .trainer import TrainConfig

__version__ = "0.1.0"
