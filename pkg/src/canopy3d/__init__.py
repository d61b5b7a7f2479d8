"""canopy3d: point-cloud phenotyping pipeline for potted cereal plants."""

from .cloud import (CSV_FORMAT, PLY_FORMAT, PointCloud, compute_resolution,
                    load_cloud, make_cloud, save_cloud, voxel_downsample)
from .config import PipelineConfig, derive_seed, load_config, validate_config
from .descriptors import (DescriptorSet, compute_descriptors,
                          load_descriptors, save_descriptors)
from .encoding import (Codebook, GmmModel, encode_bovw, encode_fv, fit_gmm,
                       fit_kmeans, load_codebook, load_gmm, save_codebook,
                       save_gmm)
from .errors import (CloudParseError, ConfigError, DegenerateSupportError,
                     EmptyCloudError, EmptySeedSetError, ModelBundleError,
                     NoCanopyError, PipelineError, TrainingDivergedError)
from .harness import (EvalReport, ModelBundle, PreparedPlant, evaluate,
                      fit_models, load_bundle, prepare_plant, save_bundle,
                      split_dataset)
from .keypoints import detect_keypoints
from .neighbors import NeighborIndex
from .network import (NetworkParams, TrainConfig, fine_tune,
                      forward_aggregated, forward_global, init_params,
                      load_network, point_descriptors, sample_pointset,
                      save_network, train)
from .normals import estimate_normals
from .segmentation import (CanopyResult, Segmentation, run_vccs,
                           segment_canopy)
from .svm import SvmModel, load_svm, predict, save_svm, train_svm
from .synth import (CONTROL, DROUGHT, PlantParams, generate_dataset,
                    generate_plant, read_manifest, write_dataset)

__version__ = "0.1.0"
