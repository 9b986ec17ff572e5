"""Label-free detector evaluation from bounding-box stability.

Run a detector twice over the same images, once perturbed, match the two box
sets, and use the stability of matched boxes to predict mAP on unlabeled test
sets via a regressor fit on labeled sample sets.
"""

from .autoeval import (EstimateReport, LinearModel, LooReport, LooRow, MetaSample,
                       evaluate_estimates, fit_regressor, loo_evaluate,
                       loo_report_csv, measure_set, predict_map,
                       search_perturb_config, table_provider)
from .baselines import (DEFAULT_TAU, GaussianStats, confidence_measure, fd_score,
                        gaussian_stats, learn_threshold, load_gaussian_stats,
                        save_gaussian_stats, stats_from_records)
from .detmetrics import (COCO_THRESHOLDS, MapReport, average_precision,
                         evaluate_detections)
from .dumps import (DetectionRecord, ImageRecord, PerturbConfig, SampleSetManifest,
                    ValidationReport, load_manifest, load_manifest_records,
                    parse_dump, validate_manifest, write_dump, write_manifest)
from .errors import (BoxStabError, DumpParseError, MatchingError, RegressionError,
                     ScoreUndefinedError, SearchError, ValidationError)
from .geometry import BBox, giou, giou_loss, giou_matrix, iou, iou_matrix
from .matching import (Assignment, DatasetScore, ImageStability, ScoreKind,
                       StabilityOptions, bos_score, cs_score, image_stability,
                       match_pairs)
from .synthworld import (DifficultyProfile, WorldConfig, build_meta_provider,
                         gen_meta_set, gen_sample_records, gen_scene,
                         load_world_config, make_source_profiles, perturb_pass,
                         save_world_config, simulate_detection)

__version__ = "0.1.0"
