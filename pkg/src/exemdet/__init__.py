"""exemdet: fine-tuning-free exemplar detection.

Given one or a few exemplar patches of a never-seen object, locate and
tightly box its instances in query images: a multi-scale correlation
similarity map proposes centers, peak-anchored anchors propose regions,
intensity-mass purification prunes them, and a trained siamese alignment
head rejects false candidates while regressing refined boxes.
"""

__version__ = "0.1.0"

from .geometry import (Box, DensityMap, Detection, EmptyCropError, GtObject, Image,
                       IntegralImage, box_pixel_count, box_sum, crop_resize,
                       crop_resize_batch, integral_build, iou, nms, resize_image, to_gray)
from .metrics import (BucketReport, average_precision, bucket_analysis, evaluate_detections,
                      pair_accuracy)
from .mlp import (MlpHead, NonFiniteLossError, TrainConfig, forward, grad_check, init_head,
                  load_head, save_head, train, train_step)
from .pipeline import PipelineConfig, StageTimings, SupportSet, detect, detect_batch
from .proposals import (ProposalConfig, ProposalParseError, PurifyConfig, anchor_proposals,
                        load_external_proposals, purify, purify_scores, save_proposals)
from .ran import (EncodingRangeError, PairSample, RanConfig, RanTarget, align, decode,
                  describe, encode_pair, ran_forward, train_ran)
from .sdm import Exemplar, Peak, SdmConfig, compute_sdm, compute_sdm_raw, extract_peaks, zncc_valid
from .synth import JitterConfig, SynthConfig, gen_dataset, gen_density_gt, gen_ran_pairs, gen_scene

__all__ = [name for name in dir() if not name.startswith("_")]
