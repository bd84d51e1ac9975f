"""Application constants."""

# CLI exit codes
OK_CODE = 0
USAGE_ERROR_CODE = 1
DATA_ERROR_CODE = 2
NUMERIC_FAILURE_CODE = 3

# Binary container magics and versions
CONTAINER_VERSION = 1
VOLUME_MAGIC = b"DSMV"
TEXT_BANK_MAGIC = b"DSMT"
CHECKPOINT_MAGIC = b"DSMC"
VOLUME_SUFFIX = ".dsmvol"
TEXT_BANK_SUFFIX = ".dsmtxt"
CHECKPOINT_SUFFIX = ".dsmc"
MANIFEST_NAME = "manifest.json"
TEXT_BANK_NAME = f"text_bank{TEXT_BANK_SUFFIX}"
LAST_CHECKPOINT_NAME = f"last{CHECKPOINT_SUFFIX}"
BEST_CHECKPOINT_NAME = f"best{CHECKPOINT_SUFFIX}"

# Numerical guards
GRADCHECK_EPSILON = 1e-4
GRADCHECK_FLOOR = 1e-6
PRIMITIVE_TOLERANCE = 1e-5
COMPOSITE_TOLERANCE = 1e-4
ZOH_SERIES_THRESHOLD = 1e-6
DICE_EPSILON = 1e-6
BCE_CLAMP = 1e-7
DEGENERATE_RANGE = 1e-8
MASK_THRESHOLD = 0.5
BINARIZE_THRESHOLD = 0.5
STRAIGHT_THROUGH_TEMPERATURE = 1.0
DIFFUSION_NEIGHBORS = 26
DIFFUSION_STABILIZER = 1.0 / DIFFUSION_NEIGHBORS
TPR_TARGET = 0.95

# Full-scale reference values (desk defaults live in core.config)
FULL_SCALE_PATCH_SIZE = 96
FULL_SCALE_EPOCHS = 500
FULL_SCALE_WARMUP_EPOCHS = 50
FULL_SCALE_STAGE1_LR = 1e-4
FULL_SCALE_STAGE2_LR = 4e-4
FULL_SCALE_ATTENTION_HEADS = 8
DESK_OUTPUT_STRIDES = (8, 4, 2, 1)
PYRAMID_DEPTH = 4

PROMPT_TEMPLATE = "a computerized tomography of a {CLS}"

FULL_SCALE_ORGAN_CLASSES = (
    "Spleen",
    "Right Kidney",
    "Left Kidney",
    "Gall Bladder",
    "Esophagus",
    "Liver",
    "Stomach",
    "Aorta",
    "Postcava",
    "Portal Vein and Splenic Vein",
    "Pancreas",
    "Right Adrenal Gland",
    "Left Adrenal Gland",
    "Duodenum",
    "Hepatic Vessel",
    "Right Lung",
    "Left Lung",
    "Colon",
    "Intestine",
    "Rectum",
    "Bladder",
    "Prostate",
    "Left Head of Femur",
    "Right Head of Femur",
    "Celiac Truck",
)

FULL_SCALE_TUMOR_CLASSES = (
    "Spleen Tumor",
    "Kidney Tumor",
    "Kidney Cyst",
    "Gall Bladder Tumor",
    "Esophagus Tumor",
    "Liver Tumor",
    "Stomach Tumor",
    "Aortic Tumor",
    "Postcava Tumor Thrombus",
    "Portal Vein Tumor Thrombus",
    "Pancreas Tumor",
    "Adrenal Tumor",
    "Adrenal Cyst",
    "Duodenal Tumor",
    "Hepatic Vessel Tumor",
    "Lung Tumor",
    "Lung Cyst",
    "Colon Tumor",
    "Small Intestinal Neoplasm",
    "Rectal Tumor",
)

# Desk-scale synthetic vocabulary
BACKGROUND_CLASS = "Background"
DESK_ORGAN_CLASSES = ("Liver", "Kidney", "Spleen", "Colon")
DESK_TUMOR_CLASSES = ("Liver Tumor", "Kidney Tumor", "Colon Tumor")
DESK_TUMOR_HOSTS = ("Liver", "Kidney", "Colon")
DESK_UNSEEN_TUMOR = "Colon Tumor"
