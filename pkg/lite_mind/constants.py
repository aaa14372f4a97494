"""Constants used throughout the application"""
import math

# Training defaults
PATCH_SIZE = 480
FILTER_COUNT = 4
DEPTH = 21
TAU = math.exp(-8.0)
ALPHA = 0.0
LAION_ALPHA = 0.5
LEARNING_RATE = 1e-3
WEIGHT_DECAY = 7.0
BATCH_SIZE = 500
BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
ACTIVATION_SLOPE = 0.01
INIT_STD = 0.02
EPOCHS = 50
WARMUP_STEPS = 0
LOSS_DIRECTIONS = ('symmetric', 'voxel_to_image', 'image_to_voxel')

# CLS projector stage
PROJECTOR_BLOCKS = 4
PROJECTOR_LEARNING_RATE = 1.1e-4
PROJECTOR_WEIGHT_DECAY = 6.02e-2

# CLIP ViT-L/14 embedding shapes
CLIP_TOKENS = 257
CLIP_WIDTH = 768

# ROI voxel counts per NSD subject
NSD_VOXELS = {
    'subj01': 15724,
    'subj02': 14278,
    'subj05': 13039,
    'subj07': 12682,
}
NSD_TEST_STIMULI = 982

# Retrieval protocol
POOL_SIZE = 300
N_SEEDS = 30
TOP_K = (1, 5)
KNN_CANDIDATES = 16
KNN_TIMEOUT = 10.0

# Numerics
EPS = 1e-12
NORM_EPS = 1e-5
UNIT_NORM_TOL = 1e-5

# Finite-difference gradient check
GRAD_CHECK_STEP = 1e-5
GRAD_CHECK_FLOOR = 1e-2
GRAD_CHECK_TOLERANCE = 1e-6

# TensorFile container
TENSOR_MAGIC = b"LMND"
TENSOR_VERSION = 1
TENSOR_DTYPES = {0: '<f4', 1: '<f8'}

# CLI exit codes
EXIT_OK = 0
INCOMPLETE_MARKER = "INCOMPLETE"
RUN_CONFIG_FILE = "run_config.json"

# Figure styling
HEATMAP_COLORSCALE = 'Viridis'
FILTER_COLORSCALE = 'RdBu'
CURVE_COLORS = {
    'train_loss': '#FF0000',
    'eval_top1_fwd': '#0000FF',
    'eval_top1_bwd': '#008080',
}
STYLES = {
    'HEADER': {
        'size': 18,
    },
    'FIGURE': {
        'height': 800,
        'plot_bgcolor': 'white',
        'paper_bgcolor': 'white',
    },
}
