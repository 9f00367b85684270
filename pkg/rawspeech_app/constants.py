from django.db import models

# Small helper to fix inconsistent naming in CSV/config values (trim + casefold)
def normalize_str(string: str) -> str:
    return str(string).strip().casefold()

# Define enumerated options (stored value/label)

# === EMOTIONS (closed 4-class set) ===
class Emotion(models.TextChoices):
    ANGRY = 'angry', 'Angry'
    HAPPY = 'happy', 'Happy'
    NEUTRAL = 'neutral', 'Neutral'
    SAD = 'sad', 'Sad'

# Class index order used by every model output and confusion matrix
EMOTION_ORDER = [Emotion.ANGRY, Emotion.HAPPY, Emotion.NEUTRAL, Emotion.SAD]
EMOTION_INDEX = {emotion.value: ind for ind, emotion in enumerate(EMOTION_ORDER)}

# Simple str -> enum map, to use in the manifest loader
EMOTION_MAP = {normalize_str(emotion.value): emotion for emotion in EMOTION_ORDER}

# === AUGMENTATION TAGS ===
ORIGINAL = 'original'
SPEED_PREFIX = 'speed-'

def speed_tag(factor: float) -> str:
    '''
    Tag of a speed-perturbed copy, e.g. 0.9 -> `speed-0.9`, 1.0 -> `speed-1.0`
    '''
    return f'{SPEED_PREFIX}{float(factor)!r}'

def parse_augmentation(value: str) -> float | None:
    '''
    `original` -> None, `speed-<factor>` -> factor. Raises ValueError otherwise.
    '''
    v = normalize_str(value)

    if v == ORIGINAL:
        return None

    if v.startswith(SPEED_PREFIX):
        factor = float(v[len(SPEED_PREFIX):])
        if factor <= 0:
            raise ValueError(f'Speed factor must be positive: {value!r}')
        return factor

    raise ValueError(f'Invalid augmentation tag: {value!r} (expected `original` or `speed-<factor>`)')

# === POOLING MODES ===
class PoolMode(models.TextChoices):
    MAX = 'max', 'Max'
    L2 = 'l2', 'L2 (root mean square)'
    AVERAGE = 'average', 'Average'

POOL_MODE_MAP = {normalize_str(mode.value): mode for mode in PoolMode}

# === WINDOW POLICY ===
class WindowMode(models.TextChoices):
    PAD_ZERO = 'pad-zero', 'Zero-pad at the end'
    CROP_CENTER = 'crop-center', 'Center crop'

WINDOW_MODE_MAP = {normalize_str(mode.value): mode for mode in WindowMode}

# === LAYER MODES ===
class Mode(models.TextChoices):
    TRAIN = 'train', 'Train'
    EVAL = 'eval', 'Eval'

# === BLOCK LAYER KINDS ===
class LayerKind(models.TextChoices):
    CONV2D = 'conv2d', '2-D convolution'
    POOL2D = 'pool2d', '2-D max pooling'
    LSTM = 'lstm', 'LSTM'
    DENSE = 'dense', 'Fully connected'

# === CLASSIFICATION BLOCK ABLATION VARIANTS (row order of the comparison table) ===
class BlockVariant(models.TextChoices):
    DNN = 'DNN', 'DNN'
    LSTM_DNN = 'LSTM-DNN', 'LSTM-DNN'
    LSTM = 'LSTM', 'LSTM'
    CNN_DNN = 'CNN-DNN', 'CNN-DNN'
    CNN_LSTM = 'CNN-LSTM', 'CNN-LSTM'
    CNN_LSTM_DNN = 'CNN-LSTM-DNN', 'CNN-LSTM-DNN'
    CNN = 'CNN', 'CNN'

BLOCK_VARIANT_MAP = {normalize_str(kind.value): kind for kind in BlockVariant}

# === ABLATION AXES ===
class AblationAxis(models.TextChoices):
    LAYERS = 'layers', 'Number of parallel convolutional layers'
    POOLING = 'pooling', 'Pooling strategy'
    BLOCK = 'block', 'Classification block composition'
    AUGMENTATION = 'augmentation', 'Speed-perturbation augmentation'

# === SCHEDULE DECISIONS ===
class Decision(models.TextChoices):
    CONTINUE = 'continue', 'Continue'
    HALVE = 'halve', 'Halve learning rate'
    STOP = 'stop', 'Stop training'

# === DEFAULTS ===
DEFAULT_SAMPLE_RATE = 16000

# Full-scale configuration (filter widths and shift in ms)
FULL_BRANCH_WIDTHS_MS = [15.0, 25.0, 100.0]
FULL_BRANCH_STRIDE_MS = 10.0
FULL_FILTERS_PER_BRANCH = 40
FULL_POOLED_FRAMES = 64
FULL_INPUT_SECONDS = 6.0
FULL_DROPOUT = 0.3
FULL_LEARNING_RATE = 1e-4
FULL_REPEATS = 10
FULL_HALVE_PATIENCE = 5
FULL_STOP_PATIENCE = 20
FULL_SPEED_FACTORS = [0.9, 1.1]

# Desk-scale replacements, switched on together by the desk-scale flag
DESK_FILTERS_PER_BRANCH = 8
DESK_POOLED_FRAMES = 16
DESK_INPUT_SECONDS = 2.0
DESK_REPEATS = 3
DESK_WIDTH_DIVISOR = 4
DESK_MAX_EPOCHS = 60

BATCH_SIZE = 32
MAX_EPOCHS = 200
GRAD_CLIP_NORM = 5.0
IMPROVEMENT_EPS = 1e-6

RMSPROP_RHO = 0.9
RMSPROP_EPS = 1e-8

BN_MOMENTUM = 0.9
BN_EPS = 1e-5

TRIM_THRESHOLD_DB = -40.0
TRIM_FRAME_MS = 25.0

# Branch widths per parallel-layer count (4th width is our extension)
PARALLEL_BRANCH_SETS = {
    1: [25.0],
    2: [25.0, 100.0],
    3: [15.0, 25.0, 100.0],
    4: [15.0, 25.0, 100.0, 200.0],
}

SWEEP_LENGTHS_S = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]

GRADCHECK_STEP = 1e-3
GRADCHECK_TOLERANCE = 1e-4

MANIFEST_COLUMNS = ['path', 'speaker', 'session', 'label', 'augmentation']
