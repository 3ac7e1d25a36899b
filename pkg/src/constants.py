# noise schedule
NUM_STEPS: int = 2000
ALPHA_START: float = 0.999999
ALPHA_END: float = 0.99

# downsampling schedule
DEFAULT_BRACKET_SCHEDULE: str = "[1,1,2,2]"
CONSTANT_BRACKET_SCHEDULE: str = "[1,1,1,1]"
ABLATION_BRACKET_SCHEDULES: tuple = ("[1,1,1,1]", "[1,1,2,2]", "[1,1,2,4]", "[1,2,2,2]", "[1,2,4,8]")

# sampling
CORRECTION_THRESHOLD: float = 1.0
EVALUATION_DDIM_STEPS: int = 4

# optimization
LEARNING_RATE: float = 1e-4
BATCH_SIZE: int = 16
REFERENCE_ITERATIONS: int = 320_000
REFERENCE_MILESTONES: tuple = (50_000, 75_000, 100_000, 150_000, 200_000)
REFERENCE_PATCH: tuple = (192, 288)
DESK_ITERATIONS: int = 5_000
DESK_PATCH: tuple = (32, 48)
SWAP_PROBABILITY: float = 0.5

# images
NUM_IMAGE_CHANNELS: int = 3
NUM_POSITION_CHANNELS: int = 4
NUM_TIME_CHANNELS: int = 8
TIME_FREQUENCIES: tuple = (1, 2, 4, 8)
NUM_HISTOGRAM_BINS: int = 256

# ssim
SSIM_SIGMA: float = 1.5
SSIM_WINDOW: int = 11
SSIM_K1: float = 0.01
SSIM_K2: float = 0.03

# files
PYDT_MAGIC: bytes = b"PYDT"
SCHEMA_VERSION: int = 1
THREADS_ENV_VAR: str = "PYRDIFF_THREADS"

# exit codes
EXIT_SUCCESS: int = 0
EXIT_USAGE: int = 1
EXIT_VERIFICATION_FAILURE: int = 2
EXIT_IO: int = 3
