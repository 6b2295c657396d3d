import os
from dotenv import load_dotenv

load_dotenv()

# Configuration
LOG_LEVEL = os.getenv("FMT_LOG_LEVEL", "INFO")
DATA_DIR = os.getenv("FMT_DATA_DIR", "data")
CHECKPOINT_DIR = os.getenv("FMT_CHECKPOINT_DIR", "checkpoints")
REPORT_DIR = os.getenv("FMT_REPORT_DIR", "reports")
DEFAULT_SEED = int(os.getenv("FMT_SEED", "0"))

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
