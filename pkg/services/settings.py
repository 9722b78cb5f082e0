import logging
import os

from dotenv import load_dotenv

from models.errors import ValidationError

# Load environment variables
load_dotenv()

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class Settings:
    def __init__(self, log_level=None, jobs=None, run_log=None, progress=None):
        # Use environment variables if not provided
        self.log_level = (log_level or os.getenv('LSPTM_LOG_LEVEL', 'INFO')).upper()
        self.jobs = int(jobs if jobs is not None else os.getenv('LSPTM_JOBS', '1'))
        self.run_log = run_log if run_log is not None else os.getenv('LSPTM_RUN_LOG', '')
        if progress is None:
            progress = os.getenv('LSPTM_PROGRESS', '1') not in ('0', 'false', 'False', '')
        self.progress = bool(progress)

        if self.jobs < 1:
            raise ValidationError(f"LSPTM_JOBS must be at least 1, got {self.jobs}")
        if not isinstance(logging.getLevelName(self.log_level), int):
            raise ValidationError(f"Unknown log level {self.log_level}")


def configure_logging(settings=None):
    settings = settings or Settings()
    logging.basicConfig(level=settings.log_level, format=LOG_FORMAT, force=True)
    return settings
