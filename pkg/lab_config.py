"""
Ambient settings and logging setup.

Nothing read here changes a numerical result: experiment configuration
lives in command-line flags only.
"""

import logging
import os
import sys
from dataclasses import dataclass
from logging.handlers import RotatingFileHandler
from typing import Optional

from dotenv import load_dotenv

TOOL_VERSION = "1.0.0"
LOG_FORMAT = '%(asctime)s %(levelname)s: %(message)s [in %(pathname)s:%(lineno)d]'
LOG_FILE = 'contranorm.log'

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LabSettings:
    log_level: str = 'INFO'
    log_dir: Optional[str] = None
    verify_workers: int = 1
    progress: str = 'auto'
    s3_bucket: Optional[str] = None
    s3_prefix: str = 'contranorm_runs'
    aws_region: str = 'us-east-1'
    s3_endpoint_url: Optional[str] = None

    def show_progress(self) -> bool:
        if self.progress == 'on':
            return True
        if self.progress == 'off':
            return False
        return sys.stderr.isatty()


def _int_env(name: str, default: int) -> int:
    raw = os.getenv(name)
    if raw is None or raw == '':
        return default
    try:
        value = int(raw)
    except ValueError:
        logger.warning(f"Ignoring {name}={raw!r}: not an integer, using {default}")
        return default
    if value < 1:
        logger.warning(f"Ignoring {name}={raw!r}: must be positive, using {default}")
        return default
    return value


def get_settings() -> LabSettings:
    """Build settings from the environment, after loading a .env file if present"""
    load_dotenv()

    progress = os.getenv('CONTRANORM_PROGRESS', 'auto').lower()
    if progress not in ('auto', 'on', 'off'):
        logger.warning(f"Ignoring CONTRANORM_PROGRESS={progress!r}, using 'auto'")
        progress = 'auto'

    return LabSettings(
        log_level=os.getenv('CONTRANORM_LOG_LEVEL', 'INFO').upper(),
        log_dir=os.getenv('CONTRANORM_LOG_DIR') or None,
        verify_workers=_int_env('CONTRANORM_VERIFY_WORKERS', 1),
        progress=progress,
        s3_bucket=os.getenv('CONTRANORM_S3_BUCKET') or None,
        s3_prefix=os.getenv('CONTRANORM_S3_PREFIX', 'contranorm_runs').strip('/') or 'contranorm_runs',
        aws_region=os.getenv('AWS_REGION', 'us-east-1'),
        s3_endpoint_url=os.getenv('S3_ENDPOINT_URL') or None,
    )


def configure_logging(settings: LabSettings) -> None:
    """Stderr handler always; rotating file handler when a log directory is configured"""
    root = logging.getLogger()
    for handler in list(root.handlers):
        if getattr(handler, '_contranorm', False):
            root.removeHandler(handler)
            handler.close()

    formatter = logging.Formatter(LOG_FORMAT)
    stream = logging.StreamHandler(sys.stderr)
    stream.setFormatter(formatter)
    stream._contranorm = True
    root.addHandler(stream)

    if settings.log_dir:
        try:
            os.makedirs(settings.log_dir, exist_ok=True)
            file_handler = RotatingFileHandler(
                os.path.join(settings.log_dir, LOG_FILE), maxBytes=10240, backupCount=10
            )
            file_handler.setFormatter(formatter)
            file_handler._contranorm = True
            root.addHandler(file_handler)
        except OSError as e:
            logger.warning(f"Could not set up file logging: {e}")
            # console logging only

    level = getattr(logging, settings.log_level, None)
    if not isinstance(level, int):
        logger.warning(f"Unknown log level {settings.log_level!r}, using INFO")
        level = logging.INFO
    root.setLevel(level)
