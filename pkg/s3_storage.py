import json
import logging
import os
from typing import Any, Dict, List, Optional, Tuple

import boto3
from botocore.exceptions import BotoCoreError, ClientError

from lab_config import LabSettings, get_settings

logger = logging.getLogger(__name__)

# Global S3 client - initialized once
_s3_client = None
_bucket_name = None


def reset_client() -> None:
    global _s3_client, _bucket_name
    _s3_client = None
    _bucket_name = None


def get_s3_client(settings: Optional[LabSettings] = None) -> Tuple[Any, str]:
    """Get or create the S3 client for the configured archive bucket"""
    global _s3_client, _bucket_name

    if _s3_client is None:
        settings = settings or get_settings()
        if not settings.s3_bucket:
            raise ValueError("Missing required S3 environment variable: CONTRANORM_S3_BUCKET")
        try:
            client = boto3.client('s3', region_name=settings.aws_region,
                                  endpoint_url=settings.s3_endpoint_url)
            client.head_bucket(Bucket=settings.s3_bucket)
        except (BotoCoreError, ClientError) as e:
            logger.error(f"Failed to initialize S3 client: {e}")
            raise
        _s3_client, _bucket_name = client, settings.s3_bucket
        logger.info(f"Connected to S3 bucket: {_bucket_name}")

    return _s3_client, _bucket_name


def upload_file_to_s3(path: str, s3_key: str, content_type: str = 'text/plain') -> bool:
    """Upload a local file's bytes to S3"""
    try:
        s3_client, bucket_name = get_s3_client()
        with open(path, 'rb') as f:
            s3_client.put_object(Bucket=bucket_name, Key=s3_key, Body=f.read(), ContentType=content_type)
        logger.info(f"Uploaded {path} to s3://{bucket_name}/{s3_key}")
        return True
    except (OSError, ValueError, BotoCoreError, ClientError) as e:
        logger.error(f"Failed to upload {path} to S3: {e}")
        return False


def upload_json_to_s3(data: Dict[str, Any], s3_key: str) -> bool:
    try:
        s3_client, bucket_name = get_s3_client()
        body = json.dumps(data, indent=2, sort_keys=True).encode('utf-8')
        s3_client.put_object(Bucket=bucket_name, Key=s3_key, Body=body, ContentType='application/json')
        logger.info(f"Uploaded s3://{bucket_name}/{s3_key}")
        return True
    except (TypeError, ValueError, BotoCoreError, ClientError) as e:
        logger.error(f"Failed to upload JSON {s3_key} to S3: {e}")
        return False


def _content_type(path: str) -> str:
    if path.endswith('.json') or path.endswith('.jsonl'):
        return 'application/json'
    if path.endswith('.csv'):
        return 'text/csv'
    return 'text/plain'


def archive_run_outputs(paths: List[str], manifest: Dict[str, Any], run_digest: str,
                        settings: Optional[LabSettings] = None) -> Optional[str]:
    """
    Upload a run's output files and its manifest under
    <prefix>/<run_digest>/. Returns the S3 prefix, or None if anything failed.
    """
    settings = settings or get_settings()
    if not settings.s3_bucket:
        logger.warning("Archive requested but CONTRANORM_S3_BUCKET is not set; skipping upload")
        return None

    s3_prefix = f"{settings.s3_prefix}/{run_digest}"
    try:
        get_s3_client(settings)
    except (ValueError, BotoCoreError, ClientError):
        return None

    for path in paths:
        key = f"{s3_prefix}/{os.path.basename(path)}"
        if not upload_file_to_s3(path, key, _content_type(path)):
            return None
    if not upload_json_to_s3(manifest, f"{s3_prefix}/manifest.json"):
        return None

    logger.info(f"Archived run to s3://{settings.s3_bucket}/{s3_prefix}")
    return s3_prefix
