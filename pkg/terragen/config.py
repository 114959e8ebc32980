"""
Environment and file configuration
Loads .env once, exposes defaults and the JSON config helpers shared by every command
"""
import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Type, TypeVar, Union

import torch
from dotenv import load_dotenv
from pydantic import BaseModel, ValidationError

from terragen.errors import ConfigError

# Load environment variables
load_dotenv()

# Configuration
TERRAGEN_SEED = int(os.getenv("TERRAGEN_SEED", "0"))
LOG_LEVEL = os.getenv("TERRAGEN_LOG_LEVEL", "INFO").upper()
DEVICE = os.getenv("TERRAGEN_DEVICE", "cpu")
NUM_THREADS = os.getenv("TERRAGEN_NUM_THREADS", "")

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

logger = logging.getLogger(__name__)

ModelT = TypeVar("ModelT", bound=BaseModel)


def configure_logging(level: Optional[str] = None) -> None:
    """Configure the root logger with the shared format"""
    logging.basicConfig(level=getattr(logging, (level or LOG_LEVEL).upper(), logging.INFO), format=LOG_FORMAT)
    if NUM_THREADS:
        torch.set_num_threads(int(NUM_THREADS))
    logger.debug(f"[CONFIG] Device: {DEVICE}, threads: {torch.get_num_threads()}")


def resolve_seed(*candidates: Optional[int]) -> int:
    """First explicit seed wins; TERRAGEN_SEED is the fallback"""
    for seed in candidates:
        if seed is not None:
            return int(seed)
    return TERRAGEN_SEED

# ============= JSON CONFIG FILES =============

def load_json_config(path: Optional[Union[str, Path]]) -> Dict[str, Any]:
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"Config file {path} is not valid JSON: {exc}")
    if not isinstance(data, dict):
        raise ConfigError(f"Config file {path} must hold a JSON object")
    logger.info(f"[CONFIG] Loaded {path}")
    return data


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(data: Dict[str, Any], overrides: Iterable[str]) -> Dict[str, Any]:
    """Apply 'a.b.c=value' overrides; values are JSON literals or plain strings"""
    result = json.loads(json.dumps(data))
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"Override '{item}' must look like key.path=value")
        parts = key.strip().split(".")
        node = result
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"Override '{item}' descends into non-object key '{part}'")
            node = child
        node[parts[-1]] = _parse_value(raw)
    return result


def build_config(model: Type[ModelT], data: Dict[str, Any]) -> ModelT:
    try:
        return model.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"Invalid {model.__name__}: {exc}", details={"errors": json.loads(exc.json())})


def canonical_json(model: Union[BaseModel, Dict[str, Any]]) -> str:
    data = model.model_dump(mode="json") if isinstance(model, BaseModel) else model
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def config_hash(model: Union[BaseModel, Dict[str, Any]]) -> str:
    return hashlib.sha256(canonical_json(model).encode("utf-8")).hexdigest()
