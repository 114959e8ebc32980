"""
Dense-tensor kernels, reverse-mode gradients, AdamW + cosine schedule and the
checkpoint codec

Every kernel is a validated wrapper over torch: shapes are checked up front and
non-finite outputs are a hard error.
"""
import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.optim.lr_scheduler import LambdaLR

from terragen.errors import CheckpointError, ConfigError, GraphError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

CHECKPOINT_HEADER = b"TERRAGEN-CKPT-1"

_DTYPES = {
    torch.float32: ("float32", "<f4"),
    torch.float64: ("float64", "<f8"),
}
_DTYPES_BY_NAME = {"float32": (torch.float32, "<f4"), "float64": (torch.float64, "<f8")}

# Param is a named torch parameter; the name lives in the owning module
Param = nn.Parameter

# ============= VALIDATION =============

def check_finite(tensor: torch.Tensor, kernel: str) -> torch.Tensor:
    """Fail fast when a kernel output carries NaN or Inf"""
    if tensor.is_floating_point() and not bool(torch.isfinite(tensor).all()):
        raise NonFiniteError(
            f"{kernel} produced non-finite values",
            details={"kernel": kernel, "shape": list(tensor.shape)},
        )
    return tensor


def _shape_error(kernel: str, a: Sequence[int], b: Sequence[int], reason: str = "") -> ShapeError:
    suffix = f" ({reason})" if reason else ""
    return ShapeError(
        f"{kernel}: incompatible shapes {list(a)} and {list(b)}{suffix}",
        details={"kernel": kernel, "shapes": [list(a), list(b)]},
    )

# ============= KERNELS =============

def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise _shape_error("matmul", a.shape, b.shape, "inner dimensions differ")
    return check_finite(torch.matmul(a, b), "matmul")


def linear(x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    if x.shape[-1] != weight.shape[1]:
        raise _shape_error("linear", x.shape, weight.shape, "input features differ")
    return check_finite(F.linear(x, weight, bias), "linear")


def conv2d(x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None,
           stride: int = 1) -> torch.Tensor:
    """2-D convolution with zero 'same' padding; stride 1 or 2"""
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: unsupported stride {stride}", details={"kernel": "conv2d"})
    if x.dim() != 4 or weight.dim() != 4 or x.shape[1] != weight.shape[1]:
        raise _shape_error("conv2d", x.shape, weight.shape, "channel mismatch")
    padding = weight.shape[-1] // 2
    return check_finite(F.conv2d(x, weight, bias, stride=stride, padding=padding), "conv2d")


def upsample2x(x: torch.Tensor) -> torch.Tensor:
    if x.dim() != 4:
        raise ShapeError(f"upsample2x: expected a 4-D map, got {list(x.shape)}", details={"kernel": "upsample2x"})
    return check_finite(F.interpolate(x, scale_factor=2, mode="nearest"), "upsample2x")


def avg_pool_1x1(x: torch.Tensor) -> torch.Tensor:
    if x.dim() != 4:
        raise ShapeError(f"avg_pool_1x1: expected a 4-D map, got {list(x.shape)}", details={"kernel": "avg_pool_1x1"})
    return check_finite(F.adaptive_avg_pool2d(x, 1), "avg_pool_1x1")


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return check_finite(torch.softmax(x, dim=dim), "softmax")


def silu(x: torch.Tensor) -> torch.Tensor:
    return check_finite(F.silu(x), "silu")


def relu(x: torch.Tensor) -> torch.Tensor:
    return check_finite(F.relu(x), "relu")


def group_norm(x: torch.Tensor, groups: int, weight: Optional[torch.Tensor] = None,
               bias: Optional[torch.Tensor] = None, eps: float = 1e-5) -> torch.Tensor:
    """Group normalization; groups == channels gives instance normalization"""
    if x.dim() < 2 or x.shape[1] % groups != 0:
        raise _shape_error("group_norm", x.shape, (groups,), "channels not divisible by groups")
    return check_finite(F.group_norm(x, groups, weight, bias, eps), "group_norm")


def embedding(ids: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise ShapeError(
            f"embedding: index out of table range [0, {table.shape[0]})",
            details={"kernel": "embedding", "ids": ids.tolist()},
        )
    return check_finite(F.embedding(ids, table), "embedding")


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise _shape_error("add", a.shape, b.shape, "not broadcastable")
    return check_finite(a + b, "add")


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise _shape_error("mul", a.shape, b.shape, "not broadcastable")
    return check_finite(a * b, "mul")


def concat(tensors: Sequence[torch.Tensor], dim: int) -> torch.Tensor:
    first = tensors[0]
    for other in tensors[1:]:
        if other.dim() != first.dim():
            raise _shape_error("concat", first.shape, other.shape, "rank differs")
        for axis in range(first.dim()):
            if axis != dim % first.dim() and other.shape[axis] != first.shape[axis]:
                raise _shape_error("concat", first.shape, other.shape, f"axis {axis} differs")
    return check_finite(torch.cat(list(tensors), dim=dim), "concat")

# ============= PARAMETER-HOLDING LAYERS =============

class Linear(nn.Linear):
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return linear(x, self.weight, self.bias)


class Conv2d(nn.Conv2d):
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride[0])


class GroupNorm(nn.GroupNorm):
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return group_norm(x, self.num_groups, self.weight, self.bias, self.eps)


class Embedding(nn.Embedding):
    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        return embedding(ids, self.weight)


def norm_groups(channels: int, preferred: int = 8) -> int:
    """Largest group count <= preferred that divides channels"""
    return math.gcd(channels, preferred)

# ============= GRADIENTS =============

def backward(loss: torch.Tensor) -> None:
    """Accumulate d(loss)/d(param) into every parameter's .grad"""
    if loss.dim() != 0:
        raise ShapeError(
            f"backward: loss must be a scalar, got shape {list(loss.shape)}",
            details={"kernel": "backward"},
        )
    if not loss.requires_grad:
        raise GraphError("backward: loss is not connected to any parameter")
    check_finite(loss, "backward")
    try:
        loss.backward()
    except RuntimeError as exc:
        raise GraphError(f"backward: graph traversal failed: {exc}")


def zero_grads(params: Iterable[torch.Tensor]) -> None:
    for param in params:
        param.grad = None


@dataclass
class GradCheckReport:
    max_rel_error: float
    coordinates: List[Tuple[str, int, float, float]] = field(default_factory=list)

    def passed(self, tolerance: float = 1e-4) -> bool:
        return self.max_rel_error < tolerance


def finite_difference_check(loss_fn: Callable[[], torch.Tensor],
                            params: Sequence[Tuple[str, torch.Tensor]],
                            n_coords: int = 50, h: float = 1e-5, seed: int = 0,
                            abs_floor: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients against central differences on sampled coordinates

    Requires 64-bit parameters; loss_fn must be deterministic.
    """
    for name, param in params:
        if param.dtype != torch.float64:
            raise ConfigError(f"finite_difference_check needs float64 parameters, '{name}' is {param.dtype}")

    zero_grads(p for _, p in params)
    backward(loss_fn())
    analytic = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for _, p in params]

    sizes = np.array([p.numel() for _, p in params])
    rng = np.random.default_rng(seed)
    flat_ids = rng.choice(int(sizes.sum()), size=min(n_coords, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    report = GradCheckReport(max_rel_error=0.0)
    with torch.no_grad():
        for flat in flat_ids:
            which = int(np.searchsorted(offsets, flat, side="right") - 1)
            index = int(flat - offsets[which])
            name, param = params[which]
            view = param.view(-1)
            original = view[index].item()
            view[index] = original + h
            loss_plus = loss_fn().item()
            view[index] = original - h
            loss_minus = loss_fn().item()
            view[index] = original
            numeric = (loss_plus - loss_minus) / (2 * h)
            exact = analytic[which].view(-1)[index].item()
            rel = abs(exact - numeric) / max(abs(exact), abs(numeric), abs_floor)
            report.coordinates.append((name, index, exact, numeric))
            report.max_rel_error = max(report.max_rel_error, rel)
    return report

# ============= OPTIMIZER =============

def cosine_lr(step: int, lr_peak: float, lr_min: float, warmup_steps: int, total_steps: int) -> float:
    """Linear warm-up to lr_peak, then cosine annealing to lr_min at total_steps"""
    if warmup_steps > 0 and step < warmup_steps:
        return lr_peak * step / warmup_steps
    if total_steps <= warmup_steps:
        return lr_peak
    progress = min(1.0, (step - warmup_steps) / (total_steps - warmup_steps))
    return lr_min + 0.5 * (lr_peak - lr_min) * (1 + math.cos(math.pi * progress))


def _scalar_dtype() -> torch.dtype:
    return torch.float64 if torch.get_default_dtype() == torch.float64 else torch.float32


class OptimState:
    """AdamW moments plus the warm-up/cosine learning-rate position"""

    def __init__(self, params: Sequence[Tuple[str, torch.Tensor]], lr_peak: float,
                 total_steps: int, warmup_steps: int = 0, lr_min: float = 0.0,
                 beta1: float = 0.9, beta2: float = 0.999, weight_decay: float = 1e-2,
                 eps: float = 1e-8):
        if total_steps <= 0:
            raise ConfigError("total_steps must be positive")
        self.names = [name for name, _ in params]
        self.params = [param for _, param in params]
        self.lr_peak = lr_peak
        self.lr_min = lr_min
        self.warmup_steps = warmup_steps
        self.total_steps = total_steps
        self.beta1 = beta1
        self.beta2 = beta2
        self.weight_decay = weight_decay

        self.optimizer = torch.optim.AdamW(
            self.params, lr=lr_peak, betas=(beta1, beta2), eps=eps,
            weight_decay=weight_decay, foreach=False,
        )
        self.scheduler = LambdaLR(self.optimizer, self._lr_factor)

    def _lr_factor(self, step: int) -> float:
        if self.lr_peak == 0:
            return 0.0
        return cosine_lr(step, self.lr_peak, self.lr_min, self.warmup_steps, self.total_steps) / self.lr_peak

    @property
    def step(self) -> int:
        return self.scheduler.last_epoch

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]

    def moments(self, name: str) -> Tuple[torch.Tensor, torch.Tensor]:
        param = self.params[self.names.index(name)]
        state = self.optimizer.state.get(param, {})
        if "exp_avg" not in state:
            return torch.zeros_like(param), torch.zeros_like(param)
        return state["exp_avg"], state["exp_avg_sq"]

    def export_tensors(self, prefix: str = "optim") -> Dict[str, torch.Tensor]:
        tensors = {}
        for name, param in zip(self.names, self.params):
            state = self.optimizer.state.get(param, {})
            if "exp_avg" not in state:
                continue
            tensors[f"{prefix}.exp_avg.{name}"] = state["exp_avg"]
            tensors[f"{prefix}.exp_avg_sq.{name}"] = state["exp_avg_sq"]
            tensors[f"{prefix}.step.{name}"] = torch.as_tensor(state["step"], dtype=torch.float64).reshape(1)
        return tensors

    def import_tensors(self, tensors: Dict[str, torch.Tensor], step: int, prefix: str = "optim") -> None:
        for name, param in zip(self.names, self.params):
            key = f"{prefix}.exp_avg.{name}"
            if key not in tensors:
                continue
            self.optimizer.state[param] = {
                "step": torch.tensor(float(tensors[f"{prefix}.step.{name}"].item()), dtype=_scalar_dtype()),
                "exp_avg": tensors[key].to(param.dtype).clone(),
                "exp_avg_sq": tensors[f"{prefix}.exp_avg_sq.{name}"].to(param.dtype).clone(),
            }
        self.scheduler.last_epoch = step
        for group, base_lr in zip(self.optimizer.param_groups, self.scheduler.base_lrs):
            group["lr"] = base_lr * self._lr_factor(step)


def adamw_step(state: OptimState) -> None:
    """One decoupled-weight-decay Adam update at the current schedule position"""
    if state.step >= state.total_steps:
        raise ConfigError(
            f"optimizer schedule exhausted: step {state.step} of {state.total_steps}",
            details={"step": state.step, "total_steps": state.total_steps},
        )
    state.optimizer.step()
    state.scheduler.step()

# ============= DETERMINISM =============

def seed_everything(seed: int) -> torch.Generator:
    """Seed torch's global RNG and return a dedicated generator"""
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)
    generator = torch.Generator()
    generator.manual_seed(seed)
    return generator


def generator_state_hex(generator: torch.Generator) -> str:
    return bytes(generator.get_state().tolist()).hex()


def restore_generator(generator: torch.Generator, state_hex: str) -> None:
    generator.set_state(torch.tensor(list(bytes.fromhex(state_hex)), dtype=torch.uint8))

# ============= CHECKPOINTS =============

@dataclass
class Checkpoint:
    tensors: Dict[str, torch.Tensor]
    meta: Dict[str, object]


def save_checkpoint(path: Union[str, Path], tensors: Dict[str, torch.Tensor],
                    meta: Optional[Dict[str, object]] = None) -> Path:
    """Write header, JSON manifest and little-endian float payloads"""
    path = Path(path)
    entries = []
    payloads = []
    offset = 0
    for name, tensor in tensors.items():
        if tensor.dtype not in _DTYPES:
            raise CheckpointError(f"Cannot store '{name}' with dtype {tensor.dtype}")
        dtype_name, numpy_dtype = _DTYPES[tensor.dtype]
        data = tensor.detach().cpu().contiguous().numpy().astype(numpy_dtype, copy=False).tobytes()
        entries.append({
            "name": name,
            "shape": list(tensor.shape),
            "dtype": dtype_name,
            "offset": offset,
            "nbytes": len(data),
        })
        payloads.append(data)
        offset += len(data)

    manifest = json.dumps({"entries": entries, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_suffix(path.suffix + ".tmp")
    with tmp_path.open("wb") as handle:
        handle.write(CHECKPOINT_HEADER + b"\n")
        handle.write(struct.pack("<Q", len(manifest)))
        handle.write(manifest)
        for data in payloads:
            handle.write(data)
    os.replace(tmp_path, path)
    logger.info(f"[CKPT] Saved {len(entries)} tensors to {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint not found: {path}")

    raw = path.read_bytes()
    header = CHECKPOINT_HEADER + b"\n"
    if not raw.startswith(header):
        raise CheckpointError(f"{path} is not a TERRAGEN-CKPT-1 checkpoint")
    cursor = len(header)
    try:
        (manifest_len,) = struct.unpack_from("<Q", raw, cursor)
        cursor += 8
        manifest = json.loads(raw[cursor:cursor + manifest_len].decode("utf-8"))
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"Corrupt checkpoint manifest in {path}: {exc}")
    cursor += manifest_len

    tensors = {}
    for entry in manifest["entries"]:
        torch_dtype, numpy_dtype = _DTYPES_BY_NAME[entry["dtype"]]
        start = cursor + entry["offset"]
        chunk = raw[start:start + entry["nbytes"]]
        if len(chunk) != entry["nbytes"]:
            raise CheckpointError(f"Truncated payload for '{entry['name']}' in {path}")
        array = np.frombuffer(chunk, dtype=numpy_dtype).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(array.copy()).to(torch_dtype)
    return Checkpoint(tensors=tensors, meta=manifest.get("meta", {}))
