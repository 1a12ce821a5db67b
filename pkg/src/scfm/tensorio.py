"""STF tensor files and model checkpoints.

STF layout, all little-endian: magic ``STF1``, dtype code u8 (1 = f64),
rank u32, rank x u64 dims, then the row-major f64 payload.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import DomainError, FormatError, IoError
from .model import ScfmModel
from .networks import Decoder, Mlp, MlpSpec, RecognitionNet
from .prior import GmmPrior

MAGIC = b"STF1"
DTYPE_F64 = 1
FORMAT_VERSION = 1
MANIFEST = "manifest.json"
ARCH_FILE = "arch.json"


def _atomic_write(path: Path, data: bytes):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def stf_encode(array) -> bytes:
    a = np.asarray(array.data if isinstance(array, Tensor) else array, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise DomainError("STF tensors must be finite")
    header = MAGIC + struct.pack("<BI", DTYPE_F64, a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return header + np.ascontiguousarray(a).astype("<f8").tobytes()


def stf_decode(buf: bytes) -> np.ndarray:
    if len(buf) < 9 or buf[:4] != MAGIC:
        raise FormatError("bad STF magic")
    dtype, rank = struct.unpack_from("<BI", buf, 4)
    if dtype != DTYPE_F64:
        raise FormatError(f"unsupported STF dtype code {dtype}")
    off = 9 + 8 * rank
    if len(buf) < off:
        raise FormatError("truncated STF header")
    dims = struct.unpack_from(f"<{rank}Q", buf, 9)
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(buf) - off != 8 * count:
        raise FormatError(f"STF payload holds {len(buf) - off} bytes, dims need {8 * count}")
    return np.frombuffer(buf, dtype="<f8", count=count, offset=off).astype(np.float64).reshape(dims)


def stf_write(path, tensor):
    _atomic_write(Path(path), stf_encode(tensor))


def stf_read(path) -> np.ndarray:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    return stf_decode(buf)


def write_json(path, obj):
    _atomic_write(Path(path), (json.dumps(obj, sort_keys=True, indent=2) + "\n").encode())


def read_json(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path} is not valid JSON: {exc}") from exc


def save_checkpoint(directory, model: ScfmModel, extra: dict[str, np.ndarray] | None = None):
    """Write every named parameter (plus ``extra`` tensors) and the manifest."""
    directory = Path(directory)
    tensors = {name: t.data for name, t in model.named_parameters().items()}
    tensors.update(extra or {})
    files = {}
    for name, arr in sorted(tensors.items()):
        fname = f"{name}.stf"
        stf_write(directory / fname, arr)
        files[name] = fname
    write_json(directory / ARCH_FILE, {
        "activation": model.net.trunk.spec.activation,
        "obs_scale": model.decoder.obs_scale,
        "mean_skip": model.net.skip,
    })
    write_json(directory / MANIFEST, {
        "tensors": files,
        "dims": {"d_z": model.d_z, "d_eps": model.d_eps, "D": model.D, "K": model.K},
        "format_version": FORMAT_VERSION,
    })


def _mlp_from(tensors: dict[str, np.ndarray], prefix: str, activation: str) -> Mlp:
    n = 0
    while f"{prefix}.W{n}" in tensors:
        n += 1
    if n < 2:
        raise FormatError(f"checkpoint lacks layers for {prefix}")
    Ws = [tensors[f"{prefix}.W{i}"] for i in range(n)]
    bs = [tensors[f"{prefix}.b{i}"] for i in range(n)]
    widths = [Ws[0].shape[0]] + [W.shape[1] for W in Ws]
    for i, (W, b) in enumerate(zip(Ws, bs)):
        if W.ndim != 2 or b.shape != (W.shape[1],) or (i and W.shape[0] != Ws[i - 1].shape[1]):
            raise FormatError(f"inconsistent shapes in {prefix} layer {i}")
    spec = MlpSpec(tuple(widths), activation)
    return Mlp(spec, [Tensor(W, requires_grad=True) for W in Ws],
               [Tensor(b, requires_grad=True) for b in bs])


def load_checkpoint(directory) -> tuple[ScfmModel, dict[str, np.ndarray]]:
    """Rebuild the model from a checkpoint; returns (model, non-parameter tensors)."""
    directory = Path(directory)
    manifest = read_json(directory / MANIFEST)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError("unsupported checkpoint format_version")
    try:
        files = manifest["tensors"]
        dims = manifest["dims"]
        d_z, d_eps, D, K = (int(dims[k]) for k in ("d_z", "d_eps", "D", "K"))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed manifest: {exc}") from exc
    tensors = {name: stf_read(directory / fname) for name, fname in files.items()}
    arch = read_json(directory / ARCH_FILE) if (directory / ARCH_FILE).exists() else {}
    act = arch.get("activation", "tanh")
    try:
        net = RecognitionNet(_mlp_from(tensors, "trunk", act), _mlp_from(tensors, "var", act),
                             d_z, d_eps, bool(arch.get("mean_skip", True)))
        dec = Decoder(_mlp_from(tensors, "dec", act), float(arch.get("obs_scale", 1.0)))
        prior = GmmPrior(*(Tensor(tensors[f"prior.{k}"], requires_grad=True)
                           for k in ("logits", "means", "log_scales")))
    except (KeyError, ValueError) as exc:
        raise FormatError(f"checkpoint tensors inconsistent: {exc}") from exc
    model = ScfmModel(net, dec, prior)
    if model.D != D or model.K != K or dec.mlp.spec.layer_widths[-1] != D:
        raise FormatError("checkpoint dims disagree with tensor shapes")
    params = set(model.named_parameters())
    return model, {k: v for k, v in tensors.items() if k not in params}
