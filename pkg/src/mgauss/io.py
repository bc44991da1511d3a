"""Persistence: NIfTI-1 subset volumes, checkpoint container, config files.

Only the little-endian single-file NIfTI-1 layout is supported, with
float32 and uint16 payloads; orientation is carried in the srow fields
(qform is ignored).  All writes are atomic (temp file + rename) so an
interrupted run never leaves truncated output.  The checkpoint container
is a magic-tagged JSON header plus raw little-endian array payloads.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .core import Volume
from .errors import (
    BadMagic,
    EndianMismatch,
    OutOfRangeValue,
    ParseError,
    TruncatedPayload,
    UnknownKey,
    UnsupportedDatatype,
)
from .train import TrainConfig

NIFTI_HEADER_SIZE = 348
NIFTI_MAGIC = b"n+1\x00"
CHECKPOINT_MAGIC = b"MGSS0001"

_NIFTI_DTD = [
    ("sizeof_hdr", "<i4"),
    ("data_type", "S10"),
    ("db_name", "S18"),
    ("extents", "<i4"),
    ("session_error", "<i2"),
    ("regular", "S1"),
    ("dim_info", "u1"),
    ("dim", "<i2", (8,)),
    ("intent_p1", "<f4"),
    ("intent_p2", "<f4"),
    ("intent_p3", "<f4"),
    ("intent_code", "<i2"),
    ("datatype", "<i2"),
    ("bitpix", "<i2"),
    ("slice_start", "<i2"),
    ("pixdim", "<f4", (8,)),
    ("vox_offset", "<f4"),
    ("scl_slope", "<f4"),
    ("scl_inter", "<f4"),
    ("slice_end", "<i2"),
    ("slice_code", "u1"),
    ("xyzt_units", "u1"),
    ("cal_max", "<f4"),
    ("cal_min", "<f4"),
    ("slice_duration", "<f4"),
    ("toffset", "<f4"),
    ("glmax", "<i4"),
    ("glmin", "<i4"),
    ("descrip", "S80"),
    ("aux_file", "S24"),
    ("qform_code", "<i2"),
    ("sform_code", "<i2"),
    ("quatern_b", "<f4"),
    ("quatern_c", "<f4"),
    ("quatern_d", "<f4"),
    ("qoffset_x", "<f4"),
    ("qoffset_y", "<f4"),
    ("qoffset_z", "<f4"),
    ("srow_x", "<f4", (4,)),
    ("srow_y", "<f4", (4,)),
    ("srow_z", "<f4", (4,)),
    ("intent_name", "S16"),
    ("magic", "S4"),
]
NIFTI_HEADER_DTYPE = np.dtype(_NIFTI_DTD)
assert NIFTI_HEADER_DTYPE.itemsize == NIFTI_HEADER_SIZE

_DATATYPE_CODES = {16: np.dtype("<f4"), 512: np.dtype("<u2")}
_DTYPE_TO_CODE = {np.dtype(np.float32): 16, np.dtype(np.uint16): 512}
_SWAPPED_SIZEOF_HDR = 1543569408  # 348 byte-swapped


def atomic_write(path, payload: bytes):
    tmp = f"{path}.tmp-{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(payload)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# NIfTI-1 subset
# ---------------------------------------------------------------------------


def write_volume(path, volume: Volume, descrip=""):
    """Write a volume as single-file little-endian NIfTI-1.

    float32 and uint16 data pass through unchanged; other float dtypes are
    cast to float32 (lossy for float64).  The affine is carried in the
    srow fields at float32 precision.
    """
    data = volume.data
    if data.dtype == np.uint16:
        out = np.ascontiguousarray(data)
    elif data.dtype == np.float32:
        out = np.ascontiguousarray(data)
    else:
        out = np.ascontiguousarray(data.astype(np.float32))
    if not np.all(np.isfinite(out.astype(np.float64))):
        raise ValueError("volume data must be finite")
    code = _DTYPE_TO_CODE[out.dtype]

    hdr = np.zeros((), dtype=NIFTI_HEADER_DTYPE)
    hdr["sizeof_hdr"] = NIFTI_HEADER_SIZE
    hdr["regular"] = b"r"
    dim = np.ones(8, dtype=np.int16)
    dim[0] = 3
    dim[1:4] = out.shape
    hdr["dim"] = dim
    hdr["datatype"] = code
    hdr["bitpix"] = out.dtype.itemsize * 8
    pixdim = np.zeros(8, dtype=np.float32)
    pixdim[0] = 1.0
    pixdim[1:4] = volume.spacing
    hdr["pixdim"] = pixdim
    hdr["vox_offset"] = 352.0
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    hdr["xyzt_units"] = 2  # millimetres
    hdr["descrip"] = descrip.encode()[:79]
    hdr["sform_code"] = 1
    hdr["qform_code"] = 0
    hdr["srow_x"] = np.array([volume.spacing[0], 0, 0, volume.origin[0]], dtype=np.float32)
    hdr["srow_y"] = np.array([0, volume.spacing[1], 0, volume.origin[1]], dtype=np.float32)
    hdr["srow_z"] = np.array([0, 0, volume.spacing[2], volume.origin[2]], dtype=np.float32)
    hdr["magic"] = NIFTI_MAGIC

    payload = hdr.tobytes() + b"\x00" * 4 + out.tobytes(order="F")
    atomic_write(path, payload)


def read_volume(path):
    """Read a volume written by :func:`write_volume` (or an equivalent
    little-endian NIfTI-1 file with float32/uint16 payload)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < NIFTI_HEADER_SIZE:
        raise TruncatedPayload(f"file holds {len(raw)} bytes, header needs 348")
    hdr = np.frombuffer(raw[:NIFTI_HEADER_SIZE], dtype=NIFTI_HEADER_DTYPE)[0]
    if int(hdr["sizeof_hdr"]) == _SWAPPED_SIZEOF_HDR:
        raise EndianMismatch("big-endian NIfTI files are not supported")
    magic = bytes(hdr["magic"]).ljust(4, b"\x00")
    if magic != NIFTI_MAGIC or int(hdr["sizeof_hdr"]) != NIFTI_HEADER_SIZE:
        raise BadMagic(f"bad NIfTI magic/header: magic={magic!r}")
    code = int(hdr["datatype"])
    if code not in _DATATYPE_CODES:
        raise UnsupportedDatatype(f"NIfTI datatype code {code} not supported")
    dtype = _DATATYPE_CODES[code]
    ndim = int(hdr["dim"][0])
    if ndim != 3:
        raise UnsupportedDatatype(f"only 3D volumes supported, got dim[0]={ndim}")
    dims = tuple(int(d) for d in hdr["dim"][1:4])
    offset = int(hdr["vox_offset"])
    need = offset + int(np.prod(dims)) * dtype.itemsize
    if len(raw) < need:
        raise TruncatedPayload(f"file holds {len(raw)} bytes, needs {need}")
    data = np.frombuffer(raw[offset:need], dtype=dtype).reshape(dims, order="F")
    spacing = np.array(hdr["pixdim"][1:4], dtype=np.float64)
    origin = np.array(
        [hdr["srow_x"][3], hdr["srow_y"][3], hdr["srow_z"][3]], dtype=np.float64
    )
    return Volume(data=data.copy(), spacing=spacing, origin=origin), hdr["descrip"].decode(errors="replace")


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------


def _pack_state(obj, arrays):
    """Replace ndarray leaves with references; collect them in order."""
    if isinstance(obj, np.ndarray):
        idx = len(arrays)
        arrays.append(np.ascontiguousarray(obj))
        return {"__array__": idx}
    if isinstance(obj, dict):
        return {k: _pack_state(v, arrays) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_pack_state(v, arrays) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


def _unpack_state(obj, arrays):
    if isinstance(obj, dict):
        if "__array__" in obj and len(obj) == 1:
            return arrays[obj["__array__"]]
        return {k: _unpack_state(v, arrays) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_unpack_state(v, arrays) for v in obj]
    return obj


def save_checkpoint(path, state):
    """Serialize a nested dict of scalars/lists/ndarrays to the
    magic-tagged container.  Arrays are stored little-endian raw."""
    arrays = []
    tree = _pack_state(state, arrays)
    manifest = []
    offset = 0
    blobs = []
    for arr in arrays:
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        blob = le.tobytes()
        manifest.append(
            {"dtype": arr.dtype.str if arr.dtype.byteorder != ">" else arr.dtype.newbyteorder("<").str,
             "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)}
        )
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"tree": tree, "arrays": manifest}).encode()
    payload = (
        CHECKPOINT_MAGIC
        + np.uint64(len(header)).tobytes()
        + header
        + b"".join(blobs)
    )
    atomic_write(path, payload)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16 or raw[:8] != CHECKPOINT_MAGIC:
        raise BadMagic(f"not a {CHECKPOINT_MAGIC.decode()} checkpoint")
    hlen = int(np.frombuffer(raw[8:16], dtype="<u8")[0])
    if len(raw) < 16 + hlen:
        raise TruncatedPayload("checkpoint header truncated")
    header = json.loads(raw[16 : 16 + hlen].decode())
    base = 16 + hlen
    arrays = []
    for spec in header["arrays"]:
        lo = base + spec["offset"]
        hi = lo + spec["nbytes"]
        if len(raw) < hi:
            raise TruncatedPayload("checkpoint payload truncated")
        arr = np.frombuffer(raw[lo:hi], dtype=np.dtype(spec["dtype"])).reshape(spec["shape"])
        arrays.append(arr.copy())
    return _unpack_state(header["tree"], arrays)


# ---------------------------------------------------------------------------
# Config documents
# ---------------------------------------------------------------------------


@dataclass
class SimSettings:
    """Synthetic acquisition settings for the simulator commands."""

    phantom: str = "nested-ellipsoids"
    phantom_dims: int = 64
    phantom_spacing: float = 1.0
    in_plane_spacing: float = 1.0
    slice_thickness: float = 4.0
    motion_sigma: float = 0.5
    noise_sigma: float = 0.01
    reg_error_sigma: float = 0.0
    foreground_threshold: float = 0.02


@dataclass
class ReconSettings:
    """Inference-grid settings; zeros mean "derive from the stacks"."""

    target_dims: int = 0
    target_spacing: float = 0.0


@dataclass
class ConfigBundle:
    train: TrainConfig
    sim: SimSettings
    recon: ReconSettings


def _parse_bool(text):
    low = text.lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_schedule(text):
    """Milestones like ``0:16,300:24,600:32``."""
    out = []
    for part in text.split(","):
        it, _, res = part.partition(":")
        if not _:
            raise ValueError(f"bad schedule entry {part!r}")
        out.append((int(it.strip()), int(res.strip())))
    return tuple(out)


def _positive(x):
    return x > 0


def _non_negative(x):
    return x >= 0


_SCHEMA = {
    # train
    "lr_position": ("train", float, _positive),
    "lr_intensity": ("train", float, _positive),
    "lr_scale": ("train", float, _positive),
    "lr_rotation": ("train", float, _positive),
    "lr_nrf": ("train", float, _positive),
    "lr_transform": ("train", float, _positive),
    "lambda_ssim": ("train", float, _non_negative),
    "lambda_aniso": ("train", float, _non_negative),
    "lambda_ratio": ("train", float, lambda x: x >= 1.0),
    "block_radius": ("train", int, _non_negative),
    "resolution_schedule": ("train", _parse_schedule, lambda s: len(s) >= 1),
    "nrf_activation_iter": ("train", int, _non_negative),
    "total_iters": ("train", int, _non_negative),
    "batch_points": ("train", int, _positive),
    "adam_beta1": ("train", float, lambda x: 0.0 <= x < 1.0),
    "adam_beta2": ("train", float, lambda x: 0.0 <= x < 1.0),
    "adam_eps": ("train", float, _positive),
    "seed": ("train", int, lambda x: True),
    "use_ssim": ("train", _parse_bool, lambda x: True),
    "use_nrf": ("train", _parse_bool, lambda x: True),
    "use_aniso": ("train", _parse_bool, lambda x: True),
    "use_progressive": ("train", _parse_bool, lambda x: True),
    # sim
    "phantom": ("sim", str, lambda s: s in ("nested-ellipsoids", "checker-shell")),
    "phantom_dims": ("sim", int, lambda x: x >= 16),
    "phantom_spacing": ("sim", float, _positive),
    "in_plane_spacing": ("sim", float, _positive),
    "slice_thickness": ("sim", float, _positive),
    "motion_sigma": ("sim", float, _non_negative),
    "noise_sigma": ("sim", float, _non_negative),
    "reg_error_sigma": ("sim", float, _non_negative),
    "foreground_threshold": ("sim", float, lambda x: x < 1.0),
    # recon
    "target_dims": ("recon", int, _non_negative),
    "target_spacing": ("recon", float, _non_negative),
}


def parse_config_text(text):
    """Parse the flat ``key = value`` document; unspecified keys keep the
    published defaults and unknown keys are a hard error."""
    values = {"train": {}, "sim": {}, "recon": {}}
    for lineno, rawline in enumerate(text.splitlines(), start=1):
        line = rawline.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        if "=" not in line:
            raise ParseError("expected 'key = value'", line=lineno, column=len(line))
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _SCHEMA:
            raise UnknownKey(f"unknown config key {key!r} (line {lineno})")
        section, parser, check = _SCHEMA[key]
        try:
            parsed = parser(value)
        except (ValueError, TypeError) as exc:
            raise ParseError(str(exc), line=lineno, column=rawline.index("=") + 2) from exc
        if not check(parsed):
            raise OutOfRangeValue(f"config key {key!r} value {parsed!r} out of range")
        values[section][key] = parsed
    train = TrainConfig(**values["train"])
    try:
        train.validate()
    except ValueError as exc:
        raise OutOfRangeValue(str(exc)) from exc
    return ConfigBundle(
        train=train,
        sim=SimSettings(**values["sim"]),
        recon=ReconSettings(**values["recon"]),
    )


def load_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


# ---------------------------------------------------------------------------
# Stack persistence
# ---------------------------------------------------------------------------


def _stack_to_volume(stack):
    perm = (stack.through_axis,) + stack.inplane_axes
    arr = np.transpose(stack.slices, np.argsort(perm))
    spacing = np.empty(3)
    spacing[list(stack.inplane_axes)] = stack.in_plane_spacing
    spacing[stack.through_axis] = stack.slice_thickness
    origin = stack.world_min + 0.5 * spacing
    return Volume(
        data=arr.astype(np.float32),
        spacing=spacing,
        origin=origin,
    )


def save_stacks(out_dir, stacks):
    """Write stacks as NIfTI files plus a JSON sidecar with geometry and
    per-slice rigid transforms.  Returns the list of written file names."""
    os.makedirs(out_dir, exist_ok=True)
    names = []
    meta = []
    for st in stacks:
        name = f"stack_{st.orientation}.nii"
        write_volume(os.path.join(out_dir, name), _stack_to_volume(st),
                     descrip=f"stack:{st.orientation}")
        names.append(name)
        meta.append(
            {
                "file": name,
                "orientation": st.orientation,
                "in_plane_spacing": st.in_plane_spacing,
                "slice_thickness": st.slice_thickness,
                "slice_gap": st.slice_gap,
                "through_axis": st.through_axis,
                "inplane_axes": list(st.inplane_axes),
                "world_min": st.world_min.tolist(),
                "extent": st.extent.tolist(),
                "pivot": st.pivot.tolist(),
                "true_quats": st.true_quats.tolist(),
                "true_trans": st.true_trans.tolist(),
                "est_quats": st.est_quats.tolist(),
                "est_trans": st.est_trans.tolist(),
            }
        )
    sidecar = os.path.join(out_dir, "transforms.json")
    atomic_write(sidecar, json.dumps(meta, indent=2).encode())
    return names + ["transforms.json"]


def read_stacks(stack_dir):
    """Load stacks written by :func:`save_stacks`."""
    from .simdata import SliceStack

    with open(os.path.join(stack_dir, "transforms.json"), "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    stacks = []
    for entry in meta:
        vol, _ = read_volume(os.path.join(stack_dir, entry["file"]))
        through = int(entry["through_axis"])
        inplane = tuple(int(a) for a in entry["inplane_axes"])
        arr = np.transpose(vol.data.astype(np.float64), (through,) + inplane)
        stacks.append(
            SliceStack(
                orientation=entry["orientation"],
                slices=arr,
                in_plane_spacing=float(entry["in_plane_spacing"]),
                slice_thickness=float(entry["slice_thickness"]),
                slice_gap=float(entry["slice_gap"]),
                through_axis=through,
                inplane_axes=inplane,
                world_min=np.array(entry["world_min"], dtype=np.float64),
                extent=np.array(entry["extent"], dtype=np.float64),
                pivot=np.array(entry["pivot"], dtype=np.float64),
                true_quats=np.array(entry["true_quats"], dtype=np.float64),
                true_trans=np.array(entry["true_trans"], dtype=np.float64),
                est_quats=np.array(entry["est_quats"], dtype=np.float64),
                est_trans=np.array(entry["est_trans"], dtype=np.float64),
            )
        )
    return stacks
