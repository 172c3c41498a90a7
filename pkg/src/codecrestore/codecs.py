"""Codec layer: builtin JPEG/WebP, external-command video codecs, learned-codec simulators.

JPEG and WebP round-trip through Pillow. HEVC/VVC/AVC are invoked through a
command-template adapter and degrade to a skip when the executable is absent.
The three learned codec families are deterministic simulators: they keep the
benchmark's 7x3 task structure without trained codec weights, and real codec
outputs can be dropped in from disk instead at any time.
"""

from __future__ import annotations

import io
import shlex
import shutil
import subprocess
import tempfile
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, features
from scipy.ndimage import gaussian_filter

from .errors import CodecFailure, MissingBackend, ShapeError
from .utils import load_image_rgb, save_png, stable_seed

MIN_IMAGE_SIDE = 16


class Family(str, Enum):
    JPEG = "jpeg"
    WEBP = "webp"
    HEVC = "hevc"
    VVC = "vvc"
    AVC = "avc"
    LEARNED_PSNR = "learned_psnr"
    LEARNED_SSIM = "learned_ssim"
    LEARNED_GAN = "learned_gan"
    IDENTITY = "identity"


class Backend(str, Enum):
    BUILTIN = "builtin"
    EXTERNAL = "external-command"
    SIMULATOR = "simulator"


_QF_FAMILIES = {Family.JPEG, Family.WEBP}
_QP_FAMILIES = {Family.HEVC, Family.VVC, Family.AVC}
_LEARNED_FAMILIES = {Family.LEARNED_PSNR, Family.LEARNED_SSIM, Family.LEARNED_GAN}

_DEFAULT_BACKEND = {
    Family.JPEG: Backend.BUILTIN,
    Family.WEBP: Backend.BUILTIN,
    Family.HEVC: Backend.EXTERNAL,
    Family.VVC: Backend.EXTERNAL,
    Family.AVC: Backend.EXTERNAL,
    Family.LEARNED_PSNR: Backend.SIMULATOR,
    Family.LEARNED_SSIM: Backend.SIMULATOR,
    Family.LEARNED_GAN: Backend.SIMULATOR,
    Family.IDENTITY: Backend.BUILTIN,
}


@dataclass(frozen=True)
class CodecSpec:
    """One codec at one quality setting.

    `quality` is a QF for JPEG/WebP (1-100), a QP for HEVC/VVC/AVC (0-63),
    a level index 1-3 for the learned simulators, and None for IDENTITY.
    """

    family: Family
    quality: int | None = None
    backend: Backend | None = None

    def __post_init__(self):
        family = Family(self.family)
        object.__setattr__(self, "family", family)
        backend = Backend(self.backend) if self.backend is not None else _DEFAULT_BACKEND[family]
        object.__setattr__(self, "backend", backend)
        q = self.quality
        if family is Family.IDENTITY:
            if q is not None:
                raise ValueError("IDENTITY takes no quality parameter")
        elif family in _QF_FAMILIES:
            if not (isinstance(q, int) and 1 <= q <= 100):
                raise ValueError(f"{family.value} quality factor must be in 1..100, got {q!r}")
        elif family in _QP_FAMILIES:
            if not (isinstance(q, int) and 0 <= q <= 63):
                raise ValueError(f"{family.value} QP must be in 0..63, got {q!r}")
        elif family in _LEARNED_FAMILIES:
            if q not in (1, 2, 3):
                raise ValueError(f"{family.value} level must be 1, 2 or 3, got {q!r}")

    @property
    def label(self) -> str:
        if self.family is Family.IDENTITY:
            return "identity"
        if self.family in _QP_FAMILIES:
            return f"{self.family.value}_qp{self.quality:02d}"
        if self.family in _LEARNED_FAMILIES:
            return f"{self.family.value}_l{self.quality}"
        return f"{self.family.value}_qf{self.quality:02d}"


def _check_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ShapeError(f"expected HxWx3 uint8 raster, got {image.shape} {image.dtype}")
    if image.shape[0] < MIN_IMAGE_SIDE or image.shape[1] < MIN_IMAGE_SIDE:
        raise ShapeError(f"image {image.shape[:2]} smaller than {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}")
    return image


def _pil_roundtrip(image: np.ndarray, fmt: str, quality: int) -> np.ndarray:
    buf = io.BytesIO()
    Image.fromarray(image).save(buf, format=fmt, quality=quality)
    buf.seek(0)
    with Image.open(buf) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def _first_token(cmd_template: str) -> str:
    return shlex.split(cmd_template)[0]


def probe_external(commands: dict | None) -> bool:
    """True when both encode and decode commands resolve to executables."""
    if not commands or "encode_cmd" not in commands or "decode_cmd" not in commands:
        return False
    return all(
        shutil.which(_first_token(commands[key])) is not None
        for key in ("encode_cmd", "decode_cmd")
    )


def _run_external(image: np.ndarray, codec: CodecSpec, commands: dict) -> np.ndarray:
    with tempfile.TemporaryDirectory(prefix="codecrestore-") as tmp:
        tmp = Path(tmp)
        src = tmp / "in.png"
        bitstream = tmp / "stream.bin"
        dst = tmp / "out.png"
        save_png(image, src)
        for template, args in (
            (commands["encode_cmd"], {"in": str(src), "out": str(bitstream), "qp": codec.quality}),
            (commands["decode_cmd"], {"in": str(bitstream), "out": str(dst), "qp": codec.quality}),
        ):
            argv = [part.format_map(args) for part in shlex.split(template)]
            try:
                proc = subprocess.run(argv, capture_output=True, timeout=300)
            except (OSError, subprocess.TimeoutExpired) as e:
                raise CodecFailure(f"{codec.label}: {argv[0]} failed to run: {e}") from e
            if proc.returncode != 0:
                raise CodecFailure(
                    f"{codec.label}: {argv[0]} exited {proc.returncode}: "
                    f"{proc.stderr.decode(errors='replace')[:500]}"
                )
        if not dst.exists():
            raise CodecFailure(f"{codec.label}: decoder produced no output file")
        out = load_image_rgb(dst)
    if out.shape != image.shape:
        raise CodecFailure(f"{codec.label}: decoded shape {out.shape} != input {image.shape}")
    return out


# Per-level simulator parameters; level 1 is the heaviest compression.
# Values in [0,1] pixel units, calibrated so distortion is strictly
# monotone in level on textured images.
_SIM_DOWN = {1: 4, 2: 2, 3: 1}
_SIM_QSTEP = {1: 0.16, 2: 0.08, 3: 0.03}
_SIM_BLUR = {1: 1.2, 2: 0.7, 3: 0.3}
_SIM_RING = {1: 0.55, 2: 0.3, 3: 0.12}
_SIM_NOISE = {1: 1.6, 2: 0.8, 3: 0.3}


def _down_up(x: torch.Tensor, factor: int) -> torch.Tensor:
    if factor == 1:
        return x
    h, w = x.shape[-2:]
    small = F.interpolate(x, size=(max(1, h // factor), max(1, w // factor)), mode="area")
    return F.interpolate(small, size=(h, w), mode="bilinear", align_corners=False)


def _blur(x: np.ndarray, sigma: float) -> np.ndarray:
    return gaussian_filter(x, sigma=(sigma, sigma, 0), mode="reflect")


def _shift_edge(x: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.pad(x, ((abs(dy),), (abs(dx),), (0,)), mode="edge")
    h, w = x.shape[:2]
    return out[abs(dy) - dy : abs(dy) - dy + h, abs(dx) - dx : abs(dx) - dx + w]


def simulate_learned_codec(
    image: np.ndarray, level: int, family: Family, seed: int = 0
) -> np.ndarray:
    """Deterministic stand-in for a learned codec at one of 3 bitrate levels.

    Pipeline: downsample-upsample, uniform quantization of the high-frequency
    residual, then a family-specific artifact (blur for the MSE-style codec,
    edge ghosting for the SSIM-style one, seeded texture noise for the
    GAN-style one, masked to textured regions). Flat inputs pass through
    nearly unchanged because the quantized residual is zero there.
    """
    image = _check_image(image)
    if level not in (1, 2, 3):
        raise ValueError(f"level must be 1, 2 or 3, got {level!r}")
    family = Family(family)
    if family not in _LEARNED_FAMILIES:
        raise ValueError(f"{family.value} is not a learned-codec family")

    x = image.astype(np.float32) / 255.0
    t = torch.from_numpy(x).permute(2, 0, 1).unsqueeze(0)
    y = _down_up(t, _SIM_DOWN[level]).squeeze(0).permute(1, 2, 0).numpy().astype(np.float64)

    base = _blur(y, 1.0)
    residual = y - base
    step = _SIM_QSTEP[level]
    quantized = step * np.rint(residual / step)
    z = base + quantized

    if family is Family.LEARNED_PSNR:
        z = _blur(z, _SIM_BLUR[level])
    elif family is Family.LEARNED_SSIM:
        ring = _SIM_RING[level]
        for dy, dx in ((2, 0), (-2, 0), (0, 2), (0, -2)):
            z = z + ring / 4.0 * _shift_edge(quantized, dy, dx)
    else:  # LEARNED_GAN
        rng = np.random.default_rng(stable_seed(seed, family.value, level))
        energy = _blur(np.abs(residual), 2.0)
        z = z + _SIM_NOISE[level] * rng.standard_normal(z.shape) * energy

    return np.clip(np.rint(z * 255.0), 0, 255).astype(np.uint8)


def encode_decode(
    image: np.ndarray,
    codec: CodecSpec,
    *,
    external_commands: dict | None = None,
    seed: int = 0,
) -> np.ndarray:
    """Run one encode/decode round trip and return the degraded raster.

    `external_commands` maps a family name to its encode_cmd/decode_cmd
    templates (placeholders {in}, {out}, {qp}); families without an
    available backend raise MissingBackend so callers can skip the task.
    """
    image = _check_image(image)
    family = codec.family

    if family is Family.IDENTITY:
        return image.copy()

    if codec.backend is Backend.SIMULATOR:
        return simulate_learned_codec(image, codec.quality, family, seed=seed)

    if codec.backend is Backend.EXTERNAL:
        commands = (external_commands or {}).get(family.value)
        if not probe_external(commands):
            raise MissingBackend(
                f"no external encoder configured/installed for {family.value}; "
                f"set codec.{family.value}.encode_cmd / decode_cmd"
            )
        return _run_external(image, codec, commands)

    if family is Family.JPEG:
        return _pil_roundtrip(image, "JPEG", codec.quality)
    if family is Family.WEBP:
        if not features.check("webp"):
            raise MissingBackend("Pillow was built without WebP support")
        return _pil_roundtrip(image, "WEBP", codec.quality)
    raise MissingBackend(f"no builtin backend for {family.value}")
