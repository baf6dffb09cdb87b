"""Audio-conditioned segmentation network with a flow branch.

Pipeline: image encoder (4 stages, /4../32) and flow encoder (3 stages,
/4../16) -> per-scale refinement fusion ``F_v + up(refine(F_f))`` on the
three shallowest scales -> audio modulation of the two deepest scales ->
top-down decoder -> per-pixel sounding probability.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from pydantic import ConfigDict

from . import autodiff as ad
from .autodiff import Tensor

Params = dict[str, Tensor]


@dataclass(frozen=True)
class ModelConfig:
    __pydantic_config__ = ConfigDict(extra="forbid")

    image_widths: tuple[int, ...] = (16, 32, 64, 96)
    flow_widths: tuple[int, ...] = (8, 16, 32)
    audio_dim: int = 16
    audio_width: int = 64
    decoder_width: int = 24

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_widths"] = list(self.image_widths)
        d["flow_widths"] = list(self.flow_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["image_widths"] = tuple(d["image_widths"])
        d["flow_widths"] = tuple(d["flow_widths"])
        return cls(**d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# names of layers that start at zero so the flow/audio branches begin as no-ops
def _zero_init(name: str) -> bool:
    return (name.startswith("refine") and ".conv2." in name) or name.startswith("fuse")


def init_params(cfg: ModelConfig, seed: int = 0) -> Params:
    """Uniform(+-sqrt(1/fan_in)) weights, zero biases, zero-init aux branch tails."""
    rng = np.random.default_rng(seed)
    shapes: dict[str, tuple] = {}

    def conv(name, cout, cin, k=3):
        shapes[f"{name}.w"] = (cout, cin, k, k)
        shapes[f"{name}.b"] = (cout,)

    def lin(name, dout, din):
        shapes[f"{name}.w"] = (dout, din)
        shapes[f"{name}.b"] = (dout,)

    cin = 3
    for i, c in enumerate(cfg.image_widths, 1):
        conv(f"img{i}.conv1", c, cin)
        conv(f"img{i}.conv2", c, c)
        cin = c
    cin = 2
    for i, c in enumerate(cfg.flow_widths, 1):
        conv(f"flow{i}.conv1", c, cin)
        conv(f"flow{i}.conv2", c, c)
        cin = c
    for i, cf in enumerate(cfg.flow_widths, 1):
        cv = cfg.image_widths[i - 1]
        conv(f"refine{i}.conv1", cv, cf)
        conv(f"refine{i}.conv2", cv, cv)
    lin("audio.fc1", cfg.audio_width, cfg.audio_dim)
    lin("audio.fc2", cfg.audio_width, cfg.audio_width)
    for i in (3, 4):
        c = cfg.image_widths[i - 1]
        lin(f"fuse{i}.gamma", c, cfg.audio_width)
        lin(f"fuse{i}.beta", c, cfg.audio_width)
    dw = cfg.decoder_width
    widths = cfg.image_widths
    conv("dec4", dw, widths[3])
    conv("dec3", dw, dw + widths[2])
    conv("dec2", dw, dw + widths[1])
    conv("dec1", dw, dw + widths[0])
    conv("head", 1, dw, k=1)

    params: Params = {}
    for name, shape in shapes.items():
        if name.endswith(".b") or _zero_init(name):
            data = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(1.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def num_params(params: Params) -> int:
    return sum(t.size for t in params.values())


def _conv(x, p, name, stride=1, padding=1):
    return ad.conv2d(x, p[f"{name}.w"], p[f"{name}.b"], stride=stride, padding=padding)


def _block(x, p, name):
    # first stage must reach /4, so both of its convs stride by 2
    s2 = 2 if name.endswith("1") else 1
    x = ad.relu(_conv(x, p, f"{name}.conv1", stride=2))
    return ad.relu(_conv(x, p, f"{name}.conv2", stride=s2))


def encode_image(image: Tensor, p: Params) -> list[Tensor]:
    """Feature pyramid at (H,W)/4, /8, /16, /32."""
    h, w = image.shape[-2:]
    if image.shape[-3] != 3:
        raise ad.ShapeError(f"encode_image: expected 3 channels, got shape {image.shape}")
    if h % 32 or w % 32:
        raise ad.ShapeError(f"encode_image: spatial size {h}x{w} must be divisible by 32")
    feats, x = [], image
    for i in range(1, 5):
        x = _block(x, p, f"img{i}")
        feats.append(x)
    return feats


def encode_flow(flow: Tensor, p: Params, taps: Optional[dict] = None) -> list[Tensor]:
    """Flow features at (H,W)/4, /8, /16; the first conv takes 2 channels."""
    if flow.ndim not in (3, 4) or flow.shape[-3] != 2:
        raise ad.ShapeError(f"encode_flow: expected 2 channels, got shape {flow.shape}")
    feats, x = [], flow
    i = 1
    while f"flow{i}.conv1.w" in p:
        pre = _conv(x, p, f"flow{i}.conv1", stride=2)
        if taps is not None and i == 1:
            taps["flow1.pre"] = pre
        x = ad.relu(pre)
        x = ad.relu(_conv(x, p, f"flow{i}.conv2", stride=2 if i == 1 else 1))
        feats.append(x)
        i += 1
    return feats


def refine_fuse(fv: list[Tensor], ff: list[Tensor], p: Params) -> list[Tensor]:
    """F_refine_i = F_v_i + upsample(refine(F_f_i)) on the fused scales."""
    out = []
    for i, v in enumerate(fv, 1):
        if i > len(ff):
            out.append(v)
            continue
        r = ad.relu(_conv(ff[i - 1], p, f"refine{i}.conv1"))
        r = _conv(r, p, f"refine{i}.conv2")
        if r.shape[-3] != v.shape[-3]:
            raise ad.ShapeError(f"refine_fuse: scale {i} refine output has {r.shape[-3]} channels, "
                                f"image features have {v.shape[-3]}")
        factor = v.shape[-1] // r.shape[-1]
        if r.shape[-2] * factor != v.shape[-2] or r.shape[-1] * factor != v.shape[-1]:
            raise ad.ShapeError(f"refine_fuse: cannot upsample {r.shape} onto {v.shape}")
        out.append(ad.add(v, ad.upsample_bilinear(r, factor)))
    return out


def encode_audio(audio: Tensor, p: Params) -> Tensor:
    d = p["audio.fc1.w"].shape[1]
    if audio.shape[-1] != d:
        raise ad.ShapeError(f"encode_audio: expected dimension {d}, got shape {audio.shape}")
    h = ad.relu(ad.linear(audio, p["audio.fc1.w"], p["audio.fc1.b"]))
    return ad.linear(h, p["audio.fc2.w"], p["audio.fc2.b"])


def fuse_audio(feats: list[Tensor], fa: Tensor, p: Params) -> list[Tensor]:
    """(1 + gamma(F_a)) * F + beta(F_a) on scales 3 and 4; others pass through."""
    out = list(feats)
    for i in (3, 4):
        gamma = ad.linear(fa, p[f"fuse{i}.gamma.w"], p[f"fuse{i}.gamma.b"])
        beta = ad.linear(fa, p[f"fuse{i}.beta.w"], p[f"fuse{i}.beta.b"])
        out[i - 1] = ad.channel_affine(feats[i - 1], gamma, beta)
    return out


def decode_mask(feats: list[Tensor], p: Params) -> Tensor:
    """Top-down decoder to (H,W)/4, then head and x4 upsample; returns probabilities."""
    x = ad.relu(_conv(feats[3], p, "dec4"))
    for i in (3, 2, 1):
        x = ad.upsample_bilinear(x, 2)
        x = ad.relu(_conv(ad.concat_channels([x, feats[i - 1]]), p, f"dec{i}"))
    # 1x1 conv commutes with bilinear upsampling (rows of the interpolation sum to 1),
    # so the head runs at /4 and only the logits are upsampled
    logits = ad.upsample_bilinear(_conv(x, p, "head", padding=0), 4)
    prob = ad.sigmoid(logits)
    shape = prob.shape[:-3] + prob.shape[-2:]
    return ad.reshape(prob, shape)


def forward(image: Tensor, flow: Tensor, audio: Tensor, p: Params,
            taps: Optional[dict] = None) -> Tensor:
    """Mask probabilities [H,W] (or [N,H,W] for batched inputs)."""
    fv = encode_image(image, p)
    ff = encode_flow(flow, p, taps)
    fr = refine_fuse(fv, ff, p)
    if taps is not None:
        taps["refined"] = fr
    fa = encode_audio(audio, p)
    fused = fuse_audio(fr, fa, p)
    return decode_mask(fused, p)


def predict(params: Params, images: np.ndarray, flows: np.ndarray, audio: np.ndarray,
            chunk: int = 32) -> np.ndarray:
    """No-grad batched inference on numpy inputs [N,3,H,W], [N,2,H,W], [N,d]."""
    out = []
    with ad.no_grad():
        for s in range(0, len(images), chunk):
            sl = slice(s, s + chunk)
            out.append(forward(Tensor(images[sl]), Tensor(flows[sl]), Tensor(audio[sl]), params).data)
    return np.concatenate(out, axis=0)


# -------------------------------------------------------------- checkpoints
CKPT_MAGIC = b"UFEC"
CKPT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def write_checkpoint(path, tensors: dict[str, np.ndarray], model_cfg: ModelConfig,
                     meta: Optional[dict] = None) -> None:
    """JSON header (names, shapes, config hash, checksum) + little-endian float32 block."""
    entries, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes
    block = b"".join(blobs)
    header = {
        "version": CKPT_VERSION,
        "config_hash": model_cfg.hash(),
        "model_config": model_cfg.to_dict(),
        "tensors": entries,
        "nbytes": len(block),
        "sha256": hashlib.sha256(block).hexdigest(),
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CKPT_MAGIC + struct.pack("<I", len(hbytes)) + hbytes + block)
    tmp.replace(path)


def read_checkpoint(path, expected_config_hash: Optional[str] = None):
    """Returns (tensors, model_cfg, meta). Validates magic, version, hash and checksum."""
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC or len(raw) < 8:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<I", raw[4:8])
    try:
        header = json.loads(raw[8:8 + hlen])
    except ValueError as e:
        raise CheckpointError(f"{path}: corrupt header: {e}") from None
    if header.get("version") != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {header.get('version')} "
                              f"!= supported {CKPT_VERSION}")
    if expected_config_hash is not None and header["config_hash"] != expected_config_hash:
        raise CheckpointError(f"{path}: model config hash {header['config_hash']} "
                              f"!= expected {expected_config_hash}")
    block = raw[8 + hlen:]
    if len(block) != header["nbytes"]:
        raise CheckpointError(f"{path}: float block truncated ({len(block)} of {header['nbytes']} bytes)")
    if hashlib.sha256(block).hexdigest() != header["sha256"]:
        raise CheckpointError(f"{path}: checksum mismatch in float block")
    tensors = {}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(block, dtype="<f4", count=n, offset=e["offset"])
        tensors[e["name"]] = arr.reshape(e["shape"]).astype(np.float32)
    return tensors, ModelConfig.from_dict(header["model_config"]), header["meta"]


def save_params(path, params: Params, cfg: ModelConfig, meta: Optional[dict] = None) -> None:
    write_checkpoint(path, {f"param/{k}": v.data for k, v in params.items()}, cfg, meta)


def load_params(path) -> tuple[Params, ModelConfig, dict]:
    tensors, cfg, meta = read_checkpoint(path)
    params = {k[len("param/"):]: Tensor(v, requires_grad=True, name=k[len("param/"):])
              for k, v in tensors.items() if k.startswith("param/")}
    if not params:
        raise CheckpointError(f"{path}: no model parameters found")
    return params, cfg, meta
