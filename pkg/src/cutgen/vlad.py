"""Vision-language anomaly detector: frozen two-tower feature interface, a
per-stage linear feature adapter, vision-language and vision-vision
similarity scoring, and their fusion.

Ships a deterministic toy extractor for desk-scale tests. Its image token is
constructed orthogonal to the two text anchors, so the untrained
vision-language image score is an uninformative constant 0.5 and all
trainable signal flows through the patch tokens.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources as importlib_resources
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .types import ValidationError

DEFAULT_TEMPERATURE = 100.0


def load_prompt_ensemble() -> dict:
    with importlib_resources.files("cutgen.resources").joinpath("prompts.json").open() as fh:
        return json.load(fh)


def format_prompts(class_name: str) -> tuple[list[str], list[str]]:
    ens = load_prompt_ensemble()
    return ([p.format(cls=class_name) for p in ens["normal"]],
            [p.format(cls=class_name) for p in ens["abnormal"]])


class FeatureExtractor(Protocol):
    """Frozen two-tower feature source. Deterministic per input."""

    stages: tuple[str, ...]
    stage_dims: dict[str, int]
    embed_dim: int

    def image_token(self, pixels: np.ndarray) -> torch.Tensor: ...
    def patch_tokens(self, pixels: np.ndarray, stage: str) -> torch.Tensor: ...
    def text_embed(self, normal_prompts: Sequence[str], abnormal_prompts: Sequence[str]) -> torch.Tensor: ...


def _normalize(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return x / x.norm(dim=dim, keepdim=True).clamp_min(1e-12)


class ToyFeatureExtractor:
    """Local-statistics features behind fixed seeded projections.

    Patch tokens are per-cell statistics (color means, spread, gradient
    energy, extrema), whitened against fixed reference constants so cosine
    similarity actually separates cell types, then projected to
    stage-specific dimensions. text_embed returns two fixed orthonormal
    anchors that span a subspace the image token never touches.
    """

    N_STATS = 8
    # reference shift/scale per stat channel; stats land roughly in [-2, 2]
    REF_SHIFT = (0.5, 0.5, 0.5, 0.05, 0.03, 0.1, 0.5, 0.5)
    REF_SCALE = (0.25, 0.25, 0.25, 0.05, 0.03, 0.1, 0.25, 0.25)

    def __init__(self, seed: int = 0, embed_dim: int = 32,
                 grids: dict[str, int] | None = None,
                 stage_dims: dict[str, int] | None = None):
        self.embed_dim = embed_dim
        # fine grids only: coarse cells straddle object boundaries and a
        # k=1 bank covers their mix ratios too sparsely
        self.grids = grids or {"s32": 32, "s16": 16}
        self.stages = tuple(sorted(self.grids))
        self.stage_dims = stage_dims or {"s32": 16, "s16": 12}
        if set(self.stage_dims) != set(self.stages):
            raise ValidationError("stage_dims must cover exactly the stage set")
        self.neutral_dims = (0, 1)  # coordinates the text anchors live in
        g = torch.Generator().manual_seed(seed)
        self._proj = {
            st: (torch.randn(self.stage_dims[st], self.N_STATS, generator=g) / self.N_STATS ** 0.5,
                 torch.randn(self.stage_dims[st], generator=g) * 0.1)
            for st in self.stages
        }
        w_img = torch.randn(embed_dim, self.N_STATS, generator=g) / self.N_STATS ** 0.5
        w_img[0] = 0.0  # keep the image token orthogonal to both text anchors
        w_img[1] = 0.0
        self._w_img = w_img

    def _stat_maps(self, pixels: np.ndarray) -> torch.Tensor:
        x = torch.as_tensor(np.ascontiguousarray(pixels), dtype=torch.float32).permute(2, 0, 1)
        gray = x.mean(dim=0, keepdim=True)
        gy = torch.zeros_like(gray)
        gx = torch.zeros_like(gray)
        gy[:, 1:-1, :] = (gray[:, 2:, :] - gray[:, :-2, :]) / 2.0
        gx[:, :, 1:-1] = (gray[:, :, 2:] - gray[:, :, :-2]) / 2.0
        gmag = torch.sqrt(gx ** 2 + gy ** 2 + 1e-12)
        return torch.cat([x, gray, gmag], dim=0)  # R,G,B, gray, gradmag

    def _cell_stats(self, pixels: np.ndarray, grid: int) -> torch.Tensor:
        maps = self._stat_maps(pixels)[None]
        mean = F.adaptive_avg_pool2d(maps, grid)[0]
        sq = F.adaptive_avg_pool2d(maps ** 2, grid)[0]
        std_gray = (sq[3] - mean[3] ** 2).clamp_min(0.0).sqrt()
        max_grad = F.adaptive_max_pool2d(maps[:, 4:5], grid)[0, 0]
        max_gray = F.adaptive_max_pool2d(maps[:, 3:4], grid)[0, 0]
        min_gray = -F.adaptive_max_pool2d(-maps[:, 3:4], grid)[0, 0]
        stats = torch.stack([mean[0], mean[1], mean[2], std_gray, mean[4],
                             max_grad, min_gray, max_gray], dim=-1)
        shift = torch.tensor(self.REF_SHIFT)
        scale = torch.tensor(self.REF_SCALE)
        return (stats - shift) / scale  # grid x grid x N_STATS, whitened

    def patch_tokens(self, pixels: np.ndarray, stage: str) -> torch.Tensor:
        if stage not in self.grids:
            raise ValidationError(f"unknown stage {stage!r}")
        w, b = self._proj[stage]
        return self._cell_stats(pixels, self.grids[stage]) @ w.T + b

    def image_token(self, pixels: np.ndarray) -> torch.Tensor:
        stats = self._cell_stats(pixels, 1)[0, 0]
        return stats @ self._w_img.T

    def text_embed(self, normal_prompts, abnormal_prompts) -> torch.Tensor:
        anchors = torch.zeros(2, self.embed_dim)
        anchors[0, 0] = 1.0
        anchors[1, 1] = 1.0
        return anchors


class FeatureAdapter(nn.Module):
    """One trainable linear map per stage into the text-embedding space.

    Initialized with orthonormal columns, so cosine structure of the raw
    tokens is preserved before any training. Output coordinates listed in
    neutral_dims start at zero: when the text anchors live in those
    coordinates, the untrained vision-language logits are exactly neutral
    and alignment is learned rather than inherited from init noise.
    """

    def __init__(self, stage_dims: dict[str, int], embed_dim: int, seed: int = 0,
                 neutral_dims: Sequence[int] = ()):
        super().__init__()
        self.stage_dims = dict(stage_dims)
        self.embed_dim = embed_dim
        self.neutral_dims = tuple(neutral_dims)
        g = torch.Generator().manual_seed(seed)
        self.linears = nn.ModuleDict()
        for stage in sorted(stage_dims):
            c_in = stage_dims[stage]
            lin = nn.Linear(c_in, embed_dim)
            # orthonormal columns (or rows, when projecting down)
            if c_in <= embed_dim:
                q, _ = torch.linalg.qr(torch.randn(embed_dim, c_in, generator=g))
            else:
                q, _ = torch.linalg.qr(torch.randn(c_in, embed_dim, generator=g))
                q = q.T
            with torch.no_grad():
                lin.weight.copy_(q)
                lin.bias.zero_()
                for d in self.neutral_dims:
                    lin.weight[d].zero_()
            self.linears[stage] = lin

    def forward(self, stage: str, tokens: torch.Tensor) -> torch.Tensor:
        return self.linears[stage](tokens)

    def adapt_all(self, extractor: FeatureExtractor, pixels: np.ndarray) -> dict[str, torch.Tensor]:
        return {st: self(st, extractor.patch_tokens(pixels, st)) for st in extractor.stages}


@dataclass
class MemoryBank:
    """Adapted, L2-normalized patch tokens of normal images, per stage."""

    banks: dict[str, torch.Tensor]

    def __post_init__(self):
        if not self.banks:
            raise ValidationError("memory bank is empty")
        for stage, rows in self.banks.items():
            if rows.ndim != 2 or rows.shape[0] == 0:
                raise ValidationError(f"bank stage {stage!r} must be a non-empty 2-D row array")
            norms = rows.norm(dim=1)
            if (norms - 1.0).abs().max() > 1e-5:
                raise ValidationError(f"bank rows at stage {stage!r} are not unit-norm")


@dataclass(frozen=True)
class DetectionResult:
    s_img: float
    m_pix: np.ndarray

    def __post_init__(self):
        if not np.isfinite(self.s_img) or not np.all(np.isfinite(self.m_pix)):
            raise ValidationError("detection result contains non-finite values")


def vl_image_score(f_img: torch.Tensor, f_text: torch.Tensor,
                   temperature: float = DEFAULT_TEMPERATURE) -> torch.Tensor:
    """Two-class softmax over scaled cosine logits; returns the abnormal probability."""
    f_img, f_text = torch.as_tensor(f_img), torch.as_tensor(f_text)
    if f_img.shape[-1] != f_text.shape[-1] or f_text.shape[0] != 2:
        raise ValidationError(f"dim mismatch: image {tuple(f_img.shape)} vs text {tuple(f_text.shape)}")
    logits = temperature * (_normalize(f_img) @ _normalize(f_text).T)
    return torch.softmax(logits, dim=-1)[1]


def _upsample(map2d: torch.Tensor, target_hw: tuple[int, int]) -> torch.Tensor:
    return F.interpolate(map2d[None, None], size=target_hw, mode="bilinear",
                         align_corners=False)[0, 0]


def vl_pixel_map(adapted: dict[str, torch.Tensor], f_text: torch.Tensor,
                 target_hw: tuple[int, int], temperature: float = DEFAULT_TEMPERATURE) -> torch.Tensor:
    """Sum over stages of the per-patch abnormal softmax, upsampled. Range [0, |stages|]."""
    if not adapted:
        raise ValidationError("no adapted stages supplied")
    ft = _normalize(torch.as_tensor(f_text))
    total = None
    for stage in sorted(adapted):
        logits = temperature * (_normalize(adapted[stage]) @ ft.T)
        abn = torch.softmax(logits, dim=-1)[..., 1]
        up = _upsample(abn, target_hw)
        total = up if total is None else total + up
    return total


def vv_pixel_map(adapted: dict[str, torch.Tensor], bank: MemoryBank,
                 target_hw: tuple[int, int]) -> torch.Tensor:
    """Sum over stages of (1 - best cosine match against the bank), upsampled."""
    if set(adapted) != set(bank.banks):
        raise ValidationError(f"bank stages {sorted(bank.banks)} != query stages {sorted(adapted)}")
    total = None
    for stage in sorted(adapted):
        q = _normalize(adapted[stage])
        h, w, c = q.shape
        sims = q.reshape(-1, c) @ bank.banks[stage].T
        dist = (1.0 - sims.max(dim=1).values).reshape(h, w)
        up = _upsample(dist, target_hw)
        total = up if total is None else total + up
    return total


def detect(pixels: np.ndarray, extractor: FeatureExtractor, adapter: FeatureAdapter,
           f_text: torch.Tensor, bank: MemoryBank | None = None,
           temperature: float = DEFAULT_TEMPERATURE) -> DetectionResult:
    """Fused prediction: s_img = S_VL + S_VV, m_pix = M_VL + M_VV.

    Stage sums are rescaled by 1/|stages| so pixel scores stay bounded;
    without a bank the vision-vision terms are exactly zero.
    """
    hw = pixels.shape[:2]
    n_stages = len(extractor.stages)
    with torch.no_grad():
        s_vl = vl_image_score(extractor.image_token(pixels), f_text, temperature)
        adapted = adapter.adapt_all(extractor, pixels)
        m_vl = vl_pixel_map(adapted, f_text, hw, temperature)
        if bank is not None:
            m_vv = vv_pixel_map(adapted, bank, hw)
            s_vv = m_vv.max() / n_stages
            m_pix = (m_vl + m_vv) / n_stages
        else:
            s_vv = torch.zeros(())
            m_pix = m_vl / n_stages
        return DetectionResult(s_img=float(s_vl + s_vv), m_pix=m_pix.numpy())


# ---------------------------------------------------------------------------
# checkpoint container: 8-byte magic, u64 header length, JSON header, raw f32
# ---------------------------------------------------------------------------

_MAGIC = b"CUTCKPT1"


def _write_container(path: Path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    names = sorted(arrays)
    header = dict(header)
    header["arrays"] = [{"name": n, "shape": list(arrays[n].shape)} for n in names]
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(arrays[n], dtype="<f4").tobytes())


def _read_container(path: Path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        if fh.read(8) != _MAGIC:
            raise ValidationError(f"{path} is not a checkpoint container")
        n = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(n).decode("utf-8"))
        arrays = {}
        for spec in header["arrays"]:
            count = int(np.prod(spec["shape"])) if spec["shape"] else 1
            buf = fh.read(4 * count)
            arrays[spec["name"]] = np.frombuffer(buf, dtype="<f4").reshape(spec["shape"]).copy()
    return header, arrays


def save_adapter(adapter: FeatureAdapter, path: Path) -> None:
    arrays = {}
    for stage, lin in adapter.linears.items():
        arrays[f"{stage}.weight"] = lin.weight.detach().numpy()
        arrays[f"{stage}.bias"] = lin.bias.detach().numpy()
    header = {"version": 1, "kind": "adapter", "embed_dim": adapter.embed_dim,
              "stage_dims": adapter.stage_dims}
    _write_container(path, header, arrays)


def load_adapter(path: Path) -> FeatureAdapter:
    header, arrays = _read_container(path)
    if header.get("kind") != "adapter":
        raise ValidationError(f"{path} is not an adapter checkpoint")
    adapter = FeatureAdapter(header["stage_dims"], header["embed_dim"])
    with torch.no_grad():
        for stage, lin in adapter.linears.items():
            lin.weight.copy_(torch.as_tensor(arrays[f"{stage}.weight"]))
            lin.bias.copy_(torch.as_tensor(arrays[f"{stage}.bias"]))
    return adapter


def save_bank(bank: MemoryBank, path: Path) -> None:
    arrays = {f"{stage}.rows": rows.detach().numpy() for stage, rows in bank.banks.items()}
    header = {"version": 1, "kind": "bank",
              "rows_per_stage": {s: int(r.shape[0]) for s, r in bank.banks.items()}}
    _write_container(path, header, arrays)


def load_bank(path: Path) -> MemoryBank:
    header, arrays = _read_container(path)
    if header.get("kind") != "bank":
        raise ValidationError(f"{path} is not a bank checkpoint")
    banks = {name[:-len(".rows")]: torch.as_tensor(rows) for name, rows in arrays.items()}
    return MemoryBank(banks=banks)
