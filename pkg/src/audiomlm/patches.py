"""Mel spectrogram -> 16x16 patch sequences, plus random mask sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import MEL_BINS, MelSpectrogram
from .errors import ContractError, TooShortError

PATCH_SIZE = 16
FREQ_PATCHES = MEL_BINS // PATCH_SIZE  # 8
PATCH_DIM = PATCH_SIZE * PATCH_SIZE  # 256


@dataclass
class PatchSequence:
    patches: np.ndarray  # (N, 256) float32, row-major flattened 16x16 tiles
    grid: tuple[int, int]  # (time_patches, freq_patches)
    source_frames: int

    def __len__(self) -> int:
        return self.patches.shape[0]


@dataclass
class MaskSpec:
    masked: np.ndarray  # sorted unique indices into [0, N)
    ratio: float

    def __len__(self) -> int:
        return self.masked.size


def patchify(mel: MelSpectrogram) -> PatchSequence:
    """Cut (T, 128) frames into flattened 16x16 tiles, time-major then frequency.

    Trailing frames that do not fill a 16-frame patch are truncated.
    """
    frames = np.asarray(mel.frames)
    t, bins = frames.shape
    if bins != MEL_BINS:
        raise ContractError(f"expected {MEL_BINS} mel bins, got {bins}")
    if t < PATCH_SIZE:
        raise TooShortError(f"{t} frames < one {PATCH_SIZE}-frame patch")
    time_patches = t // PATCH_SIZE
    used = frames[: time_patches * PATCH_SIZE]
    tiles = used.reshape(time_patches, PATCH_SIZE, FREQ_PATCHES, PATCH_SIZE)
    patches = tiles.transpose(0, 2, 1, 3).reshape(-1, PATCH_DIM)
    return PatchSequence(
        patches=np.ascontiguousarray(patches, dtype=np.float32),
        grid=(time_patches, FREQ_PATCHES),
        source_frames=t,
    )


def unpatchify(seq: PatchSequence) -> np.ndarray:
    """Reassemble the truncated (time_patches*16, 128) frame block."""
    time_patches, freq_patches = seq.grid
    tiles = seq.patches.reshape(time_patches, freq_patches, PATCH_SIZE, PATCH_SIZE)
    return tiles.transpose(0, 2, 1, 3).reshape(time_patches * PATCH_SIZE, MEL_BINS)


def patch_position_ids(n: int) -> tuple[np.ndarray, np.ndarray]:
    """(time index, frequency index) per patch under time-major enumeration."""
    idx = np.arange(n)
    return idx // FREQ_PATCHES, idx % FREQ_PATCHES


def sample_mask(n: int, ratio: float, rng: np.random.Generator) -> MaskSpec:
    """Uniform mask of round(ratio*n) positions, clamped to keep both sides non-empty."""
    if n < 2:
        raise ContractError(f"need at least 2 patches to mask, got {n}")
    if not 0.0 < ratio < 1.0:
        raise ContractError(f"mask ratio must lie in (0,1), got {ratio}")
    count = int(round(ratio * n))
    count = min(max(count, 1), n - 1)
    masked = np.sort(rng.choice(n, size=count, replace=False)).astype(np.int64)
    return MaskSpec(masked=masked, ratio=ratio)


def mask_bool(spec: MaskSpec, n: int) -> np.ndarray:
    out = np.zeros(n, dtype=bool)
    out[spec.masked] = True
    return out
