"""
Self-assembly layer

Each masked cell of a feature grid is regenerated, in raster order, as a
similarity-weighted mix of three candidates: the mirrored-position
neighborhood mean (p_s), the most similar unmasked cell (p_k) and the
previously generated cell (p_prev). Similarities are cosine similarities
against the cell's current (coarse) content, clamped at zero.
"""

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import torch
import torch.nn as nn

from .errors import DimensionMismatchError


def similarity(p: torch.Tensor, p_x: torch.Tensor) -> torch.Tensor:
    """Normalized cross-correlation <p, p_x> / (|p| |p_x|); 0 if either is zero"""
    if p.shape != p_x.shape:
        raise DimensionMismatchError(f"Cannot compare vectors of shape {tuple(p.shape)} and {tuple(p_x.shape)}")
    return _cosine(p, p_x)


def _cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine over the last dim, broadcasting; zero-norm pairs give 0"""
    dot = (a * b).sum(dim=-1)
    denom = a.norm(dim=-1) * b.norm(dim=-1)
    positive = denom > 0
    return torch.where(positive, dot / torch.where(positive, denom, torch.ones_like(denom)), torch.zeros_like(dot))


@dataclass
class AssemblyState:
    """
    Working copy of one feature grid during assembly

    cells holds the current vector of every grid cell (generated cells
    replace their coarse content); reference keeps the coarse content.
    """

    cells: List[torch.Tensor]
    reference: List[torch.Tensor]
    flags: List[bool]
    rows: int
    cols: int
    order: List[int] = field(default_factory=list)
    previous: Optional[torch.Tensor] = None

    @classmethod
    def from_features(cls, features: torch.Tensor, flags) -> "AssemblyState":
        """features: (C, rows, cols); flags: rows * cols booleans"""
        channels, rows, cols = features.shape
        flags = [bool(f) for f in flags]
        if len(flags) != rows * cols:
            raise DimensionMismatchError(f"{len(flags)} flags for a {rows}x{cols} feature grid")
        flat = features.reshape(channels, rows * cols)
        cells = [flat[:, i] for i in range(rows * cols)]
        return cls(
            cells=list(cells),
            reference=list(cells),
            flags=flags,
            rows=rows,
            cols=cols,
            order=[i for i, f in enumerate(flags) if f],
        )

    def grid(self) -> torch.Tensor:
        """(C, rows, cols) view of the current cells"""
        return torch.stack(self.cells, dim=1).reshape(-1, self.rows, self.cols)


def mirror_neighborhood(index: int, rows: int, cols: int) -> List[int]:
    """Mirrored cell of index and its in-bounds 3x3 neighbors"""
    row, col = divmod(index, cols)
    mirror_col = cols - 1 - col
    cells = []
    for r in range(row - 1, row + 2):
        for c in range(mirror_col - 1, mirror_col + 2):
            if 0 <= r < rows and 0 <= c < cols:
                cells.append(r * cols + c)
    return cells


def symmetric_patch(state: AssemblyState, index: int) -> torch.Tensor:
    """Mean of the mirrored cell's 3x3 neighborhood in the current grid"""
    neighborhood = mirror_neighborhood(index, state.rows, state.cols)
    return torch.stack([state.cells[i] for i in neighborhood]).mean(dim=0)


def find_known_patch(state: AssemblyState, index: int) -> Tuple[torch.Tensor, torch.Tensor]:
    """Most similar unmasked cell to the reference at index; ties go to the lower index"""
    known = [i for i, f in enumerate(state.flags) if not f]
    if not known:
        raise ValueError("Every cell is masked; nothing to copy from")
    p = state.reference[index]
    sims = _cosine(p.unsqueeze(0), torch.stack([state.cells[i] for i in known]))
    best = int(torch.argmax(sims))
    return state.cells[known[best]], sims[best]


def self_assembly_step(state: AssemblyState, step: int) -> torch.Tensor:
    """
    Generate the cell at position ``step`` of state.order (0-based)

    Uses state.previous as p_prev; the first step has none (S_prev = 0).
    When all clamped similarities are zero the coarse cell is kept.
    """
    index = state.order[step]
    p = state.reference[index]
    p_s = symmetric_patch(state, index)
    p_k, s_known = find_known_patch(state, index)
    s_sym = similarity(p, p_s)

    if step == 0 or state.previous is None:
        p_prev = torch.zeros_like(p)
        s_prev = torch.zeros_like(s_sym)
    else:
        p_prev = state.previous
        s_prev = similarity(p, p_prev)

    s_sym, s_known, s_prev = (s.clamp(min=0.0) for s in (s_sym, s_known, s_prev))
    denom = s_sym + s_known + s_prev
    if float(denom) <= 0.0:
        return p
    return (s_sym * p_s + s_known * p_k + s_prev * p_prev) / denom


def assemble(state: AssemblyState) -> torch.Tensor:
    """Run every step in order, writing results back; returns the (C, rows, cols) grid"""
    state.previous = None
    for step, index in enumerate(state.order):
        generated = self_assembly_step(state, step)
        state.cells[index] = generated
        state.previous = generated
    return state.grid()


def mirror_operator(rows: int, cols: int) -> torch.Tensor:
    """(N, N) matrix whose row i averages the mirror neighborhood of cell i"""
    n = rows * cols
    op = torch.zeros(n, n)
    for i in range(n):
        neighborhood = mirror_neighborhood(i, rows, cols)
        op[i, neighborhood] = 1.0 / len(neighborhood)
    return op


class SelfAssembly(nn.Module):
    """
    Batched self-assembly over (B, C, rows, cols) features

    Steps run in lockstep across the batch; an image with fewer masked
    cells simply stops updating. Matches ``assemble`` per image.
    """

    def __init__(self, rows: int, cols: int):
        super().__init__()
        self.rows = rows
        self.cols = cols
        self.register_buffer("mirror", mirror_operator(rows, cols), persistent=False)

    def forward(self, features: torch.Tensor, flags: torch.Tensor) -> torch.Tensor:
        batch, channels, rows, cols = features.shape
        if (rows, cols) != (self.rows, self.cols):
            raise DimensionMismatchError(f"Feature grid {rows}x{cols} does not match {self.rows}x{self.cols}")
        flags = flags.reshape(batch, rows * cols).bool()
        if not flags.any():
            return features
        if flags.all(dim=1).any():
            raise ValueError("Every cell is masked in at least one image; nothing to copy from")

        reference = features.flatten(2).transpose(1, 2)
        cells = reference
        mirror = self.mirror.to(features.dtype)

        counts = flags.sum(dim=1)
        # stable sort puts masked cells first, in raster order
        order = torch.sort((~flags).to(torch.int8), dim=1, stable=True).indices
        batch_idx = torch.arange(batch, device=features.device)
        previous = torch.zeros(batch, channels, dtype=features.dtype, device=features.device)
        has_previous = torch.zeros(batch, dtype=torch.bool, device=features.device)

        for step in range(int(counts.max())):
            active = counts > step
            index = order[:, step]
            p = reference[batch_idx, index]

            p_s = torch.bmm(mirror[index].unsqueeze(1), cells).squeeze(1)

            sims = _cosine(p.unsqueeze(1), cells)
            sims = sims.masked_fill(flags, float("-inf"))
            best = sims.argmax(dim=1)
            p_k = cells[batch_idx, best]
            s_known = sims[batch_idx, best]

            s_sym = _cosine(p, p_s)
            s_prev = torch.where(has_previous, _cosine(p, previous), torch.zeros_like(s_sym))

            s_sym, s_known, s_prev = (s.clamp(min=0.0) for s in (s_sym, s_known, s_prev))
            denom = s_sym + s_known + s_prev
            safe = torch.where(denom > 0, denom, torch.ones_like(denom)).unsqueeze(1)
            mixed = (s_sym.unsqueeze(1) * p_s + s_known.unsqueeze(1) * p_k + s_prev.unsqueeze(1) * previous) / safe
            generated = torch.where((denom > 0).unsqueeze(1), mixed, p)

            write = nn.functional.one_hot(index, rows * cols).to(features.dtype) * active.unsqueeze(1)
            cells = cells * (1 - write.unsqueeze(2)) + write.unsqueeze(2) * generated.unsqueeze(1)
            previous = torch.where(active.unsqueeze(1), generated, previous)
            has_previous = has_previous | active

        return cells.transpose(1, 2).reshape(batch, channels, rows, cols)


class ConventionalBlock(nn.Module):
    """Plain 3x3 convolution used in place of self-assembly for comparison"""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, features: torch.Tensor, flags: torch.Tensor) -> torch.Tensor:
        return self.conv(features)
