"""Named, stage-tagged parameter blocks and the block-level algebra used by
the federation protocol (deltas, partial sharing)."""
from __future__ import annotations

import enum
import re
from collections.abc import Iterator, Mapping

import numpy as np

_STAGE_RE = re.compile(r"^(encoder|decoder)(\d+)$|^final$")


def stage_index(tag: str) -> int | None:
    """Block number of a stage tag (``encoder3`` -> 3); ``None`` for ``final``."""
    m = _STAGE_RE.match(tag)
    if m is None:
        raise ValueError(f"invalid stage tag {tag!r}")
    return None if tag == "final" else int(m.group(2))


class ParamSet(Mapping):
    """Ordered mapping ``name -> ndarray`` plus a stage tag per block.

    Treated as an immutable value: every operation returns a new instance.
    """

    __slots__ = ("_blocks", "_stages")

    def __init__(self, blocks: Mapping[str, np.ndarray], stages: Mapping[str, str]):
        blocks = dict(blocks)
        missing = [n for n in blocks if n not in stages]
        if missing:
            raise ValueError(f"blocks without stage tag: {missing}")
        for tag in set(stages[n] for n in blocks):
            stage_index(tag)
        self._blocks = {n: np.asarray(b) for n, b in blocks.items()}
        self._stages = {n: stages[n] for n in blocks}

    def __getitem__(self, name: str) -> np.ndarray:
        return self._blocks[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._blocks)

    def __len__(self) -> int:
        return len(self._blocks)

    def __repr__(self) -> str:
        return f"ParamSet({len(self)} blocks, {self.size} values)"

    @property
    def stages(self) -> dict[str, str]:
        return dict(self._stages)

    def stage(self, name: str) -> str:
        return self._stages[name]

    @property
    def size(self) -> int:
        return int(sum(b.size for b in self._blocks.values()))

    @property
    def dtype(self):
        return next(iter(self._blocks.values())).dtype if self._blocks else np.dtype(np.float32)

    def replace(self, blocks: Mapping[str, np.ndarray]) -> "ParamSet":
        """New ParamSet with the given blocks, inheriting stage tags."""
        return ParamSet(blocks, {n: self._stages[n] for n in blocks})

    def copy(self) -> "ParamSet":
        return self.replace({n: b.copy() for n, b in self._blocks.items()})

    def astype(self, dtype) -> "ParamSet":
        return self.replace({n: b.astype(dtype) for n, b in self._blocks.items()})

    def subset(self, names) -> "ParamSet":
        names = list(names)
        return self.replace({n: self._blocks[n] for n in names})

    def zeros_like(self) -> "ParamSet":
        return self.replace({n: np.zeros_like(b) for n, b in self._blocks.items()})

    def scale(self, factor: float) -> "ParamSet":
        return self.replace({n: b * b.dtype.type(factor) for n, b in self._blocks.items()})

    def negate(self) -> "ParamSet":
        return self.replace({n: -b for n, b in self._blocks.items()})

    def norm(self) -> float:
        return float(np.sqrt(sum(np.sum(np.square(b, dtype=np.float64)) for b in self._blocks.values())))

    def same_shapes(self, other: Mapping[str, np.ndarray]) -> bool:
        return list(self) == list(other) and all(self[n].shape == other[n].shape for n in self)

    def bitwise_equal(self, other: Mapping[str, np.ndarray]) -> bool:
        if list(self) != list(other):
            return False
        return all(
            self[n].dtype == other[n].dtype and self[n].shape == other[n].shape
            and self[n].tobytes() == np.asarray(other[n]).tobytes()
            for n in self
        )


class ShareFilter(str, enum.Enum):
    """Which stage-tagged blocks are exchanged with the server."""

    ALL = "all"
    EXCEPT_FINAL = "except_final"
    EXCEPT_BLOCK10_PLUS = "except_block10"
    EXCEPT_DECODER = "except_decoder"

    def shares(self, tag: str, last_decoder: int, depth: int) -> bool:
        idx = stage_index(tag)
        if self is ShareFilter.ALL:
            return True
        if tag == "final":
            return False
        if self is ShareFilter.EXCEPT_FINAL:
            return True
        if self is ShareFilter.EXCEPT_BLOCK10_PLUS:
            return not (tag.startswith("decoder") and idx == last_decoder)
        return tag.startswith("encoder") and idx <= depth

    def selected(self, params: ParamSet) -> list[str]:
        """Names of the blocks of ``params`` this filter shares."""
        enc = [stage_index(t) for t in params.stages.values() if t.startswith("encoder")]
        dec = [stage_index(t) for t in params.stages.values() if t.startswith("decoder")]
        depth = max(enc, default=0)
        last = max(dec, default=-1)
        return [n for n in params if self.shares(params.stage(n), last, depth)]

    def select(self, params: ParamSet) -> ParamSet:
        return params.subset(self.selected(params))


def _check_shapes(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray], names):
    for n in names:
        if n not in a or n not in b:
            raise ValueError(f"block {n!r} missing")
        if a[n].shape != b[n].shape:
            raise ValueError(f"shape mismatch in block {n!r}: {a[n].shape} vs {b[n].shape}")


def apply_delta(params: ParamSet, delta: Mapping[str, np.ndarray],
                share: ShareFilter = ShareFilter.ALL) -> ParamSet:
    """``params + delta`` over the blocks selected by ``share``.

    Blocks outside the filter, or absent from ``delta``, are returned as-is.
    The sum is formed in the wider of the two dtypes and cast back to the
    dtype of ``params``.
    """
    share = ShareFilter(share)
    names = [n for n in share.selected(params) if n in delta]
    _check_shapes(params, delta, names)
    out = dict(params.items())
    for n in names:
        p = params[n]
        d = np.asarray(delta[n])
        wide = np.result_type(p.dtype, d.dtype)
        out[n] = (p.astype(wide) + d.astype(wide)).astype(p.dtype)
    return params.replace(out)


def subtract(after: Mapping[str, np.ndarray], before: ParamSet, dtype=None) -> ParamSet:
    """Blockwise ``after - before``; ``dtype`` widens the result (float64 keeps
    the difference of two float32 values exact)."""
    if list(after) != list(before):
        raise ValueError("parameter sets have different blocks")
    _check_shapes(after, before, list(before))
    out = {}
    for n in before:
        a, b = np.asarray(after[n]), before[n]
        dt = np.dtype(dtype) if dtype is not None else np.result_type(a.dtype, b.dtype)
        out[n] = a.astype(dt) - b.astype(dt)
    return before.replace(out)
