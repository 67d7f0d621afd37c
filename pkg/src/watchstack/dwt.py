"""Data watchpoint unit: four comparator groups behind an MMIO window.

Each group is three registers, 16 bytes apart per group: an address
comparator, a power-of-two mask, and a function code selecting which
access kinds match.  COMP1 is special in this design: the runtime keeps
the shadow stack pointer in it, which both hides the pointer from the
program's address space and lets the unit sanity-check it on update.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .machine import ACCESS_READ, ACCESS_WRITE, HaltReason

# MMIO window, cycle counter, and comparator register addresses.
DWT_WINDOW_LO = 0xE0001000
DWT_WINDOW_HI = 0xE0001060
DWT_CTRL = 0xE0001000
DWT_CYCCNT = 0xE0001004
DWT_COMP_BASE = 0xE0001020
DWT_GROUP_STRIDE = 16
DWT_COMP_OFF = 0
DWT_MASK_OFF = 4
DWT_FUNCTION_OFF = 8
NUM_GROUPS = 4

DWT_COMP0 = DWT_COMP_BASE
DWT_MASK0 = DWT_COMP_BASE + DWT_MASK_OFF
DWT_FUNCTION0 = DWT_COMP_BASE + DWT_FUNCTION_OFF
DWT_COMP1 = DWT_COMP_BASE + DWT_GROUP_STRIDE  # 0xE0001030, doubles as ssp

FN_DISABLED = 0x0
FN_READ = 0x5
FN_WRITE = 0x6
FN_READWRITE = 0x7

MODE_V7_MASK = "v7-mask"
MODE_V8_RANGE = "v8-range"

MASK_BITS_MAX = 0x1F


@dataclass
class ComparatorGroup:
    comp: int = 0
    mask: int = 0
    function: int = FN_DISABLED


@dataclass
class DwtUnit:
    """Comparator state plus match logic and the MMIO register file."""

    base_address: int = DWT_COMP_BASE
    matching_mode: str = MODE_V7_MASK
    groups: list[ComparatorGroup] = field(
        default_factory=lambda: [ComparatorGroup() for _ in range(NUM_GROUPS)])
    # Legal [lo, hi] span for COMP1 writes once protection owns it; a write
    # outside the span halts the machine with a shadow stack overflow.
    ssp_guard: tuple[int, int] | None = None

    def match_access(self, addr: int, size: int, access: int) -> int | None:
        """Lowest matching enabled comparator id for this access, else None.

        An access matches when any byte it covers falls inside a
        comparator's region.  Matching uses current register state; a
        store that reprograms a comparator only affects later accesses.
        """
        if self.matching_mode == MODE_V8_RANGE:
            return self._match_v8(addr, size, access)
        for cid, g in enumerate(self.groups):
            fn = g.function
            if fn == FN_WRITE:
                if access != ACCESS_WRITE:
                    continue
            elif fn == FN_READ:
                if access != ACCESS_READ:
                    continue
            elif fn != FN_READWRITE:
                continue
            span = 1 << g.mask
            lo = g.comp & ~(span - 1) & 0xFFFFFFFF
            if addr < lo + span and addr + size > lo:
                return cid
        return None

    def _match_v8(self, addr: int, size: int, access: int) -> int | None:
        # Range mode pairs groups (0,1) and (2,3): the even comparator is
        # the inclusive lower bound, the odd one the exclusive upper bound.
        for cid in (0, 2):
            g = self.groups[cid]
            fn = g.function
            if fn == FN_WRITE:
                if access != ACCESS_WRITE:
                    continue
            elif fn == FN_READ:
                if access != ACCESS_READ:
                    continue
            elif fn != FN_READWRITE:
                continue
            lo = g.comp
            hi = self.groups[cid + 1].comp
            if addr < hi and addr + size > lo:
                return cid
        return None

    # -- register file ------------------------------------------------------

    def _decode(self, addr: int) -> tuple[int, int] | None:
        off = addr - self.base_address
        if 0 <= off < NUM_GROUPS * DWT_GROUP_STRIDE:
            return off // DWT_GROUP_STRIDE, off % DWT_GROUP_STRIDE
        return None

    def mmio_read(self, m, addr: int, size: int) -> int:
        if addr == DWT_CYCCNT:
            return m.cycles & 0xFFFFFFFF
        reg = self._decode(addr)
        if reg is None:
            return 0
        gid, off = reg
        g = self.groups[gid]
        if off == DWT_COMP_OFF:
            return g.comp
        if off == DWT_MASK_OFF:
            return g.mask
        if off == DWT_FUNCTION_OFF:
            return g.function
        return 0

    def mmio_write(self, m, addr: int, size: int, value: int) -> None:
        # CYCCNT and CTRL are read-only here; stray writes fall away.
        reg = self._decode(addr)
        if reg is None:
            return
        gid, off = reg
        g = self.groups[gid]
        if off == DWT_COMP_OFF:
            g.comp = value & 0xFFFFFFFF
            if gid == 1 and self.ssp_guard is not None:
                lo, hi = self.ssp_guard
                if not lo <= g.comp <= hi:
                    m.halt(HaltReason.STACK_OVERFLOW)
        elif off == DWT_MASK_OFF:
            g.mask = value & MASK_BITS_MAX
        elif off == DWT_FUNCTION_OFF:
            g.function = value & 0xFFFFFFFF
