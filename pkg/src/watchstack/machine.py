"""Deterministic single-core machine with hooked data accesses.

The machine executes pre-decoded instructions from an address-indexed
code map.  All data loads and stores funnel through one pair of access
paths so a debug unit can observe every access before it commits; a
store hook may suppress the write entirely (watchpoint semantics).
Memory-mapped device windows live above 0xE0000000.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from . import exception_model as excm
from .isa import LR, MASK32, NUM_GPRS, PC, SP, Instr

PAGE_BITS = 12
PAGE_SIZE = 1 << PAGE_BITS
PAGE_MASK = PAGE_SIZE - 1

ACCESS_READ = 0
ACCESS_WRITE = 1

MODE_THREAD = "thread"
MODE_HANDLER = "handler"

# xPSR layout: condition flags in the top nibble, exception number low.
XPSR_N = 1 << 31
XPSR_Z = 1 << 30
XPSR_C = 1 << 29
XPSR_V = 1 << 28
XPSR_IPSR_MASK = 0x1FF


class HaltReason(Enum):
    NORMAL = "normal"            # bkpt #0
    REPORT = "report"            # bkpt with nonzero immediate
    RESET = "reset"              # protection policy fired
    FAULT = "fault"              # unrecoverable architectural error
    STACK_OVERFLOW = "stack_overflow"  # shadow stack pointer left its window


# Event kinds produced by step().
EV_STEPPED = "stepped"
EV_WATCHPOINT = "watchpoint_hit"
EV_EXC_ENTERED = "exception_entered"
EV_EXC_RETURNED = "exception_returned"
EV_HALTED = "halted"


@dataclass
class Event:
    kind: str
    at_pc: int
    exc_id: int | None = None
    comparator_id: int | None = None
    address: int | None = None
    access: int | None = None
    reason: HaltReason | None = None


@dataclass
class Hit:
    """Returned by a store hook to report a suppressed (trapped) write."""

    comparator_id: int
    address: int
    access: int


class Memory:
    """Sparse byte-addressable RAM/flash backed by 4 KiB pages."""

    def __init__(self) -> None:
        self.pages: dict[int, bytearray] = {}

    def _page(self, addr: int) -> bytearray:
        base = addr >> PAGE_BITS
        page = self.pages.get(base)
        if page is None:
            page = bytearray(PAGE_SIZE)
            self.pages[base] = page
        return page

    def read_byte(self, addr: int) -> int:
        page = self.pages.get(addr >> PAGE_BITS)
        return page[addr & PAGE_MASK] if page is not None else 0

    def write_byte(self, addr: int, value: int) -> None:
        self._page(addr)[addr & PAGE_MASK] = value & 0xFF

    def read_word(self, addr: int) -> int:
        page = self.pages.get(addr >> PAGE_BITS)
        off = addr & PAGE_MASK
        if page is not None and off <= PAGE_SIZE - 4:
            return int.from_bytes(page[off:off + 4], "little")
        return (self.read_byte(addr) | self.read_byte(addr + 1) << 8
                | self.read_byte(addr + 2) << 16 | self.read_byte(addr + 3) << 24)

    def write_word(self, addr: int, value: int) -> None:
        page = self._page(addr)
        off = addr & PAGE_MASK
        if off <= PAGE_SIZE - 4:
            page[off:off + 4] = (value & MASK32).to_bytes(4, "little")
        else:
            for i in range(4):
                self.write_byte(addr + i, (value >> (8 * i)) & 0xFF)

    def load_bytes(self, addr: int, data: bytes) -> None:
        for i, b in enumerate(data):
            self.write_byte(addr + i, b)

    def read_region(self, lo: int, size: int) -> bytes:
        return bytes(self.read_byte(lo + i) for i in range(size))

    def snapshot(self) -> dict[int, bytes]:
        return {base: bytes(page) for base, page in self.pages.items()}

    def diff(self, other: "Memory") -> list[int]:
        """Byte addresses whose contents differ between the two memories."""
        out = []
        zero = bytes(PAGE_SIZE)
        for base in sorted(set(self.pages) | set(other.pages)):
            a = bytes(self.pages.get(base, zero))
            b = bytes(other.pages.get(base, zero))
            if a == b:
                continue
            off = base << PAGE_BITS
            out.extend(off + i for i in range(PAGE_SIZE) if a[i] != b[i])
        return out


class Machine:
    """Architectural state plus the fetch/execute loop."""

    def __init__(self) -> None:
        self.gpr = [0] * NUM_GPRS
        self.sp = 0
        self.lr = 0
        self.pc = 0
        self.xpsr = 0
        self.control = 0
        self.mode = MODE_THREAD
        self.mem = Memory()
        self.code: dict[int, Instr] = {}
        self.mmio: list[tuple[int, int, object]] = []
        self.vector: dict[int, int] = {}
        self.pending: list[int] = []
        self.active_exc: int | None = None
        self.cycles = 0
        self.steps = 0
        self.halted = False
        self.halt_reason: HaltReason | None = None
        self.access_hook = None
        self.last_hit: Hit | None = None
        self.cur_pc = 0  # pc of the instruction currently executing
        # Debug hardware, attached by protect.attach_debug_system.
        self.dwt = None
        self.demcr = None
        self.guard = None
        # Optional bookkeeping, enabled by the runner.
        self.tagged_cycles: dict[str, int] = {}
        self.phase_cycles: dict[str, dict[str, int]] = {}
        self.conv_extra = 0
        self.visited: set[int] | None = None
        self.min_sp: int | None = None

    # -- register helpers -------------------------------------------------

    def read_reg(self, r: int) -> int:
        if r < NUM_GPRS:
            return self.gpr[r]
        if r == SP:
            return self.sp
        if r == LR:
            return self.lr
        return self.pc

    def write_reg(self, r: int, value: int) -> None:
        value &= MASK32
        if r < NUM_GPRS:
            self.gpr[r] = value
        elif r == SP:
            self.sp = value
        elif r == LR:
            self.lr = value
        else:
            self.pc = value

    # -- hooked data access ----------------------------------------------

    def add_mmio(self, lo: int, hi: int, device) -> None:
        self.mmio.append((lo, hi, device))

    def load(self, addr: int, size: int) -> int:
        hook = self.access_hook
        if hook is not None:
            hook.on_load(self, addr, size)
        if addr >= 0xE0000000:
            for lo, hi, dev in self.mmio:
                if lo <= addr < hi:
                    return dev.mmio_read(self, addr, size)
        if size == 4:
            return self.mem.read_word(addr)
        return self.mem.read_byte(addr)

    def store(self, addr: int, size: int, value: int) -> None:
        hook = self.access_hook
        if hook is not None:
            hit = hook.on_store(self, addr, size, value)
            if hit is not None:
                self.last_hit = hit
                return
        if addr >= 0xE0000000:
            for lo, hi, dev in self.mmio:
                if lo <= addr < hi:
                    dev.mmio_write(self, addr, size, value)
                    return
        if size == 4:
            self.mem.write_word(addr, value)
        else:
            self.mem.write_byte(addr, value)

    # -- faults and flags ---------------------------------------------------

    def fault(self) -> None:
        self.halted = True
        self.halt_reason = HaltReason.FAULT

    def halt(self, reason: HaltReason) -> None:
        self.halted = True
        self.halt_reason = reason

    def set_cmp_flags(self, a: int, b: int) -> None:
        r = (a - b) & MASK32
        n = XPSR_N if r & 0x80000000 else 0
        z = XPSR_Z if r == 0 else 0
        c = XPSR_C if a >= b else 0
        sa, sb, sr = a >> 31, b >> 31, r >> 31
        v = XPSR_V if (sa != sb and sa != sr) else 0
        self.xpsr = (self.xpsr & 0x0FFFFFFF) | n | z | c | v

    def cond_true(self, cond: str) -> bool:
        x = self.xpsr
        if cond == "eq":
            return bool(x & XPSR_Z)
        if cond == "ne":
            return not x & XPSR_Z
        n = bool(x & XPSR_N)
        v = bool(x & XPSR_V)
        if cond == "lt":
            return n != v
        return n == v  # ge

    # -- execution ---------------------------------------------------------

    def raise_exception(self, exc_id: int) -> None:
        """Queue an exception; it is taken at the next thread-mode step."""
        self.pending.append(exc_id)

    def step(self) -> Event:
        if self.halted:
            return Event(EV_HALTED, self.pc, reason=self.halt_reason)
        if self.pending and self.mode == MODE_THREAD:
            exc_id = self.pending.pop(0)
            self.steps += 1
            return excm.enter_exception(self, exc_id, self.pc)

        ins = self.code.get(self.pc)
        if ins is None:
            # No instruction at pc: undefined fetch.
            self.steps += 1
            return self._undefined_fetch()

        cost = ins.cycles
        self.cycles += cost
        tag = ins.tag
        if tag is not None:
            phase, cat = tag
            self.tagged_cycles[cat] = self.tagged_cycles.get(cat, 0) + cost
            per = self.phase_cycles.setdefault(phase, {})
            per[cat] = per.get(cat, 0) + cost
        if ins.conv_extra:
            self.conv_extra += ins.conv_extra

        self.last_hit = None
        at = self.pc
        self.cur_pc = at
        self.pc = at + ins.width
        _EXEC[ins.op](self, ins)
        self.steps += 1

        if self.visited is not None:
            self.visited.add(at)
        if self.min_sp is not None and self.sp < self.min_sp:
            self.min_sp = self.sp

        if self.pc >= 0xF0000000 and not self.halted:
            return excm.return_from_exception(self, self.pc)
        if self.last_hit is not None:
            h = self.last_hit
            return Event(EV_WATCHPOINT, at, comparator_id=h.comparator_id,
                         address=h.address, access=h.access)
        if self.halted:
            return Event(EV_HALTED, at, reason=self.halt_reason)
        return Event(EV_STEPPED, at)

    def _undefined_fetch(self) -> Event:
        handler = self.vector.get(excm.USAGE_FAULT)
        if handler is not None and self.mode == MODE_THREAD:
            return excm.enter_exception(self, excm.USAGE_FAULT, self.pc + 2)
        self.fault()
        return Event(EV_HALTED, self.pc, reason=self.halt_reason)

    # -- executors -----------------------------------------------------------

    def _x_movw(self, ins):
        self.write_reg(ins.rd, ins.imm)

    def _x_movt(self, ins):
        low = self.read_reg(ins.rd) & 0xFFFF
        self.write_reg(ins.rd, low | (ins.imm << 16))

    def _x_mov_imm(self, ins):
        self.write_reg(ins.rd, ins.imm)

    def _x_mov_reg(self, ins):
        self.write_reg(ins.rd, self.read_reg(ins.rm))

    def _x_ldr(self, ins):
        addr = (self.read_reg(ins.rn) + ins.imm) & MASK32
        if addr & 3:
            self.fault()
            return
        self.write_reg(ins.rd, self.load(addr, 4))

    def _x_str(self, ins):
        addr = (self.read_reg(ins.rn) + ins.imm) & MASK32
        if addr & 3:
            self.fault()
            return
        self.store(addr, 4, self.read_reg(ins.rd))

    def _x_ldrb(self, ins):
        addr = (self.read_reg(ins.rn) + ins.imm) & MASK32
        self.write_reg(ins.rd, self.load(addr, 1))

    def _x_strb(self, ins):
        addr = (self.read_reg(ins.rn) + ins.imm) & MASK32
        self.store(addr, 1, self.read_reg(ins.rd) & 0xFF)

    def _x_push(self, ins):
        # Lowest-numbered register ends at the lowest address.
        sp = self.sp - 4 * len(ins.reglist)
        self.sp = sp
        for i, r in enumerate(ins.reglist):
            self.store(sp + 4 * i, 4, self.read_reg(r))

    def _x_pop(self, ins):
        sp = self.sp
        self.sp = sp + 4 * len(ins.reglist)
        for i, r in enumerate(ins.reglist):
            self.write_reg(r, self.load(sp + 4 * i, 4))

    def _x_add_sp(self, ins):
        self.sp = (self.sp + ins.imm) & MASK32

    def _x_sub_sp(self, ins):
        self.sp = (self.sp - ins.imm) & MASK32

    def _x_addw(self, ins):
        self.write_reg(ins.rd, (self.read_reg(ins.rn) + ins.imm) & MASK32)

    def _x_subw(self, ins):
        self.write_reg(ins.rd, (self.read_reg(ins.rn) - ins.imm) & MASK32)

    def _x_cmp_imm(self, ins):
        self.set_cmp_flags(self.read_reg(ins.rn), ins.imm)

    def _x_cmp_reg(self, ins):
        self.set_cmp_flags(self.read_reg(ins.rn), self.read_reg(ins.rm))

    def _x_b(self, ins):
        self.pc = ins.target

    def _x_bcond(self, ins):
        if self.cond_true(ins.cond):
            self.cycles += 1  # taken penalty on top of the base cost
            tag = ins.tag
            if tag is not None:
                phase, cat = tag
                self.tagged_cycles[cat] = self.tagged_cycles.get(cat, 0) + 1
                self.phase_cycles[phase][cat] += 1
            self.pc = ins.target

    def _x_bl(self, ins):
        self.lr = self.pc  # already the address after the bl
        self.pc = ins.target

    def _x_bx(self, ins):
        self.pc = self.read_reg(ins.rm)

    def _x_blx(self, ins):
        target = self.read_reg(ins.rm)
        self.lr = self.pc
        self.pc = target

    def _x_msr(self, ins):
        # CONTROL writes are privileged; unprivileged thread writes drop.
        if self.mode == MODE_HANDLER or not self.control & 1:
            self.control = self.read_reg(ins.rn) & 1

    def _x_mrs(self, ins):
        self.write_reg(ins.rd, self.control)

    def _x_nop(self, ins):
        pass

    def _x_svc(self, ins):
        handler = self.vector.get(excm.SVCALL)
        if handler is None or self.mode == MODE_HANDLER:
            self.fault()
            return
        # svc's table cost already covers stacking; do not double-charge.
        excm.enter_exception(self, excm.SVCALL, self.pc, charge_cycles=False)

    def _x_bkpt(self, ins):
        self.halt(HaltReason.NORMAL if ins.imm == 0 else HaltReason.REPORT)

    def _x_udf(self, ins):
        handler = self.vector.get(excm.USAGE_FAULT)
        if handler is None or self.mode == MODE_HANDLER:
            self.fault()
            return
        excm.enter_exception(self, excm.USAGE_FAULT, self.pc)


_EXEC = {
    "movw": Machine._x_movw,
    "movt": Machine._x_movt,
    "mov_imm": Machine._x_mov_imm,
    "mov_reg": Machine._x_mov_reg,
    "ldr": Machine._x_ldr,
    "str": Machine._x_str,
    "ldrb": Machine._x_ldrb,
    "strb": Machine._x_strb,
    "push": Machine._x_push,
    "pop": Machine._x_pop,
    "add_sp": Machine._x_add_sp,
    "sub_sp": Machine._x_sub_sp,
    "addw": Machine._x_addw,
    "subw": Machine._x_subw,
    "cmp_imm": Machine._x_cmp_imm,
    "cmp_reg": Machine._x_cmp_reg,
    "b": Machine._x_b,
    "bcond": Machine._x_bcond,
    "bl": Machine._x_bl,
    "bx": Machine._x_bx,
    "blx": Machine._x_blx,
    "msr": Machine._x_msr,
    "mrs": Machine._x_mrs,
    "nop": Machine._x_nop,
    "svc": Machine._x_svc,
    "bkpt": Machine._x_bkpt,
    "udf": Machine._x_udf,
}
