"""Hardware exception entry and return: stacking, unstacking, EXC_RETURN.

On entry the core pushes an eight-word frame onto the current stack and
branches to the handler with the magic EXC_RETURN value in lr.  A later
branch to that value unwinds the frame.  Nesting is not modeled: pending
exceptions wait until the core is back in thread mode.

Stacking stores go through the machine's hooked store path, so a frame
that lands inside a watchpoint-protected region traps like any write.
"""

from __future__ import annotations

# Exception numbers (subset of the v7-M system exception map).
USAGE_FAULT = 6
SVCALL = 11
DEBUG_MONITOR = 12
SYSTICK = 15

EXC_NAMES = {
    USAGE_FAULT: "UsageFault",
    SVCALL: "SVCall",
    DEBUG_MONITOR: "DebugMonitor",
    SYSTICK: "SysTick",
}
EXC_BY_NAME = {name.lower(): num for num, name in EXC_NAMES.items()}

# Return to thread mode, main stack.  The only valid sentinel here.
EXC_RETURN_THREAD = 0xFFFFFFF9

# Stacked frame layout, offsets from the post-stacking stack pointer.
ESF_WORDS = 8
ESF_BYTES = 32
ESF_OFF_R0 = 0
ESF_OFF_R1 = 4
ESF_OFF_R2 = 8
ESF_OFF_R3 = 12
ESF_OFF_R12 = 16
ESF_OFF_LR = 20
ESF_OFF_RETURN = 24
ESF_OFF_XPSR = 28

ENTRY_CYCLES = 12
RETURN_CYCLES = 12


def enter_exception(m, exc_id: int, return_address: int, charge_cycles: bool = True):
    """Stack the frame and branch to the vectored handler.

    Caller guarantees thread mode (no nesting).  Returns the entry event,
    or a fault halt event if no handler is registered.
    """
    from .machine import EV_EXC_ENTERED, EV_HALTED, MODE_HANDLER, Event

    handler = m.vector.get(exc_id)
    if handler is None:
        m.fault()
        return Event(EV_HALTED, m.pc, reason=m.halt_reason)

    sp = (m.sp - ESF_BYTES) & 0xFFFFFFFF
    m.sp = sp
    frame = (m.gpr[0], m.gpr[1], m.gpr[2], m.gpr[3], m.gpr[12],
             m.lr, return_address, m.xpsr)
    for i, word in enumerate(frame):
        m.store(sp + 4 * i, 4, word)
    m.lr = EXC_RETURN_THREAD
    m.mode = MODE_HANDLER
    m.active_exc = exc_id
    m.xpsr = (m.xpsr & ~0x1FF) | exc_id
    m.pc = handler
    if charge_cycles:
        m.cycles += ENTRY_CYCLES
    return Event(EV_EXC_ENTERED, handler, exc_id=exc_id)


def return_from_exception(m, value: int):
    """Unwind a stacked frame after a branch to an EXC_RETURN value."""
    from .machine import (EV_EXC_RETURNED, EV_HALTED, MODE_HANDLER,
                          MODE_THREAD, Event)

    if value != EXC_RETURN_THREAD or m.mode != MODE_HANDLER:
        m.fault()
        return Event(EV_HALTED, m.pc, reason=m.halt_reason)

    left = m.active_exc
    sp = m.sp
    m.gpr[0] = m.load(sp + ESF_OFF_R0, 4)
    m.gpr[1] = m.load(sp + ESF_OFF_R1, 4)
    m.gpr[2] = m.load(sp + ESF_OFF_R2, 4)
    m.gpr[3] = m.load(sp + ESF_OFF_R3, 4)
    m.gpr[12] = m.load(sp + ESF_OFF_R12, 4)
    m.lr = m.load(sp + ESF_OFF_LR, 4)
    ret = m.load(sp + ESF_OFF_RETURN, 4)
    m.xpsr = m.load(sp + ESF_OFF_XPSR, 4)
    m.sp = sp + ESF_BYTES
    m.mode = MODE_THREAD
    m.active_exc = None
    m.pc = ret
    m.cycles += RETURN_CYCLES
    return Event(EV_EXC_RETURNED, ret, exc_id=left)
