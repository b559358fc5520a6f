"""One-sided (CAS-based) Paxos over a deterministic simulated remote-memory fabric."""

from .core import (Abort, AcceptorState, Decide, FieldOverflow, MalformedState, ProposalOverflow,
                   next_proposal, pack, unpack)

__all__ = [
    "Abort", "AcceptorState", "Decide", "FieldOverflow", "MalformedState", "ProposalOverflow",
    "next_proposal", "pack", "unpack",
]
__version__ = "0.1.0"
