from .der import DerResult, der
from .permutation import (
    OrcResult,
    PermutationResult,
    cp_wer,
    orc_wer,
    tc_orc_wer,
    tc_wer_family,
    tcp_wer,
)
from .report import score_der_files, score_files, score_sessions
from .wer import wer

__all__ = [
    "DerResult",
    "OrcResult",
    "PermutationResult",
    "cp_wer",
    "der",
    "orc_wer",
    "score_der_files",
    "score_files",
    "score_sessions",
    "tc_orc_wer",
    "tc_wer_family",
    "tcp_wer",
    "wer",
]
