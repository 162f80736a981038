#!/usr/bin/env python3
"""Error hierarchy for unilm.

Every failure carries a stable ``code`` string (used in HTTP error bodies)
and an ``exit_code`` (used by the CLI). Errors are grouped into families
the same way failures were classified by type in the bridge's failure memory.
"""

from enum import Enum
from typing import Optional


class ErrorFamily(Enum):
    """Error families, one exit-code band each."""
    TOKENIZER = "tokenizer"
    SHAPE = "shape"
    CONTAINER = "container"
    CONFIG = "config"
    GENERATION = "generation"
    QUANT = "quant"
    ADAPTER = "adapter"
    ROUTING = "routing"
    REMOTE = "remote"
    SERVER = "server"
    CLI = "cli"


class UnilmError(Exception):
    """Base class for all unilm errors."""

    code = "internal_error"
    family = ErrorFamily.CLI
    exit_code = 1
    http_status = 500

    def __init__(self, detail: str = "", field: Optional[str] = None):
        self.detail = detail or self.__class__.__name__
        self.field = field
        super().__init__(self.detail)

    def to_dict(self) -> dict:
        return {"error": self.code, "detail": self.detail}


# tokenizer

class EmptyCorpus(UnilmError):
    code, family, exit_code, http_status = "empty_corpus", ErrorFamily.TOKENIZER, 10, 400


class TargetTooSmall(UnilmError):
    code, family, exit_code, http_status = "target_too_small", ErrorFamily.TOKENIZER, 11, 400


class IdOutOfRange(UnilmError):
    code, family, exit_code, http_status = "id_out_of_range", ErrorFamily.TOKENIZER, 12, 400


class AlphabetMismatch(UnilmError):
    code, family, exit_code, http_status = "alphabet_mismatch", ErrorFamily.TOKENIZER, 13, 400


class MalformedFile(UnilmError):
    """A tokenizer/adapter/corpus file failed validation; ``field`` names the culprit."""
    code, family, exit_code, http_status = "malformed_file", ErrorFamily.CONTAINER, 20, 400


# shapes

class ShapeMismatch(UnilmError):
    code, family, exit_code, http_status = "shape_mismatch", ErrorFamily.SHAPE, 30, 400


class OddHeadDim(UnilmError):
    code, family, exit_code, http_status = "odd_head_dim", ErrorFamily.SHAPE, 31, 400


class GroupingError(UnilmError):
    code, family, exit_code, http_status = "grouping_error", ErrorFamily.SHAPE, 32, 400


# containers

class MalformedContainer(UnilmError):
    code, family, exit_code, http_status = "malformed_container", ErrorFamily.CONTAINER, 21, 400


class ShapeViolation(UnilmError):
    code, family, exit_code, http_status = "shape_violation", ErrorFamily.CONTAINER, 22, 400


class UnsupportedVersion(UnilmError):
    code, family, exit_code, http_status = "unsupported_version", ErrorFamily.CONTAINER, 23, 400


# config

class InvalidConfig(UnilmError):
    code, family, exit_code, http_status = "invalid_config", ErrorFamily.CONFIG, 40, 400


class ConfigError(UnilmError):
    """Bad orchestrator/server settings file."""
    code, family, exit_code, http_status = "config_error", ErrorFamily.CONFIG, 41, 400


class ConfigMismatch(UnilmError):
    code, family, exit_code, http_status = "config_mismatch", ErrorFamily.CONFIG, 42, 400


# generation

class TokenOutOfRange(UnilmError):
    code, family, exit_code, http_status = "token_out_of_range", ErrorFamily.GENERATION, 50, 400


class ContextOverflow(UnilmError):
    code, family, exit_code, http_status = "context_overflow", ErrorFamily.GENERATION, 51, 422


class EmptyPrompt(UnilmError):
    code, family, exit_code, http_status = "empty_prompt", ErrorFamily.GENERATION, 52, 400


class SequenceTooShort(UnilmError):
    code, family, exit_code, http_status = "sequence_too_short", ErrorFamily.GENERATION, 53, 400


class ShrinkNotAllowed(UnilmError):
    code, family, exit_code, http_status = "shrink_not_allowed", ErrorFamily.GENERATION, 54, 400


# quant

class EmptyGroup(UnilmError):
    code, family, exit_code, http_status = "empty_group", ErrorFamily.QUANT, 60, 400


class PlanLengthMismatch(UnilmError):
    code, family, exit_code, http_status = "plan_length_mismatch", ErrorFamily.QUANT, 61, 400


class CorruptIndices(UnilmError):
    code, family, exit_code, http_status = "corrupt_indices", ErrorFamily.QUANT, 62, 400


class TargetOutOfRange(UnilmError):
    code, family, exit_code, http_status = "target_out_of_range", ErrorFamily.QUANT, 63, 400


# adapters

class InvalidTarget(UnilmError):
    code, family, exit_code, http_status = "invalid_target", ErrorFamily.ADAPTER, 70, 400


class RankZero(UnilmError):
    code, family, exit_code, http_status = "rank_zero", ErrorFamily.ADAPTER, 71, 400


class AlreadyAttached(UnilmError):
    code, family, exit_code, http_status = "already_attached", ErrorFamily.ADAPTER, 72, 409


class NotAttached(UnilmError):
    code, family, exit_code, http_status = "not_attached", ErrorFamily.ADAPTER, 73, 409


class UnknownAdapter(UnilmError):
    code, family, exit_code, http_status = "adapter_not_found", ErrorFamily.ADAPTER, 74, 404


class AdapterActive(UnilmError):
    code, family, exit_code, http_status = "adapter_active", ErrorFamily.ADAPTER, 75, 409


class PayloadTooLarge(UnilmError):
    code, family, exit_code, http_status = "payload_too_large", ErrorFamily.ADAPTER, 76, 413


# routing / remote

class NoViableRoute(UnilmError):
    code, family, exit_code, http_status = "no_viable_route", ErrorFamily.ROUTING, 80, 503


class PrivacyConflict(UnilmError):
    code, family, exit_code, http_status = "privacy_conflict", ErrorFamily.ROUTING, 81, 422


class RemoteProtocolError(UnilmError):
    """The server answered, but not with a valid generation payload."""
    code, family, exit_code, http_status = "remote_protocol_error", ErrorFamily.REMOTE, 82, 502


class RemoteTransportError(UnilmError):
    """Connection refused, reset or timed out."""
    code, family, exit_code, http_status = "remote_transport_error", ErrorFamily.REMOTE, 83, 502


class LocalEngineError(UnilmError):
    code, family, exit_code, http_status = "local_engine_error", ErrorFamily.ROUTING, 84, 500


# server

class BadRequest(UnilmError):
    code, family, exit_code, http_status = "bad_request", ErrorFamily.SERVER, 90, 400


class Overloaded(UnilmError):
    code, family, exit_code, http_status = "overloaded", ErrorFamily.SERVER, 91, 503


# cli

class UnknownSubcommand(UnilmError):
    code, family, exit_code, http_status = "unknown_subcommand", ErrorFamily.CLI, 2, 400


class MissingFlag(UnilmError):
    code, family, exit_code, http_status = "missing_flag", ErrorFamily.CLI, 2, 400
