"""Exception types shared across the package."""


class InvlabError(Exception):
    """Base class for invlab errors."""


class ConfigError(InvlabError):
    """Invalid or inconsistent experiment configuration (CLI exit code 2)."""


class CheckpointError(InvlabError):
    """Unreadable checkpoint or model/usage mismatch (CLI exit code 3)."""


class ObjectiveError(CheckpointError):
    """A model trained for one objective was handed to the wrong sampler."""
