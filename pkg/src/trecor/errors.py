"""Exception hierarchy; CLI exit codes hang off these classes."""


class TrecorError(Exception):
    exit_code = 1

    def __init__(self, msg: str, stage: str | None = None, input_hash: str | None = None):
        self.stage = stage
        self.input_hash = input_hash
        prefix = []
        if stage:
            prefix.append(f"[{stage}]")
        if input_hash:
            prefix.append(f"[input {input_hash}]")
        super().__init__(" ".join(prefix + [msg]))


class ConfigError(TrecorError):
    exit_code = 2


class TreeError(ConfigError):
    pass


class NumericalError(TrecorError):
    """Cholesky failure after jitter retry, NaN/Inf in the chain, bad sampler domain."""

    exit_code = 3
