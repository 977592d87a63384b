"""Exceptions shared across modules."""


class BackendUnavailable(RuntimeError):
    """A model, embedding or tool backend could not be reached."""


class ContextOverflow(RuntimeError):
    def __init__(self, tokens_needed: int, limit: int):
        super().__init__(f"prompt needs {tokens_needed} tokens, window is {limit}")
        self.tokens_needed = tokens_needed
        self.limit = limit
