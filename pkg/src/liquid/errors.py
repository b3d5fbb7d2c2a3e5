"""Exception types shared across the control plane."""


class LiquidError(Exception):
    """Base class for every error raised by this package."""


class IllegalTransition(LiquidError):
    def __init__(self, state, event):
        super().__init__(f"illegal transition: {event} in state {state}")
        self.state = state
        self.event = event


class MalformedConfig(LiquidError):
    pass


class StorageFailure(LiquidError):
    pass


class SpawnFailure(LiquidError):
    pass


class SnapshotRefused(LiquidError):
    pass


class CorruptSnapshot(LiquidError):
    pass


class CorruptBundle(LiquidError):
    pass


class PidUnavailable(LiquidError):
    pass


class TargetInUse(PidUnavailable):
    pass


class TargetUnreachable(PidUnavailable):
    pass


class BundleUnavailableTimeout(LiquidError):
    pass


class RestoreFailed(LiquidError):
    pass


class HookFailure(LiquidError):
    pass


class HookTimeout(HookFailure):
    pass


class HookCrashed(HookFailure):
    pass


class HookOutputInvalid(HookFailure):
    pass


class OperationInFlight(LiquidError):
    pass


class PreconditionFailed(LiquidError):
    pass


class PhaseMissed(LiquidError):
    pass


class InvalidInjection(LiquidError):
    pass
