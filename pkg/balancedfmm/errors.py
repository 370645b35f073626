class FmmError(Exception):
    """Base class for every error raised by balancedfmm."""


class GeometryError(FmmError, ValueError):
    pass


class PartitionError(FmmError, ValueError):
    pass


class CoincidentPointsError(FmmError, ValueError):
    """Two distinct ids sit at the same position."""

    def __init__(self, target_id: int, source_id: int):
        self.target_id = int(target_id)
        self.source_id = int(source_id)
        super().__init__(
            f"coincident points: target id {self.target_id} and source id {self.source_id} are at distance 0"
        )


class DatasetError(FmmError, ValueError):
    pass


class ConfigMismatchError(FmmError):
    pass


class TransportError(FmmError):
    pass


class ProtocolError(TransportError):
    pass


class DeadlockError(TransportError):
    pass
