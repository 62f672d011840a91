"""Exception types raised across the package."""


class RecShardError(Exception):
    """Base class for all package errors."""


class IndexOutOfRange(RecShardError, IndexError):
    def __init__(self, table_id, index, num_rows=None):
        self.table_id = table_id
        self.index = index
        self.num_rows = num_rows
        bound = f" (rows={num_rows})" if num_rows is not None else ""
        super().__init__(f"table {table_id}: index {index} out of range{bound}")


class DimensionMismatch(RecShardError, ValueError):
    pass


class BudgetTooSmall(RecShardError, ValueError):
    pass


class ParseError(RecShardError, ValueError):
    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


class ValidationError(RecShardError, ValueError):
    pass


class EmptySample(RecShardError, ValueError):
    pass


class InfeasibleCapacity(RecShardError, ValueError):
    pass


class PartitionRequired(InfeasibleCapacity):
    """A table exceeds the per-shard budget of a strategy that never splits tables."""


class ProfileMismatch(RecShardError, ValueError):
    pass


class ShardUnavailable(RecShardError, ConnectionError):
    def __init__(self, shard_id, detail=""):
        self.shard_id = shard_id
        msg = f"shard {shard_id} unavailable"
        super().__init__(f"{msg}: {detail}" if detail else msg)


class RpcTimeout(RecShardError, TimeoutError):
    def __init__(self, shard_id=None, deadline=None):
        self.shard_id = shard_id
        self.deadline = deadline
        super().__init__(f"rpc to shard {shard_id} exceeded deadline {deadline}s")


class RemoteExecutionError(RecShardError, RuntimeError):
    def __init__(self, message, code=None, shard_id=None):
        self.code = code
        self.shard_id = shard_id
        super().__init__(message)


class UnknownPartition(RecShardError, KeyError):
    def __init__(self, table_id, partition_index, shard_id=None):
        self.table_id = table_id
        self.partition_index = partition_index
        self.shard_id = shard_id
        super().__init__(
            f"partition {partition_index} of table {table_id} is not hosted on shard {shard_id}"
        )

    def __str__(self):
        return self.args[0]


class FrameTooLarge(RecShardError, ValueError):
    pass


class MalformedFrame(RecShardError, ValueError):
    pass


class VersionMismatch(RecShardError, ValueError):
    pass


class CorruptRecord(RecShardError, ValueError):
    pass


class EmptyInput(RecShardError, ValueError):
    pass


class MalformedTrace(RecShardError, ValueError):
    pass


class WorkloadMismatch(RecShardError, ValueError):
    pass
