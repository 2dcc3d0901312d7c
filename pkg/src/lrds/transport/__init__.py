"""Coordinator-worker wire protocol and its carriers."""
from .session import (
    DEFAULT_PORT,
    DEFAULT_TIMEOUT,
    InProcessChannel,
    Session,
    SocketChannel,
    WorkerNode,
    WorkerServer,
    default_port,
    parse_endpoint,
)
from .wire import (
    Ack,
    AugmentedRequest,
    AugmentedSummaryReply,
    EMReply,
    ErrorReply,
    Frame,
    MsgType,
    ParamBroadcast,
    PosteriorBroadcast,
    SRERequest,
    SREStatsReply,
    SummaryReply,
    TraceForm,
    decode,
    decode_frame,
    encode,
    read_frame,
    same_message,
)
