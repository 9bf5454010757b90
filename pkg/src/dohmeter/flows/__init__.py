from .assemble import (
    DEFAULT_IDLE_TIMEOUT,
    EmptyGroup,
    Flow,
    FlowSetSummary,
    assemble_flows,
    by_group,
    by_server_ip,
    flow_key,
    flow_stats,
    read_flows,
    write_flows,
)
from .labels import LabelMap
from .packets import TCP, UDP, PacketRecord
from .pcap import (
    CaptureError,
    CaptureReader,
    CorruptCapture,
    UnsupportedLinkType,
    build_frame,
    read_capture,
    write_pcap,
)
from .tap import TapProxy
