"""Label files map server endpoints to group names.

CSV with header ``ip,port,label``; an empty port matches any port.
"""

from __future__ import annotations

import csv
import ipaddress
from pathlib import Path
from typing import Optional

from .assemble import Flow


class LabelMap:
    def __init__(self, entries: dict[tuple[str, Optional[int]], str]):
        self.entries = entries

    @classmethod
    def load(cls, path: str | Path) -> "LabelMap":
        entries = {}
        with open(path, newline="", encoding="utf-8") as f:
            reader = csv.DictReader(f)
            missing = {"ip", "label"} - set(reader.fieldnames or ())
            if missing:
                raise ValueError(f"{path}: label file lacks columns {sorted(missing)}")
            for row in reader:
                ip = str(ipaddress.ip_address(row["ip"].strip()))
                port_text = (row.get("port") or "").strip()
                entries[(ip, int(port_text) if port_text else None)] = row["label"].strip()
        return cls(entries)

    def __call__(self, flow: Flow) -> Optional[str]:
        ip, port = flow.server
        ip = str(ipaddress.ip_address(ip))
        return self.entries.get((ip, port), self.entries.get((ip, None)))

    def apply(self, flows):
        return [flow.with_group(self(flow)) for flow in flows]
