"""Local fixture servers and synthetic traffic generators used by the test
suite and the desk-scale reproduction scenarios."""

from .certs import CertBundle, make_cert_bundle
from .dns_server import FixtureDnsServer, Zone
from .doh_server import DohServerConfig, FixtureDohServer
