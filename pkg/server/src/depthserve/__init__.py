"""Reference blur-depth oracle server package."""

from .server import blur_depth, build_message, make_server, parse_message
