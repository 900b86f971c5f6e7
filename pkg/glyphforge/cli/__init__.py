from .glyphforge import CommandResult, build_parser, main, run  # noqa: F401
