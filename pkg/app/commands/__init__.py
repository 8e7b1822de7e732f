# app/commands/__init__.py
# One module per CLI subcommand; each exposes register(subparsers).
