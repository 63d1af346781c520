from .main import cli, main, run_manifest

__all__ = ["cli", "main", "run_manifest"]
