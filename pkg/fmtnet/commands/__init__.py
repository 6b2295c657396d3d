import os


def split_root(path: str, split: str) -> str:
    """Use <path>/<split> when the path is a generated dataset root, else the path itself."""
    candidate = os.path.join(path, split)
    return candidate if os.path.isdir(candidate) else path
