#!/usr/bin/env python3
"""Simple import checker for the telemetry simulator environment.
Run this inside your project's virtual environment to verify required packages.
"""

modules = [
    "numpy",
    "pandas",
    "yaml",
    "dotenv",
    "simpy",
    "pytest",
]


def check(names=modules):
    """Return {module: version or None}; missing modules map to the import error text."""
    found = {}
    for m in names:
        try:
            mod = __import__(m)
            found[m] = getattr(mod, "__version__", None)
        except Exception as e:
            found[m] = f"ERROR -> {e}"
    return found


if __name__ == "__main__":
    for m, ver in check().items():
        if ver is None:
            print(f"{m}: OK (version not available)")
        elif str(ver).startswith("ERROR"):
            print(f"{m}: {ver}")
        else:
            print(f"{m}: OK (version={ver})")
