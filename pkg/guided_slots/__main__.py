"""Allow ``python -m guided_slots``."""

from guided_slots.cli import run

if __name__ == "__main__":
    run()
