"""Append-only run manifest: stage completions, signatures, artifact paths."""

import hashlib
import json
import os
import time

from .errors import ConfigError


class RunManifest:
    """JSONL event log per run directory; latest event per stage wins."""

    FILENAME = "manifest.jsonl"

    def __init__(self, run_dir: str, config_hash: str):
        self.run_dir = run_dir
        self.config_hash = config_hash
        self.path = os.path.join(run_dir, self.FILENAME)

    def append(self, stage: str, signature: str, outputs: dict | None = None, **extra) -> None:
        os.makedirs(self.run_dir, exist_ok=True)
        event = {
            "stage": stage,
            "signature": signature,
            "config_hash": self.config_hash,
            "outputs": outputs or {},
            "timestamp": time.time(),
        }
        event.update(extra)
        with open(self.path, "a") as fh:
            fh.write(json.dumps(event, sort_keys=True) + "\n")

    def events(self) -> list[dict]:
        if not os.path.exists(self.path):
            return []
        out = []
        with open(self.path) as fh:
            for line in fh:
                line = line.strip()
                if line:
                    out.append(json.loads(line))
        return out

    def latest(self, stage: str) -> dict | None:
        found = None
        for event in self.events():
            if event.get("stage") == stage:
                if event.get("config_hash") != self.config_hash:
                    raise ConfigError(
                        f"run directory {self.run_dir} was produced with a different config "
                        f"(stage {stage}: {event.get('config_hash')} != {self.config_hash})"
                    )
                found = event
        return found

    def is_done(self, stage: str, signature: str) -> bool:
        """True when the stage already ran with this signature and outputs exist."""
        event = self.latest(stage)
        if event is None or event.get("signature") != signature:
            return False
        for path in event.get("outputs", {}).values():
            full = path if os.path.isabs(path) else os.path.join(self.run_dir, path)
            if not os.path.exists(full):
                return False
        return True


def content_hash(*paths: str) -> str:
    """SHA-256 over file contents, order-sensitive."""
    h = hashlib.sha256()
    for path in paths:
        h.update(os.path.basename(path).encode())
        with open(path, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
    return h.hexdigest()


def signature_of(config_hash: str, stage: str, *input_hashes: str) -> str:
    h = hashlib.sha256()
    h.update(config_hash.encode())
    h.update(stage.encode())
    for ih in input_hashes:
        h.update(ih.encode())
    return h.hexdigest()
