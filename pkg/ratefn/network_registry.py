"""
Registry of the shipped fixture networks (networks.json next to this module).

Each entry holds a display name, a one-line description and the network in
the same JSON form a spec file uses. Keys are short lowercase ids ("j2u");
lookups accept either the key or the display name in any case.
"""

import json
import re
from pathlib import Path
from typing import Dict, Optional

DEFAULT_REGISTRY = str(Path(__file__).with_name("networks.json"))
UNNAMED = "unknown_network"

_SEPARATORS = re.compile(r"[^a-z0-9]+")


def normalize_network_key(network_name: str) -> str:
    """
    Registry id of a network name: lowercase, runs of other characters become "_".

    "J2u" -> "j2u", "Tandem Queue, 2 nodes" -> "tandem_queue_2_nodes".
    """
    key = _SEPARATORS.sub("_", (network_name or "").strip().lower()).strip("_")
    return key or UNNAMED


def _read_registry(registry_path: str) -> Dict[str, dict]:
    text = Path(registry_path).read_text(encoding="utf-8")
    return json.loads(text)


def load_network_config(network_key: str, registry_path: str = DEFAULT_REGISTRY) -> dict:
    """
    Registry entry of one fixture network.

    Raises:
        FileNotFoundError: If the registry file is missing
        KeyError: If the key is not registered; the message lists the known networks
    """
    if not Path(registry_path).is_file():
        raise FileNotFoundError(f"Network registry not found: {registry_path}")
    registry = _read_registry(registry_path)
    try:
        return registry[network_key]
    except KeyError:
        raise KeyError(
            f"No network '{network_key}' in the registry. "
            f"Available networks: {sorted(registry)}"
        ) from None


def get_all_networks(registry_path: str = DEFAULT_REGISTRY) -> Dict[str, dict]:
    """All entries by key; empty when the registry file is missing."""
    if not Path(registry_path).is_file():
        return {}
    return _read_registry(registry_path)


def find_network_by_name(network_name: str, registry_path: str = DEFAULT_REGISTRY) -> Optional[str]:
    """Key of the network whose key or display name matches network_name, else None."""
    wanted = normalize_network_key(network_name)
    registry = get_all_networks(registry_path)
    if wanted in registry:
        return wanted
    return next(
        (key for key, entry in registry.items()
         if normalize_network_key(entry.get("display_name", "")) == wanted),
        None,
    )
