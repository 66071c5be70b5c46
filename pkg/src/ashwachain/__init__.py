"""Two-layer permissionless/permissioned consensus: PoW identities feeding a BFT committee."""

__version__ = "0.1.0"
