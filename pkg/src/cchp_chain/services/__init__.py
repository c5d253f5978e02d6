"""Per-node servers: canonical bytes, signatures, the IoE contract and the ledger."""
