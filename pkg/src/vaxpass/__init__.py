"""Privacy-preserving biometric vaccination passports on a permissioned ledger.

Modules:
    biometric: iris templates, masking, feature vectors, synthetic data.
    lsh: sign-of-ternary-projection hashing and its security probes.
    ledger: signed, round-robin, hash-chained block store.
    passport: setup, enrolment, authentication and records.
    harness: FAR/FRR sweeps, security suite, scenario runner.
"""

__version__ = "0.1.0"
