"""Configuration and environment variables."""
import os

from dotenv import load_dotenv

load_dotenv(".env.local")

# Physical constants
NATURAL_GAS_CALORIFIC_VALUE = 3.6e7  # J/m³ at standard atmosphere
MICRO_COINS_PER_COIN = 1_000_000

# Game Configuration
DEFAULT_ITERATIONS = int(os.getenv("CCHP_ITERATIONS", "100"))
DEFAULT_K2 = float(os.getenv("CCHP_DEFAULT_K2", "0.0"))

# IoE Configuration
APG_INITIAL_BALANCE = int(os.getenv("CCHP_APG_INITIAL_BALANCE", "1000000000"))  # micro-coins
SIGNATURE_SCHEME = os.getenv("CCHP_SIGNATURE_SCHEME", "ed25519")
RESPONSE_TIMEOUT_TICKS = int(os.getenv("CCHP_RESPONSE_TIMEOUT_TICKS", "6"))

# Blockchain Configuration
DIFFICULTY_BITS = int(os.getenv("CCHP_DIFFICULTY_BITS", "16"))
MINING_REWARD = int(os.getenv("CCHP_MINING_REWARD_COINS", "50")) * MICRO_COINS_PER_COIN
QUORUM = os.getenv("CCHP_QUORUM", "all")
MAX_MINING_ATTEMPTS = int(os.getenv("CCHP_MAX_MINING_ATTEMPTS", str(1 << 22)))
MINING_RETRIES = 8

# Logging
LOG_LEVEL = os.getenv("CCHP_LOG_LEVEL", "INFO")
