import os
from pathlib import Path

from dotenv import load_dotenv

load_dotenv()

DATA_DIR = Path(os.environ.get("MFA_DATA_DIR", "data"))
STORE_DIR = DATA_DIR / "store"
RUNS_DIR = DATA_DIR / "runs"
SCENARIO_DIR = Path("scenarios")
REPORT_DIR = Path("report")

LOG_LEVEL = os.environ.get("MFA_LOG_LEVEL", "WARNING")

# Biometrics
EMBEDDING_DIM = 128
MATCH_THRESHOLD = float(os.environ.get("MFA_MATCH_THRESHOLD", 1.0))
NOISE_SIGMA = float(os.environ.get("MFA_NOISE_SIGMA", 0.02))

# Virtual time, milliseconds
SESSION_DEADLINE_MS = int(os.environ.get("MFA_SESSION_DEADLINE_MS", 60_000))
HTTPS_LATENCY_MS = int(os.environ.get("MFA_HTTPS_LATENCY_MS", 20))
NFC_LATENCY_MS = int(os.environ.get("MFA_NFC_LATENCY_MS", 100))
BLE_SCAN_MS = int(os.environ.get("MFA_BLE_SCAN_MS", 800))
BIOMETRIC_MATCH_MS = int(os.environ.get("MFA_BIOMETRIC_MATCH_MS", 50))

PWD_HASH_ITERATIONS = int(os.environ.get("MFA_PWD_HASH_ITERATIONS", 10_000))

# Protocol constants
PROTOCOL_VERSION = 1
FIXED_TOKEN = b"REG-CONFIRM-V1"
MATCH_TAG = b"MATCH"
OK_CHALLENGE = b"OK"
AID_KEY_SALT = b"mfa/aid-key/v1\x00\x00"
BT_KEY_SALT = b"mfa/bt-key/v1\x00\x00\x00"
