import re
from pathlib import Path

import cchp_chain.config as config

ROOT = Path(__file__).resolve().parent.parent


def test_env_example_documents_every_variable():
    read = set(re.findall(r'os\.getenv\("(CCHP_[A-Z0-9_]+)"', Path(config.__file__).read_text(encoding="utf-8")))
    documented = {
        line.split("=", 1)[0]
        for line in (ROOT / ".env.example").read_text(encoding="utf-8").splitlines()
        if line and not line.startswith("#")
    }
    assert "CCHP_DEFAULT_K2" in read
    assert read <= documented
