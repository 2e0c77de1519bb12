"""Regenerate the CSV fixtures shipped in src/dvgp/data."""
from pathlib import Path

from dvgp import fixtures

OUT = Path(__file__).resolve().parents[1] / "src" / "dvgp" / "data"


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    for name, data in fixtures.generate_all().items():
        path = OUT / fixtures.BUNDLED[name]
        fixtures.to_csv(data, path)
        print(f"wrote {path} ({data.n} rows)")


if __name__ == "__main__":
    main()
