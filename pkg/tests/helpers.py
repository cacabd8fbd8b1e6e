import hashlib
import json
from pathlib import Path
from typing import Any, Dict, Union
import shutil


class TestHelpers:
    """Helper functions for test setup and teardown."""

    @staticmethod
    def get_test_dirs(folder=None):
        """Get the test directory paths."""
        test_root = Path(__file__).parent
        folders = {
            # static inputs
            'data_config': test_root / 'test_data' / 'config',
            # scratch space, cleaned before and after each test that uses it
            'workspace': test_root / 'workspace',
        }

        if folder:
            return folders[folder]
        else:
            return folders

    @staticmethod
    def clean_directory(directory_path: Path):
        """Remove all files except .gitkeep from a directory."""
        if not directory_path.exists():
            directory_path.mkdir(parents=True, exist_ok=True)
            return

        for item in directory_path.iterdir():
            if item.name != '.gitkeep':
                if item.is_file():
                    item.unlink()
                elif item.is_dir():
                    shutil.rmtree(item)

    @staticmethod
    def load_config(name: str) -> Dict[str, Any]:
        """Read a JSON config from test_data/config."""
        with open(TestHelpers.get_test_dirs('data_config') / name, 'r', encoding='utf-8') as f:
            return json.load(f)

    @staticmethod
    def write_config(config: Dict[str, Any], dest: Union[str, Path]) -> Path:
        dest = Path(dest)
        dest.parent.mkdir(parents=True, exist_ok=True)
        dest.write_text(json.dumps(config, indent=2), encoding='utf-8')
        return dest

    @staticmethod
    def tree_digests(root: Union[str, Path]) -> Dict[str, str]:
        """sha256 of every file under ``root``, keyed by relative path."""
        root = Path(root)
        return {
            str(path.relative_to(root)): hashlib.sha256(path.read_bytes()).hexdigest()
            for path in sorted(root.rglob('*'))
            if path.is_file()
        }
