"""CSV output shared by the stages that write tables."""

from pathlib import Path
from typing import Union

import pyarrow as pa
import pyarrow.csv as pcsv


def write_csv(table: pa.Table, path: Union[str, Path]) -> Path:
    """Write ``table`` with a plain ``a,b,c`` header line and unquoted values.

    pyarrow quotes header names whatever the quoting style, so the header is
    written here and only the body goes through the CSV writer.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'wb') as f:
        f.write((",".join(table.column_names) + "\n").encode('utf-8'))
        if table.num_rows:
            pcsv.write_csv(table, f, write_options=pcsv.WriteOptions(include_header=False, quoting_style="none"))
    return path
