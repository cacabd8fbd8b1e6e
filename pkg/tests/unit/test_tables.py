from pathlib import Path

import numpy as np
import pyarrow as pa
import pyarrow.csv as pcsv

import sys
sys.path.insert(0, str(Path(__file__).parent.parent.parent / 'src'))

from noisemap.tables import write_csv
from noisemap.trainer import EpochRecord, write_history
from noisemap.transitions import TransitionMatrix, export_flows


class TestWriteCsv:
    """Plain, unquoted CSV tables."""

    def test_header_and_body_are_unquoted(self, tmp_path):
        table = pa.table({'from': ["other", "plantation"], 'to': ["plantation", "other"], 'pixels': [3, 1]})
        path = write_csv(table, tmp_path / 'nested' / 'flows.csv')

        assert path.read_bytes() == b"from,to,pixels\nother,plantation,3\nplantation,other,1\n"

    def test_empty_table_is_header_only(self, tmp_path):
        table = pa.table({'epoch': pa.array([], type=pa.int64()), 'train_loss': pa.array([], type=pa.float64())})
        path = write_csv(table, tmp_path / 'empty.csv')

        assert path.read_bytes() == b"epoch,train_loss\n"
        assert pcsv.read_csv(path).column_names == ['epoch', 'train_loss']

    def test_history_first_line(self, tmp_path):
        write_history([EpochRecord(epoch=1, train_loss=0.5, val_loss=0.25)], tmp_path / 'history.csv')
        assert (tmp_path / 'history.csv').read_bytes().split(b"\n")[0] == b"epoch,train_loss,val_loss"

    def test_flows_first_line(self, tmp_path):
        tm = TransitionMatrix(codes=(0, 1), names=("other", "plantation"), counts=np.array([[2, 1], [0, 1]]))
        export_flows(tm, tmp_path / 'flows.csv', pixel_area=100.0)
        assert (tmp_path / 'flows.csv').read_bytes().split(b"\n")[0] == b"from,to,pixels,hectares"
