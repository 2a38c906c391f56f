import subprocess
import sys
import zipfile

from fieldctr import data as dc
from fieldctr.datasets import ML100K_SCHEMA, convert_ml100k, main

PREFIX = "recbole/dataset_example/ml-100k/ml-100k"


def _fake_wheel(path):
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr(f"{PREFIX}.inter", "user_id:token\titem_id:token\trating:float\ttimestamp:float\n"
                                       "1\t10\t5\t100\n2\t10\t3\t50\n1\t11\t4\t75\n")
        zf.writestr(f"{PREFIX}.user", "user_id:token\tage:token\tgender:token\toccupation:token\tzip_code:token\n"
                                      "1\t24\tM\ttechnician\t85711\n2\t53\tF\tother\t94043\n")
        zf.writestr(f"{PREFIX}.item", "item_id:token\tmovie_title:token_seq\trelease_year:token\tclass:token_seq\n"
                                      "10\tToy Story\t1995\tAnimation Children's Comedy\n11\tHeat\t\tAction\n")
    return path


def test_convert_fake_wheel(tmp_path):
    table, schema_path = convert_ml100k(_fake_wheel(tmp_path / "w.whl"), tmp_path / "ml")
    schema = dc.load_schema(schema_path)
    assert schema == ML100K_SCHEMA and schema.K == 8
    ds = dc.ingest_table(table, schema, rating_threshold=4)
    assert len(ds) == 3
    assert list(ds.labels) == [1, 0, 1]
    assert list(ds.raw[0]) == ["1", "10", "24", "M", "technician", "85711", "1995", "Animation"]
    assert ds.raw[2, 6] == "unknown"


def test_main_reports_bad_wheel(tmp_path, capsys):
    (tmp_path / "bad.whl").write_bytes(b"nope")
    assert main([str(tmp_path / "out"), "--wheel", str(tmp_path / "bad.whl")]) == 1
    assert "error" in capsys.readouterr().err


def test_console_entry_point_runs():
    out = subprocess.run([sys.executable, "-m", "fieldctr.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("prepare", "gen-corpus", "gen-embeddings", "train", "evaluate", "sweep", "export-heatmap"):
        assert cmd in out.stdout
