"""Smoke test for the xfer_forge extension.

Build and install first:  pip install maturin && pip install ./crates/python
Then:                     python python/smoke_test.py
"""

import json
import math
import tempfile
from pathlib import Path

import xfer_forge as xf

TINY_MODEL = {"vocab_size": 0, "hidden": 16, "layers": 1, "heads": 2, "intermediate": 32,
              "max_positions": 64, "type_vocab": 2, "dropout": 0.0, "layer_norm_eps": 1e-12}
TINY_TRAIN = {"batch_size": 8, "learning_rate": 1e-3, "max_seq_len": 32, "epochs": 1, "max_steps": 4}


def main() -> None:
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        src = xf.gen_language(tmp / "src", name="src", alphabet="abcdefghijklm", seed=5)
        tgt = xf.gen_language(tmp / "tgt", name="tgt", alphabet="nopqrstuvwxyz", punctuation="?", seed=6)
        assert (tmp / "src" / "treebank.conllu").exists() and src and tgt

        tok_src = xf.Tokenizer.train(src[:300], 200, name="src")
        tok_tgt = xf.Tokenizer.train(tgt[:300], 200, name="tgt")
        assert tok_src.tokens()[:5] == ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
        ids = tok_src.encode(src[0])
        assert ids[0] == 2 and ids[-1] == 3
        tok_src.save(tmp / "tok")
        assert xf.Tokenizer.load(tmp / "tok").tokens() == tok_src.tokens()

        model = xf.Model(tok_src, json.dumps(TINY_MODEL), seed=1)
        trained, curve = model.pretrain(src[:200], json.dumps(TINY_TRAIN))
        assert len(curve) == 4 and all(math.isfinite(loss) for _, loss in curve)

        swapped = trained.transfer("swap", tok_tgt)
        kept = trained.transfer("keep", tok_tgt)
        assert swapped.tokenizer.name == "tgt" and kept.tokenizer.name == "src"
        assert swapped.num_parameters == trained.num_parameters
        swapped.save(tmp / "ck")
        assert xf.Model.load(tmp / "ck").lineage == swapped.lineage

        assert abs(xf.pearson([1, 2, 3], [2, 4, 6]) - 1.0) < 1e-12
        assert xf.spearman([1, 1, 1], [1, 2, 3]) is None
        assert xf.accuracy([0, 1, 1], [0, 1, 0]) == 2 / 3
        assert xf.matthews([0, 1], [0, 1]) == 1.0

        manifest = json.loads(xf.desk_manifest())
        run, reused, warnings, report_dir = xf.run_experiment(json.dumps(manifest), tmp / "run", report_only=True)
        assert run == 0 and reused == 0 and warnings
        assert (Path(report_dir) / "table2.csv").exists()
    print("python smoke test passed")


if __name__ == "__main__":
    main()
