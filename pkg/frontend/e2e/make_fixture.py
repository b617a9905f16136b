"""Build a tiny server fixture for the browser e2e test.

Writes a checkpoint (random weights, EOS suppressed so streams always run to
their token budget) and an idf table into the directory given as argv[1],
then prints their paths as JSON.
"""
import json
import sys
from pathlib import Path

import numpy as np

from futuresight.bpe import EOS, train_tokenizer
from futuresight.idf import IdfTable, load_stopwords, save_idf_table
from futuresight.model import MEMORY, ModelConfig, init_params, save_checkpoint

CORPUS = [
    "The harbor town woke slowly under a grey sky. "
    "Fishermen hauled their nets along the quay. "
    "A bell rang twice from the old chapel tower. "
    "Smoke curled from the bakery chimney. "
    "Gulls argued over scraps by the pier.",
]


def main() -> None:
    out = Path(sys.argv[1])
    out.mkdir(parents=True, exist_ok=True)

    tok = train_tokenizer(CORPUS, vocab_size=300)
    cfg = ModelConfig(vocab_size=tok.vocab_size, d_model=16, d_enc=16, n_heads=2,
                      n_layers_dec=2, n_layers_enc=1, d_ff=32, max_seq=512,
                      injection_mode=MEMORY, seed=11)
    store = init_params(cfg, dtype=np.float32)
    arrays = store.state_arrays()
    arrays["out.b"][EOS] = -1e9  # random weights may sample EOS; the test needs full streams

    ckpt = out / "fixture.fsck"
    save_checkpoint(ckpt, cfg, arrays, meta={"tokenizer": tok.to_dict()})

    words = [w for line in CORPUS for w in line.lower().split()]
    table = IdfTable(doc_count=5, df={w: 1 for w in words}, stopwords=load_stopwords())
    idf = out / "fixture.idf"
    save_idf_table(table, idf)

    print(json.dumps({"ckpt": str(ckpt), "idf": str(idf)}))


if __name__ == "__main__":
    main()
