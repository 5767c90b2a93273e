"""Build the small PTB-style Moby-Dick slice used by the learning smoke test.

Source: the public-domain text of Moby-Dick as distributed in the npm package
@stdlib/datasets-moby-dick (data/chapter_*.txt).

    npm pack @stdlib/datasets-moby-dick && tar xzf stdlib-datasets-moby-dick-*.tgz
    python3 scripts/prep_moby.py package/data data/moby

Preprocessing mirrors the usual PTB conventions: lowercase, punctuation
stripped, numbers replaced by N, one sentence per line.
"""
import pathlib
import re
import sys

TRAIN, VALID, TEST = 50_000, 6_000, 6_000

def sentences(text):
    text = text.replace("—", " ").replace("–", " ").replace("-", " ")
    for raw in re.split(r"(?<=[.!?;])\s+", text):
        words = []
        for tok in raw.lower().split():
            tok = tok.replace("’", "'").replace("‘", "'")
            tok = re.sub(r"[^a-z0-9']", "", tok).strip("'")
            if not tok:
                continue
            if re.search(r"[0-9]", tok):
                tok = "N"
            words.append(tok)
        if words:
            yield words

def main(src, dst):
    src, dst = pathlib.Path(src), pathlib.Path(dst)
    chapters = sorted(src.glob("chapter_*.txt"), key=lambda p: int(p.stem.split("_")[1]))
    lines = []
    for ch in chapters:
        body = ch.read_text(encoding="utf-8").split("\n", 1)[1]
        lines.extend(sentences(body))
    dst.mkdir(parents=True, exist_ok=True)
    it = iter(lines)
    for name, budget in (("train", TRAIN), ("valid", VALID), ("test", TEST)):
        out, count = [], 0
        while count < budget:
            words = next(it)
            out.append(" ".join(words))
            count += len(words) + 1
        (dst / f"{name}.txt").write_text("\n".join(out) + "\n", encoding="utf-8")
        print(name, count)

if __name__ == "__main__":
    main(*sys.argv[1:3])
