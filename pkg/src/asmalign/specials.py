"""Special-token lexicon shared by the dataset layer and the model vocab."""

from __future__ import annotations

PAD = "<pad>"
BOS = "<bos>"
EOS = "<eos>"
INST_START = "<inst-start>"
INST_END = "<inst-end>"
INST_CODE = "<inst-code>"
INST_PLACEHOLDER = "<inst-placeholder>"

# Order fixes the ids of the special tokens in every vocabulary.
SPECIAL_GLYPHS = (PAD, BOS, EOS, INST_START, INST_END, INST_CODE, INST_PLACEHOLDER)
