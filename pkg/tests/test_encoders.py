import pytest
import torch

from difftrack.encoders import PatchEncoder, TextEncoder, image_to_tensor, tokenize
from difftrack.errors import ShapeError
from difftrack.vocab import OOV_ID, PAD_ID, TEXT_LEN, VOCAB

import numpy as np


# ---------------------------------------------------------------------------
# Tokenizer.


def test_tokenize_known_words():
    ids = tokenize("the red square")
    assert ids[:3] == [VOCAB["the"], VOCAB["red"], VOCAB["square"]]
    assert ids[3:] == [PAD_ID] * (TEXT_LEN - 3)


def test_tokenize_is_case_and_punctuation_insensitive():
    assert tokenize("The RED square.") == tokenize("the red square")


def test_tokenize_unknown_words_map_to_oov():
    ids = tokenize("zebra")
    assert ids[0] == OOV_ID


def test_tokenize_empty_caption_is_all_pad():
    assert tokenize("") == [PAD_ID] * TEXT_LEN
    assert tokenize("   ") == [PAD_ID] * TEXT_LEN


def test_tokenize_truncates_to_length():
    ids = tokenize(" ".join(["red"] * 40))
    assert len(ids) == TEXT_LEN
    assert all(i == VOCAB["red"] for i in ids)


def test_tokenize_custom_length():
    assert len(tokenize("red", length=4)) == 4


# ---------------------------------------------------------------------------
# image_to_tensor.


def test_image_to_tensor_range_and_layout():
    img = np.zeros((8, 6, 3), dtype=np.uint8)
    img[0, 0] = (255, 0, 128)
    t = image_to_tensor(img)
    assert t.shape == (3, 8, 6)
    assert t[0, 0, 0] == pytest.approx(1.0)
    assert t[2, 0, 0] == pytest.approx(128 / 255)


def test_image_to_tensor_rejects_grayscale():
    with pytest.raises(ShapeError):
        image_to_tensor(np.zeros((8, 8), dtype=np.uint8))


# ---------------------------------------------------------------------------
# TextEncoder.


def test_text_encoder_masks_and_zeroes_pad_positions():
    enc = TextEncoder(dim=16, layers=1, heads=2)
    ids = enc.encode_batch(["red square", ""])
    feats, mask = enc(ids)
    assert feats.shape == (2, TEXT_LEN, 16)
    assert mask[0, :2].all() and not mask[0, 2:].any()
    assert not mask[1].any()
    # masked rows are exactly zero
    assert torch.all(feats[0, 2:] == 0)
    assert torch.all(feats[1] == 0)


def test_text_encoder_encode_batch_matches_tokenize():
    enc = TextEncoder(dim=16, layers=2, heads=2)
    enc.eval()
    via_batch, _ = enc(enc.encode_batch(["red square"]))
    via_ids, _ = enc(torch.tensor([tokenize("red square")]))
    assert torch.equal(via_batch, via_ids)


def test_text_encoder_output_ignores_other_batch_rows():
    enc = TextEncoder(dim=16, layers=2, heads=2)
    enc.eval()
    together, _ = enc(enc.encode_batch(["red square", "blue circle"]))
    alone, _ = enc(enc.encode_batch(["red square"]))
    assert torch.allclose(together[:1], alone, atol=1e-6)


def test_text_encoder_rejects_wrong_length():
    enc = TextEncoder(dim=16, layers=1, heads=2)
    with pytest.raises(ShapeError):
        enc(torch.zeros(1, TEXT_LEN + 1, dtype=torch.long))
    with pytest.raises(ShapeError):
        enc(torch.zeros(TEXT_LEN, dtype=torch.long))


# ---------------------------------------------------------------------------
# PatchEncoder: one set of weights serves both crop sizes.


def test_patch_encoder_token_counts():
    enc = PatchEncoder(dim=32, depth=1, heads=2, patch=16, ref_size=64)
    enc.eval()
    assert enc(torch.randn(1, 3, 64, 64)).shape == (1, 16, 32)
    assert enc(torch.randn(1, 3, 32, 32)).shape == (1, 4, 32)


def test_patch_encoder_is_siamese():
    # the 32px path must use exactly the same weights as the 64px path:
    # embed a 32px image, then embed it again as the top-left corner of a
    # 64px canvas; with zeroed positions + depth 0 attention the patch
    # projections agree.
    enc = PatchEncoder(dim=32, depth=0, heads=2, patch=16, ref_size=64)
    enc.eval()
    with torch.no_grad():
        enc.pos.zero_()
    small = torch.randn(1, 3, 32, 32)
    big = torch.zeros(1, 3, 64, 64)
    big[..., :32, :32] = small
    t_small = enc(small).reshape(1, 2, 2, 32)
    t_big = enc(big).reshape(1, 4, 4, 32)
    assert torch.allclose(t_small, t_big[:, :2, :2], atol=1e-6)


def test_patch_encoder_positions_slice_from_shared_table():
    enc = PatchEncoder(dim=32, depth=0, heads=2, patch=16, ref_size=64)
    enc.eval()
    img = torch.zeros(1, 3, 32, 32)
    out = enc(img).reshape(2, 2, 32)
    ref = enc(torch.zeros(1, 3, 64, 64)).reshape(4, 4, 32)
    # uniform input: outputs differ only through the positional table, and
    # the small grid must match the reference grid's top-left corner
    assert torch.allclose(out, ref[:2, :2], atol=1e-6)


def test_patch_encoder_rejects_bad_sizes():
    enc = PatchEncoder(dim=32, depth=1, heads=2, patch=16, ref_size=64)
    with pytest.raises(ShapeError):
        enc(torch.randn(1, 3, 40, 40))  # not a multiple of the patch
    with pytest.raises(ShapeError):
        enc(torch.randn(1, 3, 128, 128))  # larger than the positional table
    with pytest.raises(ShapeError):
        enc(torch.randn(1, 3, 64, 32))  # not square
    with pytest.raises(ShapeError):
        PatchEncoder(dim=32, depth=1, heads=2, patch=48, ref_size=64)


def test_patch_encoder_grid_of():
    enc = PatchEncoder(dim=32, depth=1, heads=2, patch=16, ref_size=128)
    assert enc.grid_of(128) == 8
    assert enc.grid_of(64) == 4
    with pytest.raises(ShapeError):
        enc.grid_of(30)
