import numpy as np
import pytest

from ramehr import tensor as T
from ramehr.augmented import (CLS_ID, DOC_KINDS, PAD_ID, AugmentedModel, HashTokenizer, TextEncoderConfig,
                              aug_forward, flatten_patient, pack_docs)
from ramehr.cotrain import bce
from ramehr.ehr import CodeType, PatientRecord, Visit
from ramehr.errors import ConfigError
from ramehr.gradcheck import check_gradients
from ramehr.nn import mlp
from ramehr.tensor import Adam

from gradcases import augmented_bag, augmented_transformer

SUMMARIES = {"D1": "fluid overload", "D2": "infection response", "M1": "loop diuretic"}


def test_tokenizer_is_deterministic_and_in_range():
    tok = HashTokenizer(vocab_size=100, seed=3)
    ids = tok.encode("Heart failure heart")
    assert ids[0] == ids[2] and all(2 <= i < 100 for i in ids)
    assert HashTokenizer(100, 3).encode("heart") == [ids[0]]
    with pytest.raises(ConfigError):
        HashTokenizer(vocab_size=2)


def test_flatten_most_recent_visit_first(small_dataset, small_vocab):
    tok = HashTokenizer()
    doc = flatten_patient(small_dataset[0], CodeType.DISEASE, SUMMARIES, small_vocab, tok)
    # visit 1 holds D2, visit 0 holds D1
    expected = [CLS_ID] + tok.encode("sepsis infection response") + tok.encode("heart failure fluid overload")
    assert list(doc.tokens) == expected and doc.kind is CodeType.DISEASE


def test_flatten_keeps_stored_code_order_within_a_visit(small_dataset, small_vocab):
    tok = HashTokenizer()
    doc = flatten_patient(small_dataset[2], CodeType.MEDICATION, SUMMARIES, small_vocab, tok)
    assert list(doc.tokens) == [CLS_ID] + tok.encode("furosemide loop diuretic") + tok.encode("heparin")


def test_flatten_without_summaries_uses_names_and_handles_empty_kinds(small_dataset, small_vocab):
    tok = HashTokenizer()
    doc = flatten_patient(small_dataset[1], CodeType.DISEASE, {}, small_vocab, tok)
    assert doc.tokens == (CLS_ID,)
    doc = flatten_patient(small_dataset[3], CodeType.PROCEDURE, {}, small_vocab, tok)
    assert list(doc.tokens) == [CLS_ID] + tok.encode("dialysis")


def test_flatten_truncates(small_dataset, small_vocab):
    tok = HashTokenizer()
    full = flatten_patient(small_dataset[0], CodeType.DISEASE, SUMMARIES, small_vocab, tok)
    cut = flatten_patient(small_dataset[0], CodeType.DISEASE, SUMMARIES, small_vocab, tok, max_len=3)
    assert cut.tokens == full.tokens[:3]
    with pytest.raises(ConfigError):
        flatten_patient(small_dataset[0], CodeType.DISEASE, SUMMARIES, small_vocab, tok, max_len=0)


def test_pack_docs_layout(small_dataset, small_vocab):
    tok = HashTokenizer()
    docs = [tuple(flatten_patient(p, k, SUMMARIES, small_vocab, tok) for k in DOC_KINDS) for p in small_dataset]
    tokens, mask = pack_docs(docs)
    assert tokens.shape[:2] == (3, 4) and mask.shape == tokens.shape
    assert tokens[0, 1, 0] == CLS_ID and not mask[0, 1, 1:].any()
    assert np.all(tokens[~mask] == PAD_ID)
    for i, kind in enumerate(DOC_KINDS):
        assert docs[2][i].kind is kind
        assert list(tokens[i, 2, :len(docs[2][i].tokens)]) == list(docs[2][i].tokens)


def test_one_encoder_is_shared_by_all_code_types():
    m = AugmentedModel(2, TextEncoderConfig(d=8, heads=2, max_len=16, vocab_size=50))
    encs = {id(m.encoder_for(k)) for k in CodeType}
    assert len(encs) == 1
    assert all(name.startswith(("encoder.", "readout.")) for name in m.parameters())


def test_logits_concatenate_disease_medication_procedure():
    rng = np.random.default_rng(0)
    m = AugmentedModel(2, TextEncoderConfig(d=8, heads=2, max_len=6, vocab_size=30), rng, np.float64)
    tokens = rng.integers(2, 30, size=(3, 2, 6))
    tokens[:, :, 0] = CLS_ID
    mask = np.ones_like(tokens, dtype=bool)
    cls = [m.encoder.encode(tokens[i], mask[i]).data for i in range(3)]
    expected = mlp(T.Tensor(np.concatenate(cls, axis=1)), m.head, "readout").data
    np.testing.assert_allclose(m.logits(tokens, mask).data, expected, atol=1e-12)


def test_padding_content_is_ignored():
    rng = np.random.default_rng(1)
    m = AugmentedModel(2, TextEncoderConfig(d=8, heads=2, max_len=6, vocab_size=30), rng, np.float64)
    tokens = rng.integers(2, 30, size=(3, 2, 6))
    mask = np.ones_like(tokens, dtype=bool)
    mask[:, :, 4:] = False
    other = tokens.copy()
    other[:, :, 4:] = 7
    np.testing.assert_allclose(m.logits(tokens, mask).data, m.logits(other, mask).data, atol=1e-12)


def test_bag_encoder_ignores_code_order_within_a_visit(small_vocab):
    m = AugmentedModel(2, TextEncoderConfig(d=8, heads=2, max_len=32, vocab_size=64, kind="bag"),
                       np.random.default_rng(0), np.float64)
    tok = HashTokenizer(64)
    a = PatientRecord("p", (Visit(("D1", "M1", "D2", "M2"), 0),), (0, 1))
    b = PatientRecord("p", (Visit(("M2", "D2", "M1", "D1"), 0),), (0, 1))
    assert m.flatten(a, {}, small_vocab, tok) != m.flatten(b, {}, small_vocab, tok)
    np.testing.assert_allclose(aug_forward(a, m, {}, small_vocab, tok).probs,
                               aug_forward(b, m, {}, small_vocab, tok).probs, atol=1e-12)


def test_documents_longer_than_positions_are_rejected():
    m = AugmentedModel(1, TextEncoderConfig(d=8, heads=2, max_len=4, vocab_size=20))
    tokens = np.full((3, 1, 5), 3)
    with pytest.raises(ConfigError):
        m.logits(tokens, np.ones_like(tokens, dtype=bool))


def test_bad_encoder_kind():
    with pytest.raises(ConfigError):
        AugmentedModel(1, TextEncoderConfig(d=8, heads=2, kind="lstm"))


@pytest.mark.parametrize("case", [augmented_transformer, augmented_bag], ids=lambda c: c.__name__)
def test_model_gradients(case):
    loss_fn, params = case(3)
    assert max(check_gradients(loss_fn, params).values()) < 1e-6


def test_overfits_a_handful_of_documents():
    rng = np.random.default_rng(0)
    m = AugmentedModel(2, TextEncoderConfig(d=16, heads=2, max_len=8, vocab_size=40), rng)
    tokens = rng.integers(2, 40, size=(3, 4, 8))
    tokens[:, :, 0] = CLS_ID
    mask = np.ones_like(tokens, dtype=bool)
    y = np.array([[1, 0], [0, 1], [1, 1], [0, 0]], dtype=np.float32)
    opt = Adam(m.parameters(), lr=3e-3)
    for _ in range(300):
        opt.zero_grad()
        loss = bce(T.sigmoid(m.logits(tokens, mask)), y)
        loss.backward()
        opt.step()
    assert float(loss.data) < 0.05
