import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from mmasr.channels import Vocabulary
from mmasr.dataset import ChannelConfig, make_example
from mmasr.eqgen import generate_triple
from mmasr.model import (
    AssembledSequence, DecoderLM, ModelCheckpoint, ModelConfig, SequenceTooLong, assemble,
    greedy_decode, greedy_decode_reference, normalized_loss, pad_batch, parameter_count, sequence_loss,
)

from helpers import TINY, gradient_check, randomized, reference_forward


@pytest.fixture(scope="module")
def vocab():
    return Vocabulary()


def example(vocab, mods=("A",), seed=0, snr=math.inf):
    return make_example(f"ex{seed}", generate_triple(seed), snr, mods, vocab, ChannelConfig())


class TestAssemble:
    def test_audio_only_layout(self, vocab):
        ex = example(vocab)
        seq = assemble(ex, vocab)
        a = list(ex.streams["A"].ids)
        t = list(ex.target.ids)
        assert seq.ids == [vocab.prompt("asr", ("A",)), vocab.tag("A")] + a + [vocab.bos] + t
        assert t[-1] == vocab.eos
        assert seq.prefix[-1] == vocab.bos

    def test_fixed_modality_order(self, vocab):
        ex = example(vocab, ("O", "L", "A"))
        seq = assemble(ex, vocab)
        tags = [i for i in seq.ids if i in {vocab.tag(m) for m in "AILO"}]
        assert tags == [vocab.tag("A"), vocab.tag("L"), vocab.tag("O")]
        assert seq.ids[0] == vocab.prompt("asr", ("A", "L", "O"))

    def test_loss_mask(self, vocab):
        ex = example(vocab, ("A", "I"))
        seq = assemble(ex, vocab)
        n_words = len(ex.triple.transcript.split())
        assert sum(seq.loss_mask) == n_words + 1
        start, end = seq.segments[0][1]
        assert all(seq.loss_mask[k] == (start <= k < end) for k in range(len(seq)))

    def test_overflow_names_example(self, vocab):
        ex = example(vocab, seed=12)
        with pytest.raises(SequenceTooLong, match="ex12"):
            assemble(ex, vocab, max_seq_len=10)

    def test_lip_task_requires_lips(self, vocab):
        with pytest.raises(ValueError):
            assemble(example(vocab), vocab, task="lip_to_text")
        seq = assemble(example(vocab, ("L",)), vocab, task="lip_to_text")
        assert seq.ids[0] == vocab.prompt("lip_to_text", ("L",))


class TestParameterCount:
    @pytest.mark.parametrize("cfg", [ModelConfig(), TINY, ModelConfig(n_layers=2, d_model=64, d_ff=100, vocab_size=50)])
    def test_formula(self, cfg):
        m = DecoderLM(cfg)
        assert sum(p.numel() for p in m.parameters()) == parameter_count(cfg)

    def test_default_value(self):
        assert parameter_count(ModelConfig()) == 919_125

    def test_heads_divide(self):
        with pytest.raises(ValueError):
            ModelConfig(d_model=10, n_heads=4)


class TestForward:
    def test_causality(self):
        cfg = ModelConfig(n_layers=2, n_heads=2, d_model=16, d_ff=32, max_seq_len=24, vocab_size=32)
        m = randomized(cfg, 3).eval()
        rng = np.random.default_rng(0)
        with torch.no_grad():
            for _ in range(100):
                T = int(rng.integers(2, 24))
                ids = torch.tensor(rng.integers(0, 32, T))
                t = int(rng.integers(0, T - 1))
                mutated = ids.clone()
                k = int(rng.integers(t + 1, T))
                mutated[k:] = torch.tensor(rng.integers(0, 32, T - k))
                assert torch.equal(m(ids)[0, :t + 1], m(mutated)[0, :t + 1])

    def test_batch_independence(self):
        m = randomized(TINY, 4).eval()
        a = [3, 1, 4, 1, 5, 9, 2, 6]
        b = [2, 7, 1, 8, 2, 8, 1, 8, 2, 8, 4, 5]
        with torch.no_grad():
            alone = m(torch.tensor(a))[0]
            ids, valid = pad_batch([a, b], 0)
            both = m(ids, valid)
            ids2, valid2 = pad_batch([b, a], 0)
            swapped = m(ids2, valid2)
        torch.testing.assert_close(both[0, :len(a)], alone, rtol=0, atol=1e-6)
        torch.testing.assert_close(swapped[1, :len(a)], alone, rtol=0, atol=1e-6)

    def test_matches_hand_rolled_reference(self):
        m = randomized(TINY, 5).double().eval()
        ids = [5, 17, 3, 30, 0, 9, 9]
        with torch.no_grad():
            got = m(torch.tensor(ids))[0].numpy()
        sd = {k: v.numpy() for k, v in m.state_dict().items()}
        np.testing.assert_allclose(got, reference_forward(sd, ids, TINY.n_heads), rtol=1e-10, atol=1e-10)

    def test_attention_rows_sum_to_one(self):
        m = randomized(TINY, 6)
        x = torch.randn(2, 9, 8, dtype=torch.float32)
        mask = torch.ones(2, 9, dtype=torch.bool)
        mask[1, 6:] = False
        for km in (None, mask):
            _, probs = m.blocks[0].attn(x, km, return_probs=True)
            assert torch.allclose(probs.sum(-1), torch.ones(()), atol=1e-6)

    def test_out_of_vocab(self):
        m = DecoderLM(TINY)
        with pytest.raises(ValueError):
            m(torch.tensor([1, 2, 32]))
        with pytest.raises(SequenceTooLong):
            m(torch.zeros(17, dtype=torch.long))


class TestLoss:
    def test_single_segment_is_mean_ce(self):
        torch.manual_seed(0)
        logits = torch.randn(1, 8, 32)
        ids = torch.randint(0, 32, (1, 8))
        got = normalized_loss(logits, ids, [[("T", (3, 8))]])
        want = F.cross_entropy(logits[0, 2:7], ids[0, 3:8])
        assert torch.allclose(got, want, atol=1e-6)

    def test_length_normalized_two_segments(self):
        torch.manual_seed(1)
        logits = torch.randn(1, 13, 32, dtype=torch.float64)
        ids = torch.randint(0, 32, (1, 13))
        logp = torch.log_softmax(logits[0], -1)
        c1 = -sum(logp[t - 1, ids[0, t]] for t in range(1, 3)) / 2
        c2 = -sum(logp[t - 1, ids[0, t]] for t in range(3, 13)) / 10
        segs = [("x", (1, 3)), ("y", (3, 13))]
        assert normalized_loss(logits, ids, [segs]).item() == pytest.approx(((c1 + c2) / 2).item(), rel=1e-12)
        # segment order is irrelevant
        assert normalized_loss(logits, ids, [segs[::-1]]).item() == pytest.approx(((c1 + c2) / 2).item(), rel=1e-12)

    def test_batch_mean(self):
        torch.manual_seed(2)
        logits = torch.randn(2, 6, 32, dtype=torch.float64)
        ids = torch.randint(0, 32, (2, 6))
        s0, s1 = [("T", (2, 6))], [("T", (4, 5))]
        both = normalized_loss(logits, ids, [s0, s1])
        one = normalized_loss(logits[:1], ids[:1], [s0])
        two = normalized_loss(logits[1:], ids[1:], [s1])
        assert both.item() == pytest.approx((one + two).item() / 2, rel=1e-12)

    def test_rejects_unmasked(self):
        m = DecoderLM(TINY)
        seq = AssembledSequence([1, 2, 3], [False] * 3, [], 3, "bad")
        with pytest.raises(ValueError, match="bad"):
            sequence_loss(m, [seq])

    def test_gradient_check(self):
        torch.manual_seed(0)
        m = randomized(TINY, 7).double()
        seqs = [[4, 9, 31, 2, 7, 7, 1, 20, 3], [5, 1, 12, 30, 8, 2]]
        segments = [[("a", (4, 7)), ("b", (7, 9))], [("T", (3, 6))]]
        errors = gradient_check(m, seqs, segments)
        assert len(errors) == len(list(m.parameters()))
        assert max(errors.values()) <= 1e-4, errors


class TestGreedy:
    def test_immediate_eos(self):
        m = DecoderLM(TINY)
        with torch.no_grad():
            m.ln_f.weight.zero_()
            m.ln_f.bias.zero_()
            m.head_bias[2] = 10.0
        assert greedy_decode(m, [[1, 5, 6], [1]], 5, eos_id=2) == [[], []]
        assert greedy_decode_reference(m, [1, 5, 6], 5, eos_id=2) == []

    def test_ties_go_to_lowest_id(self):
        m = DecoderLM(TINY)
        with torch.no_grad():
            m.ln_f.weight.zero_()
            m.ln_f.bias.zero_()
            m.head_bias[[7, 11]] = 3.0
        assert greedy_decode(m, [[1]], 3, eos_id=2) == [[7, 7, 7]]

    def test_deterministic_and_matches_reference(self):
        cfg = ModelConfig(n_layers=2, n_heads=2, d_model=16, d_ff=32, max_seq_len=40, vocab_size=32)
        m = randomized(cfg, 8, scale=0.3)
        rng = np.random.default_rng(1)
        prefixes = [list(rng.integers(3, 32, int(n))) for n in rng.integers(1, 15, 12)]
        a = greedy_decode(m, prefixes, 12, eos_id=2, batch_size=5)
        assert a == greedy_decode(m, prefixes, 12, eos_id=2, batch_size=5)
        assert a == [greedy_decode_reference(m, p, 12, eos_id=2) for p in prefixes]
        assert any(len(o) > 0 for o in a)

    def test_stops_at_context_limit(self):
        cfg = ModelConfig(n_layers=1, n_heads=2, d_model=8, d_ff=16, max_seq_len=6, vocab_size=32)
        m = DecoderLM(cfg)
        with torch.no_grad():
            m.ln_f.weight.zero_()
            m.ln_f.bias.zero_()
            m.head_bias[9] = 5.0
        assert greedy_decode(m, [[1, 1, 1, 1]], 10, eos_id=2) == [[9, 9]]
        assert greedy_decode_reference(m, [1, 1, 1, 1], 10, eos_id=2) == [9, 9]

    def test_max_new_validated(self):
        with pytest.raises(ValueError):
            greedy_decode(DecoderLM(TINY), [[1]], 0, eos_id=2)


class TestCheckpoint:
    def test_round_trip_bit_identical(self, tmp_path):
        m = randomized(TINY, 9)
        opt = {"exp_avg.tok_emb.weight": np.arange(256, dtype=np.float32).reshape(32, 8)}
        ck = ModelCheckpoint.from_model(m, "abc", {"best_step": 5, "dev_wer_history": [[5, 0.5]]}, opt)
        ck.save(tmp_path / "m.ckpt")
        back = ModelCheckpoint.load(tmp_path / "m.ckpt")
        assert back.config == TINY
        assert back.vocab_hash == "abc" and back.metadata["best_step"] == 5
        assert back.params.keys() == ck.params.keys()
        for k in ck.params:
            assert back.params[k].tobytes() == ck.params[k].tobytes()
        assert back.optimizer["exp_avg.tok_emb.weight"].tobytes() == opt["exp_avg.tok_emb.weight"].tobytes()
        assert back.param_digest() == ck.param_digest()
        assert back.to_bytes() == ck.to_bytes()
        ids = torch.tensor([1, 2, 3])
        assert torch.equal(back.to_model()(ids), m(ids))

    def test_header_layout(self):
        data = ModelCheckpoint.from_model(DecoderLM(TINY)).to_bytes()
        assert data[:8] == b"MMASRCK1"
        hlen = int.from_bytes(data[8:12], "little")
        assert len(data) == 12 + hlen + 4 * parameter_count(TINY)

    def test_corrupt(self, tmp_path):
        data = ModelCheckpoint.from_model(DecoderLM(TINY)).to_bytes()
        with pytest.raises(ValueError):
            ModelCheckpoint.from_bytes(b"XXXXXXXX" + data[8:])
        with pytest.raises(ValueError):
            ModelCheckpoint.from_bytes(data[:-4])
        with pytest.raises(FileNotFoundError):
            ModelCheckpoint.load(tmp_path / "missing.ckpt")
