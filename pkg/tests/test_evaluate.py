import json

import numpy as np
import pytest

from compseg import evaluate as E
from compseg import synth as S
from compseg.errors import ConfigurationError, ProtocolError
from compseg.metrics import and_efficiency, relative_drop


@pytest.fixture(scope="module")
def corpus():
    return S.generate_corpus(S.ubc_space(), n_train=4, n_test_seen=8, n_test_unseen=36, seed=2)


def test_oracle_model_is_perfect(corpus):
    rep = E.evaluate(E.oracle_predictor(corpus), corpus)
    assert rep.ap_seen == 100.0 and rep.ap_unseen == 100.0
    assert rep.r_d == pytest.approx(0.0, abs=1e-9)
    assert rep.and_eff == 1.0
    assert set(rep.ap_group) == {"roof", "use"}
    assert all(v == 100.0 for v in rep.ap_group.values())
    assert not rep.flags


def test_null_model_flags_and_eff(corpus):
    rep = E.evaluate(E.null_predictor(), corpus)
    assert rep.ap_seen == 0.0 and rep.ap_unseen == 0.0
    assert rep.and_eff is None
    assert rep.flags and rep.flags[0].startswith("and_eff_undefined")


def test_report_recomputes_bit_for_bit(corpus):
    rng = np.random.default_rng(0)
    oracle = E.oracle_predictor(corpus)

    def noisy(images, bundles):
        # drop some GT and add random junk so the numbers are not trivial
        out = []
        for found in oracle(images, bundles):
            keep = [(s * rng.random() + 0.01, m) for s, m in found if rng.random() < 0.7]
            keep.append((0.5 * rng.random() + 0.01, rng.random(images.shape[2:]) < 0.1))
            out.append(keep)
        return out

    rep = E.evaluate(noisy, corpus, config={"seed": 1})
    back = E.EvalReport.from_json(rep.to_json())
    assert back.r_d == relative_drop(back.ap_seen, back.ap_unseen)
    assert back.and_eff == and_efficiency(back.ap_unseen, back.ap_group)
    assert 0 <= back.ap_unseen <= 100 and back.r_d <= 1 and back.and_eff >= 0
    assert back.config == {"seed": 1}
    json.loads(rep.to_json())


def test_missing_split(corpus):
    broken = S.Corpus(corpus.space, corpus.seed, corpus.image_size,
                      {"train": corpus.scenes["train"], "test-seen": [], "test-unseen": corpus.scenes["test-unseen"]},
                      corpus.samples)
    with pytest.raises(ProtocolError):
        E.evaluate(E.null_predictor(), broken)


def test_protocol_validation():
    with pytest.raises(ConfigurationError):
        E.Protocol(group_split="train")


@pytest.mark.parametrize("split", E.GROUP_SPLITS)
def test_group_split_options(corpus, split):
    rep = E.evaluate(E.oracle_predictor(corpus), corpus, E.Protocol(group_split=split))
    assert rep.ap_group == {"roof": 100.0, "use": 100.0}


def test_table_columns(corpus):
    rep = E.evaluate(E.oracle_predictor(corpus), corpus)
    none = E.evaluate(E.null_predictor(), corpus)
    text = E.format_table([("oracle", rep), ("null", none)])
    header = text.splitlines()[0].split()
    assert header == ["arm", "AP_unseen", "AP_seen", "R_d", "AND-Eff"]
    assert text.splitlines()[2].split() == ["oracle", "100.00", "100.00", "0.000", "1.000"]
    assert text.splitlines()[3].split()[-1] == "n/a"
