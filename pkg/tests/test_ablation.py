from conftest import TEST_MODEL
from nativevid import ablation as A
from nativevid.preprocess import Preprocess


def test_ordered():
    assert A.ordered([1, 2, 2], [True, False])
    assert not A.ordered([1, 2, 2], [True, True])
    assert not A.ordered([3, 2], [False])


def test_desk_config_fills_recipe():
    c = A.desk_config(mode="lora").resolved()
    assert (c.lr, c.batch_size, c.max_epochs) == (1e-3, 16, 5)
    assert A.desk_model().init_std == 0.1


def test_clip_length_sweep_runs(tiny_corpus):
    base = A.desk_config(max_epochs=1, batch_size=8, preprocess=Preprocess.parse("dynamic[224,720]"))
    res = A.sweep_clip_length(tiny_corpus, [2, 4], base, TEST_MODEL)
    assert [r.name for r in res] == ["T=2", "T=4"]
    assert all(0 <= r.test_acc <= 100 and len(r.log) == 1 for r in res)
