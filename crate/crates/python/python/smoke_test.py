"""Quick end-to-end check of the bindings on the mini model."""

import doss


def main():
    cfg = doss.ModelConfig("mini")
    base = doss.Model.init(cfg, seed=1)
    copy = doss.Dataset.synthetic("copy", "copy", 48, seed=1, lengths=(3, 5))
    rev = doss.Dataset.synthetic("reverse", "reverse", 48, seed=2, lengths=(3, 5))

    ft = doss.TrainConfig("finetune", learning_rate=3e-3, warmup_steps=2, batch_tokens=128)
    masks = [doss.create_domain_mask(base, d, 0.6, 0.6, ft, ft_epochs=1) for d in (copy, rev)]
    assert masks[0].count_ones() == masks[1].count_ones() > 0
    print("masks:", masks, "shared:", masks[0].shared_ones(masks[1]))

    joint = doss.TrainConfig("doss", max_steps=20, learning_rate=3e-3, warmup_steps=5, batch_tokens=128)
    lam, losses = doss.train_doss(base, masks, [copy, rev], joint)
    assert len(losses) == 20
    assert doss.frozen_checksum(lam, masks) == doss.frozen_checksum(base, masks)
    assert lam.checksum() != base.checksum()

    eff = doss.overlay(base, lam, masks[1])
    out = eff.decode([p[0] for p in rev.pairs()[:4]], max_len=8)
    assert len(out) == 4
    bleu, em = eff.evaluate(rev)
    print(f"reverse after 20 steps: bleu {bleu:.2f} exact match {em:.3f}")

    assert doss.corpus_bleu([[5, 6, 7]], [[5, 6, 7]]) == 100.0
    assert doss.capacity(0.8, 0.6) == 2
    try:
        doss.capacity(1.5, 0.5)
    except doss.DossError as e:
        print("rejected:", e)
    else:
        raise AssertionError("alpha 1.5 accepted")
    print("ok")


if __name__ == "__main__":
    main()
