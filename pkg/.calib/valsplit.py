import numpy as np
from pointergen import data as D, tensor as T, training as TR
from pointergen.model import ModelConfig
from pointergen import model as M

corpus = D.synth_copy_corpus(0, 2200, vocab_size=100, answer_mode="mixed")
vocab = D.build_vocab([ex.summary for ex in corpus] + [ex.query for ex in corpus] +
                      [ex.answer for ex in corpus] + [t for ex in corpus for t in ex.history])
enc = D.encode_corpus(corpus, vocab)
train_set, val_set = enc[:2000], enc[2000:]
config = ModelConfig(vocab_size=len(vocab), d=64, heads=4, rounds=2, d_ff=256,
                     d_vis=2048, d_aud=128, dropout=0.0,
                     pointer_sources=("summary", "query"))
cfg = TR.TrainConfig(epochs=2, batch_size=16, warmup_steps=400, seed=0)
res = TR.train(config, cfg, train_set, val_set,
               progress=lambda s: print(f"ep{s.epoch} val={s.val_loss:.4f}", flush=True))

losses = []
with T.no_grad():
    for ex in val_set:
        out = M.forward(ex, res.params)
        losses.append(TR.example_loss(out, ex, config, cfg).item())
losses = np.array(losses)
print(f"val[0:100]  mean={losses[:100].mean():.3f}")
print(f"val[100:200] mean={losses[100:].mean():.3f}")
turns = np.array([corpus[2000 + i].turn for i in range(200)])
hist_len = np.array([len(corpus[2000 + i].history) for i in range(200)])
print("loss by turn:", {t: round(float(losses[turns == t].mean()), 3) for t in sorted(set(turns))})
print("worst 10 examples:")
order = np.argsort(-losses)
for i in order[:10]:
    ex = corpus[2000 + i]
    print(f"  idx={2000+i} turn={ex.turn} hist={len(ex.history)} loss={losses[i]:.2f} "
          f"q0={ex.query.split()[0]} answer='{ex.answer}'")
print("loss>2 count by half:", int((losses[:100] > 2).sum()), int((losses[100:] > 2).sum()))
