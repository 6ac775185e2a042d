import sys, time
import numpy as np
from pointergen import data as D, tensor as T, training as TR, metrics as ME
from pointergen import model as M
from pointergen.decoding import greedy_decode, make_step_fn
from pointergen.model import ModelConfig, init_params


t_start = time.perf_counter()
corpus = D.synth_copy_corpus(0, 2200, vocab_size=100, answer_mode="mixed")
vocab = D.build_vocab([ex.summary for ex in corpus] + [ex.query for ex in corpus] +
                      [ex.answer for ex in corpus] + [t for ex in corpus for t in ex.history])
enc = D.encode_corpus(corpus, vocab)
train_set, val_set = enc[:2000], enc[2000:]
log = open("/root/pkg/.calib/c4.txt", "w", buffering=1)

def accuracy(params, subset):
    hyps, refs = [], []
    for ex in subset:
        step = make_step_fn(ex, params)
        hyp = greedy_decode(step, end_id=D.END_ID, max_len=12)
        ids = hyp.ids[:-1] if hyp.finished else hyp.ids
        hyps.append(list(ids))
        refs.append(list(D.strip_padding(ex.target)[:-1]))
    return ME.exact_token_accuracy(hyps, refs)

def run(tag, sources, dropout, epochs):
    config = ModelConfig(vocab_size=len(vocab), d=64, heads=4, rounds=2, d_ff=256,
                         d_vis=2048, d_aud=128, dropout=dropout,
                         pointer_sources=sources)
    cfg = TR.TrainConfig(epochs=epochs, batch_size=16, warmup_steps=400, seed=0)
    t0 = time.perf_counter()
    res = TR.train(config, cfg, train_set, val_set,
                   progress=lambda s: log.write(f"{tag} ep{s.epoch} train={s.train_loss:.4f} val={s.val_loss:.4f} lr={s.lr:.5f}\n"))
    acc = accuracy(res.params, val_set)
    log.write(f"{tag} DONE acc={acc:.4f} best_ep={res.best_epoch} mins={(time.perf_counter()-t0)/60:.1f}\n")
    return acc

a = run("SQ-d0.0", ("summary", "query"), 0.0, 20)
b = run("NONE-d0.0", (), 0.0, 20)
log.write(f"GAP {a-b:.4f}\n")
log.write(f"TOTAL mins={(time.perf_counter()-t_start)/60:.1f}\n")
log.close()
