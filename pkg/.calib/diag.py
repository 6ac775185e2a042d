import argparse, time
import numpy as np
from pointergen import data as D, tensor as T, training as TR, metrics as ME
from pointergen import model as M, pointer as P
from pointergen.decoding import greedy_decode, make_step_fn
from pointergen.model import ModelConfig
from pointergen.tensor import no_grad

ap = argparse.ArgumentParser()
ap.add_argument("--epochs", type=int, default=10)
ap.add_argument("--n-train", type=int, default=500)
ap.add_argument("--n-val", type=int, default=100)
ap.add_argument("--alpha", type=float, default=1.0)
ap.add_argument("--dump", type=int, default=10)
ap.add_argument("--dropout", type=float, default=0.0)
ap.add_argument("--train-seed", type=int, default=0)
args = ap.parse_args()



corpus = D.synth_copy_corpus(0, args.n_train + args.n_val, vocab_size=100, answer_mode="mixed")
vocab = D.build_vocab([ex.summary for ex in corpus] + [ex.query for ex in corpus] +
                      [ex.answer for ex in corpus] + [t for ex in corpus for t in ex.history])
enc_all = D.encode_corpus(corpus, vocab)
train_set, val_set = enc_all[:args.n_train], enc_all[args.n_train:]

config = ModelConfig(vocab_size=len(vocab), d=64, heads=4, rounds=2, d_ff=256,
                     d_vis=2048, d_aud=128, dropout=args.dropout,
                     pointer_sources=("summary", "query"))
cfg = TR.TrainConfig(epochs=args.epochs, batch_size=16, warmup_steps=400, seed=args.train_seed,
                     alpha=args.alpha, beta=args.alpha)
t0 = time.perf_counter()
res = TR.train(config, cfg, train_set, val_set,
               progress=lambda s: print(f"ep{s.epoch} train={s.train_loss:.4f} val={s.val_loss:.4f}", flush=True))
print(f"trained {args.epochs} ep in {(time.perf_counter()-t0)/60:.1f} min, best={res.best_epoch}")
params = res.params

with no_grad():
    gen_tot = vis_tot = aud_tot = 0.0
    for ex in val_set:
        out = M.forward(ex, params)
        gen_tot += TR.generation_loss(out.p_vocab, ex.target, cfg.label_smoothing, config.vocab_size).values
        vis_tot += TR.qae_loss(out.p_qae_vis, ex.query, config.vocab_size).values
        aud_tot += TR.qae_loss(out.p_qae_aud, ex.query, config.vocab_size).values
    n = len(val_set)
    print(f"val decomposition: L_gen={gen_tot/n:.4f} L_vis={vis_tot/n:.4f} L_aud={aud_tot/n:.4f}")

    tf_match = tf_total = 0
    raw_val_all = corpus[args.n_train:]
    mode_tf = {"qq": [0, 0], "ss": [0, 0]}
    pos_tf = {}
    for ex, raw in zip(val_set, raw_val_all):
        out = M.forward(ex, params, with_qae=False)
        target = D.strip_padding(ex.target)
        pred = np.argmax(out.p_vocab.values, axis=1)
        hits = (pred[: len(target)] == target)
        tf_match += int(hits.sum())
        tf_total += len(target)
        mw = raw.query.split()[0]
        mode_tf[mw][0] += int(hits.sum()); mode_tf[mw][1] += len(target)
        for p, h in enumerate(hits):
            key = (mw, p)
            a, b = pos_tf.get(key, (0, 0))
            pos_tf[key] = (a + int(h), b + 1)
    print(f"teacher-forced token accuracy: {tf_match/tf_total:.4f}")
    for mw, (a, b) in mode_tf.items():
        row = " ".join(f"p{p}={pos_tf[(mw,p)][0]/pos_tf[(mw,p)][1]:.2f}"
                       for p in range(4) if (mw, p) in pos_tf)
        print(f"  TF {mw}: {a/b:.4f}  by position: {row}")

    hyps, refs = [], []
    for ex in val_set:
        hyp = greedy_decode(make_step_fn(ex, params), end_id=D.END_ID, max_len=12)
        ids = hyp.ids[:-1] if hyp.finished else hyp.ids
        hyps.append(list(ids))
        refs.append(list(D.strip_padding(ex.target)[:-1]))
    print(f"greedy exact-token accuracy: {ME.exact_token_accuracy(hyps, refs):.4f}")
    raw_val = corpus[args.n_train:]
    for mode_word in ("qq", "ss"):
        sel = [i for i, ex in enumerate(raw_val) if ex.query.split()[0] == mode_word]
        acc = ME.exact_token_accuracy([hyps[i] for i in sel], [refs[i] for i in sel])
        print(f"  {mode_word} mode ({len(sel)} ex): {acc:.4f}")

    col_names = {0: "history", 1: "summary", 2: "query", 3: "generation"}
    score_sums = np.zeros(4)
    ent = {"summary": [], "query": []}
    rows_seen = 0
    for ex in val_set[:40]:
        enc = M.encode_example(ex, params)
        dec_input = M.decoder_input_ids(ex.target)
        z_res = M.embed_text(dec_input, params)
        z_dec = M.decode_responses(z_res, enc, params)
        source_ids = {k: D.strip_padding(getattr(ex, k)) for k in ("history", "summary", "query")}
        source_reps = {k: M.embed_text(v, params) for k, v in source_ids.items()}
        cols, dists = [], []
        for name, col in P.SOURCE_COLUMNS.items():
            if name in config.pointer_sources:
                ptr = P.pointer_distribution(z_dec, source_reps[name], source_ids[name])
                pv = ptr.probs.values
                ent[name].append(float((-pv * np.log(np.maximum(pv, 1e-12))).sum(axis=1).mean()))
                cols.append(col)
        cols.append(P.GEN_COL)
        scores = P.mixture_scores(source_reps["history"], source_reps["query"],
                                  source_reps["summary"], z_res, z_dec, params.w_ctx,
                                  active_columns=cols)
        sv = scores.values
        for j, c in enumerate(cols):
            score_sums[c] += sv[:, j].sum()
        rows_seen += sv.shape[0]
    print("mean mixture weights:",
          {col_names[c]: round(float(score_sums[c] / rows_seen), 4) for c in sorted(col_names)})
    print("mean pointer entropy:",
          {k: round(float(np.mean(v)), 3) for k, v in ent.items() if v},
          "(uniform over 10 positions = 2.30)")

    print("\nsample decodes (gold || greedy):")
    for ex, hyp, ref in list(zip(val_set, hyps, refs))[: args.dump]:
        print("  mode:", vocab.decode(D.strip_padding(ex.query)[:1])[0],
              "| gold:", " ".join(vocab.decode(ref)),
              "|| hyp:", " ".join(vocab.decode(hyp)))
