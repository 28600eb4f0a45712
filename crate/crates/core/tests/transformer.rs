use cogen::tensor::{AttnMask, Graph, ParamStore, Tensor};
use cogen::transformer::{
    encode, output_projection, positional_encoding, Block, Decoder, LayerNorm, Linear, Stack, TransformerConfig, LN_EPS,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(layers: usize) -> TransformerConfig {
    TransformerConfig {
        n_layers: layers,
        n_heads: 2,
        d_model: 4,
        d_ff: 8,
        max_seq_len: 40,
        dropout: 0.0,
    }
}

/// Randomizes norm gains/biases and linear biases, which start as 1 and 0.
fn jitter(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        for x in store.get_mut(id).data_mut() {
            *x += rng.random_range(-0.3..0.3);
        }
    }
}

type Mat = Vec<Vec<f64>>;

fn mat(store: &ParamStore<f64>, id: cogen::tensor::ParamId) -> Mat {
    let t = store.get(id);
    let cols = *t.shape().last().unwrap();
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

fn vecp(store: &ParamStore<f64>, id: cogen::tensor::ParamId) -> Vec<f64> {
    store.get(id).data().to_vec()
}

fn linear(x: &Mat, l: &Linear, s: &ParamStore<f64>) -> Mat {
    let w = mat(s, l.w);
    let b = vecp(s, l.b);
    x.iter()
        .map(|row| {
            (0..b.len())
                .map(|j| b[j] + row.iter().enumerate().map(|(p, v)| v * w[p][j]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn layer_norm(x: &Mat, ln: &LayerNorm, s: &ParamStore<f64>) -> Mat {
    let (g, b) = (vecp(s, ln.gain), vecp(s, ln.bias));
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) / (var + LN_EPS).sqrt() * g[i] + b[i])
                .collect()
        })
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
}

fn attend(q: &Mat, k: &Mat, v: &Mat, heads: usize, allowed: impl Fn(usize, usize) -> bool) -> Mat {
    let d = q[0].len();
    let dh = d / heads;
    let mut out = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..q.len() {
            let scores: Vec<Option<f64>> = (0..k.len())
                .map(|j| {
                    allowed(i, j).then(|| {
                        cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt()
                    })
                })
                .collect();
            let max = scores.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().flatten().map(|s| (s - max).exp()).sum();
            for (j, s) in scores.iter().enumerate() {
                if let Some(s) = s {
                    let w = (s - max).exp() / z;
                    for c in cols.clone() {
                        out[i][c] += w * v[j][c];
                    }
                }
            }
        }
    }
    out
}

/// Pre-norm block written out sublayer by sublayer.
fn block_oracle(b: &Block, s: &ParamStore<f64>, x: &Mat, heads: usize, allowed: impl Fn(usize, usize) -> bool) -> Mat {
    let n = layer_norm(x, &b.ln_attn, s);
    let (q, k, v) = (linear(&n, &b.q, s), linear(&n, &b.k, s), linear(&n, &b.v, s));
    let a = attend(&q, &k, &v, heads, allowed);
    let x = add(x, &linear(&a, &b.o, s));
    let n2 = layer_norm(&x, &b.ln_ffn, s);
    let hidden: Mat = linear(&n2, &b.ff_in, s)
        .into_iter()
        .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
        .collect();
    add(&x, &linear(&hidden, &b.ff_out, s))
}

fn rows(g: &Graph<'_, f64>, v: cogen::tensor::Var) -> Mat {
    let d = g.shape(v)[1];
    g.value(v).chunks(d).map(<[f64]>::to_vec).collect()
}

fn assert_close(a: &Mat, b: &Mat, tol: f64) {
    for (r, s) in a.iter().zip(b) {
        for (x, y) in r.iter().zip(s) {
            assert!((x - y).abs() < tol, "{x} vs {y}");
        }
    }
}

#[test]
fn block_matches_hand_composed_oracle() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let block = Block::register(&mut store, "b", &tiny(1), &mut rng).unwrap();
        jitter(&mut store, &mut rng);
        let x = Tensor::<f64>::randn(vec![5, 4], 1.0, &mut rng);
        let keys = vec![true, false, true, true, true];

        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = block.forward(&mut g, &store, xv, None, &AttnMask::Keys(keys.clone()), 2).unwrap();
        let xm: Mat = x.data().chunks(4).map(<[f64]>::to_vec).collect();
        let want = block_oracle(&block, &store, &xm, 2, |_, j| keys[j]);
        assert_close(&rows(&g, out.out), &want, 1e-5);
    }
}

#[test]
fn single_token_encoding_is_blocks_then_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = tiny(2);
    let mut store = ParamStore::<f64>::new();
    let table = store.register("emb", Tensor::randn(vec![6, 4], 1.0, &mut rng)).unwrap();
    let stack = Stack::register(&mut store, "enc", &cfg, &mut rng).unwrap();
    jitter(&mut store, &mut rng);

    let mut g = Graph::new();
    let enc = encode(&mut g, &store, table, &stack, &[3], &[true], &cfg).unwrap();
    assert_eq!(g.shape(enc.hidden), &[1, 4]);

    let pe = positional_encoding::<f64>(1, 4);
    let emb = mat(&store, table);
    let mut x: Mat = vec![emb[3].iter().zip(pe.data()).map(|(a, b)| a + b).collect()];
    for b in &stack.blocks {
        x = block_oracle(b, &store, &x, 2, |_, _| true);
    }
    let want = layer_norm(&x, &stack.final_ln, &store);
    assert_close(&rows(&g, enc.hidden), &want, 1e-9);
}

#[test]
fn masked_tokens_do_not_reach_visible_states() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = tiny(2);
    let mut store = ParamStore::<f32>::new();
    let table = store.register("emb", Tensor::randn(vec![10, 4], 1.0, &mut rng)).unwrap();
    let stack = Stack::register(&mut store, "enc", &cfg, &mut rng).unwrap();
    let mask = [true, false, true, true, false];

    let run = |tokens: &[u32]| {
        let mut g = Graph::new();
        let e = encode(&mut g, &store, table, &stack, tokens, &mask, &cfg).unwrap();
        g.value(e.hidden).to_vec()
    };
    let a = run(&[1, 2, 3, 4, 5]);
    let b = run(&[1, 9, 3, 4, 7]);
    for i in [0, 2, 3] {
        assert_eq!(a[i * 4..(i + 1) * 4], b[i * 4..(i + 1) * 4], "row {i}");
    }
}

struct DecoderFixture {
    store: ParamStore<f32>,
    table: cogen::tensor::ParamId,
    stack: Stack,
    decoder: Decoder,
    cfg: TransformerConfig,
}

fn decoder_fixture(seed: u64) -> DecoderFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = tiny(2);
    let mut store = ParamStore::<f32>::new();
    let table = store.register("emb", Tensor::randn(vec![10, 4], 1.0, &mut rng)).unwrap();
    let stack = Stack::register(&mut store, "enc", &cfg, &mut rng).unwrap();
    let decoder = Decoder::register(&mut store, "dec", &cfg, &mut rng).unwrap();
    DecoderFixture {
        store,
        table,
        stack,
        decoder,
        cfg,
    }
}

#[test]
fn decoder_is_causal() {
    let f = decoder_fixture(3);
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let inputs = Tensor::<f32>::randn(vec![5, 4], 1.0, &mut rng);
    let mut changed = inputs.clone();
    changed.data_mut()[3 * 4] += 1.5;

    let run = |x: &Tensor<f32>| {
        let mut g = Graph::new();
        let enc = encode(&mut g, &f.store, f.table, &f.stack, &[1, 2, 3], &[true; 3], &f.cfg).unwrap();
        let xv = g.constant(x.clone());
        let s = f.decoder.forward(&mut g, &f.store, xv, &enc).unwrap();
        (g.value(s.h).to_vec(), g.value(s.c).to_vec())
    };
    let (h1, c1) = run(&inputs);
    let (h2, c2) = run(&changed);
    assert_eq!(h1[..12], h2[..12]);
    assert_eq!(c1[..12], c2[..12]);
    assert_ne!(h1[12..16], h2[12..16]);
}

#[test]
fn first_step_attends_only_to_itself() {
    let f = decoder_fixture(4);
    let mut g = Graph::new();
    let enc = encode(&mut g, &f.store, f.table, &f.stack, &[1, 2], &[true; 2], &f.cfg).unwrap();
    let x = g.constant(Tensor::full(vec![1, 4], 0.5));
    let s = f.decoder.forward(&mut g, &f.store, x, &enc).unwrap();
    for a in &s.self_attn {
        let (_, w) = g.attention_weights(*a).unwrap();
        assert!(w.iter().all(|&v| v == 1.0));
    }
}

#[test]
fn incremental_decoding_matches_teacher_forcing() {
    let f = decoder_fixture(6);
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let n = 32;
    let inputs = Tensor::<f32>::randn(vec![n, 4], 1.0, &mut rng);

    let mut g = Graph::new();
    let enc = encode(&mut g, &f.store, f.table, &f.stack, &[4, 5, 6, 7], &[true, true, false, true], &f.cfg).unwrap();
    let xv = g.constant(inputs.clone());
    let full = f.decoder.forward(&mut g, &f.store, xv, &enc).unwrap();
    let (h_full, c_full) = (g.value(full.h).to_vec(), g.value(full.c).to_vec());

    let mut cache = f.decoder.start(&mut g, &f.store, &enc).unwrap();
    for i in 0..n {
        let row = g.constant(Tensor::new(vec![1, 4], inputs.data()[i * 4..(i + 1) * 4].to_vec()).unwrap());
        let s = f.decoder.step(&mut g, &f.store, row, &mut cache).unwrap();
        for (a, b) in g.value(s.h).iter().zip(&h_full[i * 4..]) {
            assert!((a - b).abs() < 1e-5, "h step {i}: {a} vs {b}");
        }
        for (a, b) in g.value(s.c).iter().zip(&c_full[i * 4..]) {
            assert!((a - b).abs() < 1e-5, "c step {i}: {a} vs {b}");
        }
    }
}

#[test]
fn output_projection_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::<f64>::new();
    let proj = Linear::register(&mut store, "out", 6, 5, &mut rng).unwrap();

    let mut g = Graph::new();
    let zeros = g.constant(Tensor::zeros(vec![2, 6]));
    let logits = output_projection(&mut g, &store, zeros, &proj).unwrap();
    let p = g.softmax(logits, 1).unwrap();
    assert!(g.value(p).iter().all(|&x| (x - 0.2).abs() < 1e-15));

    let x = Tensor::<f64>::randn(vec![3, 6], 1.0, &mut rng);
    let xv = g.constant(x.clone());
    let logits = output_projection(&mut g, &store, xv, &proj).unwrap();
    let xm: Mat = x.data().chunks(6).map(<[f64]>::to_vec).collect();
    assert_close(&rows(&g, logits), &linear(&xm, &proj, &store), 1e-12);

    // Two classes whose weights read only feature 0, with opposite signs.
    let mut sel = ParamStore::<f64>::new();
    let w = sel.register("w", Tensor::zeros(vec![3, 2])).unwrap();
    let b = sel.register("b", Tensor::zeros(vec![2])).unwrap();
    sel.get_mut(w).data_mut()[..2].copy_from_slice(&[1.0, -1.0]);
    let lin = Linear { w, b };
    for f0 in [-2.0, -0.1, 0.3, 4.0] {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 3], vec![f0, 7.0, -7.0]).unwrap());
        let l = output_projection(&mut g, &sel, x, &lin).unwrap();
        let v = g.value(l);
        assert_eq!(v[0] > v[1], f0 > 0.0);
    }
}
