use std::collections::BTreeMap;

use super::*;
use pyrstyle::imageio::Image;
use pyrstyle::losses::{
    content_loss, identity_losses, rl_augmented_loss, style_loss, total_loss, LossTerms,
    LossWeights, RatingFeedback,
};
use pyrstyle::params::{Graph, Init, ParamStore};
use pyrstyle::perceptual::{stats, FeatureExtractor, STATS_EPS};
use pyrstyle::ppe::{
    encode_positions, encode_window, extract_window, fuse, EncodingMode, PpeParams, ScaleSpec,
};
use pyrstyle::tensor::{Tape, Tensor};
use pyrstyle::tokenizer::PatchGrid;
use pyrstyle::transformer::{mha, AttentionParams, Decoder, Dims, Encoder, LN_EPS};
use rand::Rng;

fn random_image(seed: u64, h: usize, w: usize) -> Image {
    let mut r = rng(seed);
    Image::new(h, w, (0..h * w * 3).map(|_| r.random::<f64>()).collect()).unwrap()
}

fn as_map(img: &Image) -> Map {
    Map {
        h: img.height(),
        w: img.width(),
        c: 3,
        data: img.pixels().to_vec(),
    }
}

/// Replace every parameter with N(0, 1) draws so oracles see non-trivial
/// gains and biases.
fn randomize(store: &mut ParamStore, seed: u64) {
    let mut r = rng(seed.wrapping_add(77));
    for t in store.tensors_mut() {
        *t = randn(&mut r, t.shape());
    }
}

fn data(store: &ParamStore, id: pyrstyle::params::ParamId) -> &[f64] {
    store.get(id).data()
}

pub fn windows_match_reflect_oracle() {
    for seed in SEEDS {
        for (h, w) in [(32, 32), (16, 24)] {
            let img = random_image(seed, h, w);
            let grid = PatchGrid::new(h, w, 8).unwrap();
            for t in 0..grid.token_count() {
                for size in [8, 16, 32] {
                    let got = extract_window(&img, grid.center(t), size).unwrap();
                    let want = window(img.pixels(), h, w, grid.center(t), size);
                    assert_eq!(got.pixels(), &want[..], "seed {seed} token {t} size {size}");
                }
            }
        }
    }
}

pub fn corner_window_on_ramp_uses_mirror_indices() {
    let (h, w) = (16, 16);
    let img = Image::from_fn(h, w, |y, x, c| (y * 100 + x * 3 + c) as f64);
    let grid = PatchGrid::new(h, w, 8).unwrap();
    let win = extract_window(&img, grid.center(0), 16).unwrap();
    // Centre (4, 4), window rows -4..12: row -4 mirrors to 4, col -1 to 1.
    assert_eq!(win.get(0, 0, 0), (4 * 100 + 4 * 3) as f64);
    assert_eq!(win.get(0, 3, 1), (4 * 100 + 3 + 1) as f64);
    assert_eq!(win.get(4, 4, 2), 2.0);
}

pub fn encode_window_matches_conv_oracle() {
    for seed in SEEDS {
        let mut r = rng(seed);
        for size in [8, 16, 32] {
            for k in [1, 3, 5] {
                let win = randn(&mut r, &[size, size, 3]);
                let kernel = randn(&mut r, &[k, k, 3, 8]);
                let bias = randn(&mut r, &[8]);
                let store = ParamStore::new();
                let mut tape = Tape::new();
                let vars = store.bind(&mut tape);
                let mut g = Graph::new(&mut tape, &vars);
                let (wv, kv, bv) = (
                    g.tape.constant(&win),
                    g.tape.constant(&kernel),
                    g.tape.constant(&bias),
                );
                let out = encode_window(&mut g, wv, kv, bv).unwrap();
                let got = tape.value(out).to_vec();

                let x = Map {
                    h: size,
                    w: size,
                    c: 3,
                    data: win.data().to_vec(),
                };
                let mut y = conv(&x, kernel.data(), k, 8, 1);
                bias_relu(&mut y, bias.data());
                let want = channel_mean(&y);
                let e = rel_error(&got, &want);
                assert!(e < 1e-10, "seed {seed} size {size} k {k}: {e}");
            }
        }
    }
}

fn ppe_setup(seed: u64, d: usize) -> (ParamStore, PpeParams) {
    let mut store = ParamStore::new();
    let mut init = Init::new(seed);
    let ppe = PpeParams::new(&mut store, &mut init, ScaleSpec::standard(8), d).unwrap();
    randomize(&mut store, seed);
    (store, ppe)
}

pub fn fuse_matches_direct_summation() {
    let (l, c, d) = (4, 8, 16);
    for seed in SEEDS {
        let (store, ppe) = ppe_setup(seed, d);
        let mut r = rng(seed);
        let feats: Vec<((usize, usize), Tensor)> = ppe
            .spec
            .pairs()
            .map(|key| (key, randn(&mut r, &[l, c])))
            .collect();
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let mut g = Graph::new(&mut tape, &vars);
        let mut map = BTreeMap::new();
        for (key, t) in &feats {
            map.insert(*key, g.tape.constant(t));
        }
        let out = fuse(&mut g, &map, &ppe).unwrap();
        let got = tape.value(out).to_vec();

        let mut want = vec![0.0; l * d];
        for pair in &ppe.pairs {
            let f = &feats
                .iter()
                .find(|(k, _)| *k == (pair.scale, pair.kernel_size))
                .unwrap()
                .1;
            let term = matmul(f.data(), l, c, data(&store, pair.fusion), d);
            want = add(&want, &term);
        }
        let e = rel_error(&got, &want);
        assert!(e < 1e-12, "seed {seed}: {e}");
    }
}

pub fn ppe_encoding_matches_composed_oracle() {
    let d = 16;
    for seed in SEEDS {
        let (store, ppe) = ppe_setup(seed, d);
        let img = random_image(seed, 16, 16);
        let grid = PatchGrid::new(16, 16, 8).unwrap();
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let mut g = Graph::new(&mut tape, &vars);
        let px = g.tape.constant(&img.to_tensor());
        let out = encode_positions(&mut g, px, &grid, EncodingMode::Ppe, Some(&ppe), d).unwrap();
        let got = tape.value(out).to_vec();

        let l = grid.token_count();
        let mut want = vec![0.0; l * d];
        for t in 0..l {
            for pair in &ppe.pairs {
                let s = pair.scale;
                let win = Map {
                    h: s,
                    w: s,
                    c: 3,
                    data: window(img.pixels(), 16, 16, grid.center(t), s),
                };
                let kernel = store.get(pair.kernel);
                let mut y = conv(&win, kernel.data(), pair.kernel_size, ppe.spec.channels, 1);
                bias_relu(&mut y, data(&store, pair.bias));
                let f = channel_mean(&y);
                let row = matmul(&f, 1, f.len(), data(&store, pair.fusion), d);
                for j in 0..d {
                    want[t * d + j] += row[j];
                }
            }
        }
        let e = rel_error(&got, &want);
        assert!(e < 1e-10, "seed {seed}: {e}");
    }
}

pub fn attention_matches_per_head_oracle() {
    for seed in SEEDS {
        for (l, lk, d, heads) in [(4, 4, 8, 2), (5, 3, 12, 3), (1, 1, 8, 4)] {
            let mut store = ParamStore::new();
            let mut init = Init::new(seed);
            let p = AttentionParams::new(&mut store, &mut init, "attn", d).unwrap();
            let mut r = rng(seed);
            let xq = randn(&mut r, &[l, d]);
            let xkv = randn(&mut r, &[lk, d]);
            let mut tape = Tape::new();
            let vars = store.bind(&mut tape);
            let mut g = Graph::new(&mut tape, &vars);
            let (q, kv) = (g.tape.constant(&xq), g.tape.constant(&xkv));
            let out = mha(&mut g, q, kv, kv, &p, heads).unwrap();
            let weights: Vec<Vec<f64>> = g
                .attention
                .iter()
                .map(|&v| g.tape.value(v).to_vec())
                .collect();
            let got = tape.value(out).to_vec();

            let w = AttnWeights {
                wq: data(&store, p.wq),
                wk: data(&store, p.wk),
                wv: data(&store, p.wv),
                wo: data(&store, p.wo),
            };
            let want = super::mha(xq.data(), xkv.data(), l, lk, d, heads, &w);
            let e = rel_error(&got, &want);
            assert!(e < 1e-10, "seed {seed} L {l} d {d}: {e}");

            let q = matmul(xq.data(), l, d, w.wq, d);
            let k = matmul(xkv.data(), lk, d, w.wk, d);
            let v = matmul(xkv.data(), lk, d, w.wv, d);
            let (_, want_w) = attention(&q, &k, &v, l, lk, d, heads, w.wo);
            assert_eq!(weights.len(), heads);
            for (a, b) in weights.iter().zip(&want_w) {
                assert!(rel_error(a, b) < 1e-10);
                for row in a.chunks(lk) {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }
    }
}

fn ffn_of<'a>(
    store: &'a ParamStore,
    f: &pyrstyle::transformer::FfnParams,
    hidden: usize,
) -> FfnWeights<'a> {
    FfnWeights {
        w1: data(store, f.w1),
        b1: data(store, f.b1),
        w2: data(store, f.w2),
        b2: data(store, f.b2),
        hidden,
    }
}

fn ln(
    store: &ParamStore,
    x: &[f64],
    rows: usize,
    d: usize,
    p: &pyrstyle::transformer::NormParams,
) -> Vec<f64> {
    layer_norm(x, rows, d, data(store, p.gain), data(store, p.bias), LN_EPS)
}

pub fn encoder_matches_oracle() {
    let dims = Dims::new(8, 2, 16).unwrap();
    let (l, d) = (4, dims.d);
    for seed in SEEDS {
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &mut Init::new(seed), "enc", dims, 2).unwrap();
        randomize(&mut store, seed);
        let z = randn(&mut rng(seed), &[l, d]);
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let mut g = Graph::new(&mut tape, &vars);
        let zv = g.tape.constant(&z);
        let out = enc.forward(&mut g, zv).unwrap();
        let got = tape.value(out).to_vec();

        let mut x = z.data().to_vec();
        for layer in &enc.layers {
            let a = &layer.attention;
            let w = AttnWeights {
                wq: data(&store, a.wq),
                wk: data(&store, a.wk),
                wv: data(&store, a.wv),
                wo: data(&store, a.wo),
            };
            let u = ln(
                &store,
                &add(&super::mha(&x, &x, l, l, d, dims.heads, &w), &x),
                l,
                d,
                &layer.norm1,
            );
            let f = ffn(&u, l, d, &ffn_of(&store, &layer.ffn, dims.ffn));
            x = ln(&store, &add(&f, &u), l, d, &layer.norm2);
        }
        let e = rel_error(&got, &x);
        assert!(e < 1e-10, "seed {seed}: {e}");
    }
}

pub fn decoder_matches_straight_line_oracle() {
    let dims = Dims::new(8, 2, 16).unwrap();
    let d = dims.d;
    for seed in SEEDS {
        for l in [1, 4] {
            let mut store = ParamStore::new();
            let dec = Decoder::new(&mut store, &mut Init::new(seed), "dec", dims, 2).unwrap();
            randomize(&mut store, seed);
            let mut r = rng(seed);
            let yc = randn(&mut r, &[l, d]);
            let ys = randn(&mut r, &[l, d]);
            let mut tape = Tape::new();
            let vars = store.bind(&mut tape);
            let mut g = Graph::new(&mut tape, &vars);
            let (c, s) = (g.tape.constant(&yc), g.tape.constant(&ys));
            let out = dec.forward(&mut g, c, s).unwrap();
            let got = tape.value(out).to_vec();

            let mut x = yc.data().to_vec();
            for layer in &dec.layers {
                let p = &layer.cross;
                let q1 = matmul(&x, l, d, data(&store, p.wq), d);
                let k1 = matmul(ys.data(), l, d, data(&store, p.wk), d);
                let v1 = matmul(ys.data(), l, d, data(&store, p.wv), d);
                let (a, _) = attention(&q1, &k1, &v1, l, l, d, dims.heads, data(&store, p.wo));
                let x0 = ln(&store, &add(&a, &x), l, d, &layer.norm1);
                let (a, _) = attention(
                    &x0,
                    &k1,
                    &v1,
                    l,
                    l,
                    d,
                    dims.heads,
                    data(&store, layer.second_wo),
                );
                let x1 = ln(&store, &add(&a, &x0), l, d, &layer.norm2);
                let f = ffn(&x1, l, d, &ffn_of(&store, &layer.ffn, dims.ffn));
                x = ln(&store, &add(&f, &x1), l, d, &layer.norm3);
            }
            let e = rel_error(&got, &x);
            assert!(e < 1e-10, "seed {seed} L {l}: {e}");
        }
    }
}

pub fn feature_statistics_match_two_pass_oracle() {
    for seed in SEEDS {
        let mut r = rng(seed);
        for (h, w, c) in [(4, 4, 8), (2, 3, 5), (1, 1, 3), (16, 16, 16)] {
            let t = randn(&mut r, &[h, w, c]);
            let mut tape = Tape::new();
            let v = tape.constant(&t);
            let (mu, sd) = stats(&mut tape, v);
            let (want_mu, want_sd) = channel_stats(
                &Map {
                    h,
                    w,
                    c,
                    data: t.data().to_vec(),
                },
                STATS_EPS,
            );
            assert!(rel_error(tape.value(mu), &want_mu) < 1e-12, "seed {seed}");
            assert!(rel_error(tape.value(sd), &want_sd) < 1e-12, "seed {seed}");
        }
    }
}

fn phi_layers(phi: &FeatureExtractor) -> Vec<(Vec<f64>, Vec<f64>, usize)> {
    phi.layers()
        .iter()
        .map(|l| {
            (
                l.kernel.data().to_vec(),
                l.bias.data().to_vec(),
                l.kernel.shape()[0],
            )
        })
        .collect()
}

pub fn loss_terms_match_loop_oracle() {
    let weights = LossWeights::default();
    for seed in SEEDS {
        let phi = FeatureExtractor::seeded(seed, &[8, 16, 32, 64]).unwrap();
        let layers = phi_layers(&phi);
        let imgs: Vec<Image> = (0..5)
            .map(|i| random_image(seed * 10 + i, 32, 32))
            .collect();
        let (out, c, s, cc, ss) = (&imgs[0], &imgs[1], &imgs[2], &imgs[3], &imgs[4]);

        let mut tape = Tape::new();
        let [vo, vc, vs, vcc, vss] = [out, c, s, cc, ss].map(|i| tape.constant(&i.to_tensor()));
        let lc = content_loss(&mut tape, &phi, vo, vc).unwrap();
        let ls = style_loss(&mut tape, &phi, vo, vs).unwrap();
        let (id1, id2) = identity_losses(&mut tape, &phi, vcc, vc, vss, vs).unwrap();
        let terms = LossTerms {
            content: lc,
            style: ls,
            identity_pixel: id1,
            identity_feature: id2,
        };
        let total = total_loss(&mut tape, &terms, &weights).unwrap();

        let [fo, fc, fs, fcc, fss] = [out, c, s, cc, ss].map(|i| features(&as_map(i), &layers));
        let want_c = feature_distance(&fo, &fc);
        let want_s = statistics_distance(&fo, &fs, STATS_EPS);
        let want_id1 = mse(cc.pixels(), c.pixels()) + mse(ss.pixels(), s.pixels());
        let want_id2 = feature_distance(&fcc, &fc) + feature_distance(&fss, &fs);
        let want_total = 10.0 * want_c + 7.0 * want_s + 50.0 * want_id1 + want_id2;

        for (name, v, want) in [
            ("l_c", lc, want_c),
            ("l_s", ls, want_s),
            ("l_id1", id1, want_id1),
            ("l_id2", id2, want_id2),
            ("l_total", total, want_total),
        ] {
            let e = scalar_rel_error(tape.item(v).unwrap(), want);
            assert!(e < 1e-10, "seed {seed} {name}: {e}");
        }

        let mut tape = Tape::new();
        let v = tape.constant(&out.to_tensor());
        let got = phi.features(&mut tape, v).unwrap();
        for (g, w) in got.iter().zip(&fo) {
            assert!(rel_error(tape.value(*g), &w.data) < 1e-10);
        }
    }
}

fn scalar_terms(tape: &mut Tape, parts: [f64; 4]) -> LossTerms {
    let [a, b, c, d] = parts.map(|x| tape.constant(&Tensor::scalar(x)));
    LossTerms {
        content: a,
        style: b,
        identity_pixel: c,
        identity_feature: d,
    }
}

pub fn reported_component_values_compose() {
    let mut tape = Tape::new();
    let terms = scalar_terms(&mut tape, [2.0685, 0.8578, 0.0, 0.0]);
    let total = total_loss(&mut tape, &terms, &LossWeights::default()).unwrap();
    assert!((tape.item(total).unwrap() - 26.6896).abs() < 1e-12);

    // softplus(raw) = 0.5
    let raw = (0.5f64.exp() - 1.0).ln();
    let r = tape.constant(&Tensor::scalar(raw));
    let rating = RatingFeedback::new("s", 3, 0).unwrap();
    let l_new = rl_augmented_loss(&mut tape, total, Some(&rating), r).unwrap();
    assert!((tape.item(l_new).unwrap() - 26.9396).abs() < 1e-12);
}

pub fn gamma_gradient_is_penalty_times_sigmoid() {
    for seed in SEEDS {
        let mut r = rng(seed);
        let raw: f64 = r.random_range(-3.0..3.0);
        for rating in 1..=5 {
            let feedback = RatingFeedback::new("s", rating, 0).unwrap();
            let eval = |raw: f64| {
                let mut tape = Tape::new();
                let total = tape.constant(&Tensor::scalar(1.25));
                let v = tape.variable(&Tensor::scalar(raw));
                let out = rl_augmented_loss(&mut tape, total, Some(&feedback), v).unwrap();
                let grad = tape.backward(out).unwrap().wrt(v).unwrap()[0];
                (tape.item(out).unwrap(), grad)
            };
            let (value, grad) = eval(raw);
            let p = (5.0 - rating as f64) / 4.0;
            assert!((value - 1.25 - softplus(raw) * p).abs() < 1e-12);
            let want = p * sigmoid(raw);
            assert!((grad - want).abs() <= 1e-12 * want.abs().max(1.0));
            let h = 1e-5;
            let numeric = (eval(raw + h).0 - eval(raw - h).0) / (2.0 * h);
            let scale = want.abs().max(1e-3);
            assert!(
                (numeric - grad).abs() / scale < 1e-8,
                "rating {rating}: {numeric} vs {grad}"
            );
        }
    }
}
