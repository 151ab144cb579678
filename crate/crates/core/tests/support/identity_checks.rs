use super::{randn, rng, SEEDS};
use pyrstyle::config::TrainConfig;
use pyrstyle::fixtures;
use pyrstyle::imageio::Image;
use pyrstyle::losses::{content_loss, identity_losses, statistics_distance, style_loss};
use pyrstyle::model::StyleModel;
use pyrstyle::params::{Graph, Init, ParamStore};
use pyrstyle::perceptual::FeatureExtractor;
use pyrstyle::ppe::{encode_positions, EncodingMode, PpeParams, ScaleSpec};
use pyrstyle::tensor::{Tape, Tensor};
use pyrstyle::tokenizer::PatchGrid;
use pyrstyle::transformer::{Decoder, Dims, Encoder};
use rand::seq::SliceRandom;
use rand::Rng;

fn random_image(seed: u64, size: usize) -> Image {
    let mut r = rng(seed);
    Image::new(
        size,
        size,
        (0..size * size * 3).map(|_| r.random::<f64>()).collect(),
    )
    .unwrap()
}

pub fn losses_vanish_on_identical_inputs() {
    for seed in SEEDS {
        let phi = FeatureExtractor::seeded(seed, &[8, 16, 32, 64]).unwrap();
        let img = random_image(seed, 32);
        let other = random_image(seed + 100, 32);
        let mut tape = Tape::new();
        let a = tape.constant(&img.to_tensor());
        let b = tape.constant(&other.to_tensor());
        let lc = content_loss(&mut tape, &phi, a, a).unwrap();
        let ls = style_loss(&mut tape, &phi, a, a).unwrap();
        let (id1, id2) = identity_losses(&mut tape, &phi, a, a, b, b).unwrap();
        for v in [lc, ls, id1, id2] {
            assert_eq!(tape.item(v).unwrap(), 0.0, "seed {seed}");
        }
        let lc = content_loss(&mut tape, &phi, a, b).unwrap();
        assert!(tape.item(lc).unwrap() > 0.0);
    }
}

pub fn style_statistics_ignore_spatial_permutation() {
    for seed in SEEDS {
        let mut r = rng(seed);
        let (h, w, c) = (4, 4, 8);
        let map = randn(&mut r, &[h, w, c]);
        let mut order: Vec<usize> = (0..h * w).collect();
        order.shuffle(&mut r);
        let permuted = Tensor::from_fn(&[h, w, c], |i| map.data()[order[i / c] * c + i % c]);
        let mut tape = Tape::new();
        let a = tape.constant(&map);
        let b = tape.constant(&permuted);
        let d = statistics_distance(&mut tape, &[a], &[b]).unwrap();
        assert!(tape.item(d).unwrap() < 1e-10);
    }
}

fn small_config(encoding: EncodingMode) -> TrainConfig {
    TrainConfig {
        image_size: 32,
        encoding,
        ..TrainConfig::default()
    }
}

pub fn every_attention_row_sums_to_one() {
    for seed in SEEDS {
        let config = TrainConfig {
            seed,
            ..small_config(EncodingMode::Ppe)
        };
        let model = StyleModel::new(&config).unwrap();
        let mut tape = Tape::new();
        let vars = model.store.bind_frozen(&mut tape);
        let mut g = Graph::new(&mut tape, &vars);
        let c = g.tape.constant(&random_image(seed, 32).to_tensor());
        let s = g.tape.constant(&fixtures::stripes(32).to_tensor());
        model.forward(&mut g, c, s).unwrap();
        // Two encoder stacks and two attention blocks per decoder layer.
        let per_head = 2 * config.encoder_layers + 2 * config.decoder_layers;
        assert_eq!(g.attention.len(), per_head * config.heads);
        let l = model.grid.token_count();
        for &a in &g.attention {
            for row in g.tape.value(a).chunks(l) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(row.iter().all(|&p| p >= 0.0));
            }
        }
    }
}

pub fn encoder_is_permutation_equivariant() {
    let dims = Dims::new(32, 4, 128).unwrap();
    let l = 16;
    for seed in SEEDS {
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &mut Init::new(seed), "enc", dims, 2).unwrap();
        let mut r = rng(seed);
        let z = randn(&mut r, &[l, dims.d]);
        let mut perm: Vec<usize> = (0..l).collect();
        perm.shuffle(&mut r);
        let zp = Tensor::from_fn(&[l, dims.d], |i| {
            z.data()[perm[i / dims.d] * dims.d + i % dims.d]
        });

        let mut tape = Tape::new();
        let vars = store.bind_frozen(&mut tape);
        let mut g = Graph::new(&mut tape, &vars);
        let (a, b) = (g.tape.constant(&z), g.tape.constant(&zp));
        let ya = enc.forward(&mut g, a).unwrap();
        let yb = enc.forward(&mut g, b).unwrap();
        let (ya, yb) = (tape.value(ya), tape.value(yb));
        for (i, &src) in perm.iter().enumerate() {
            for j in 0..dims.d {
                let diff = (yb[i * dims.d + j] - ya[src * dims.d + j]).abs();
                assert!(diff < 1e-10, "seed {seed} row {i}: {diff}");
            }
        }
    }
}

pub fn encoder_without_layers_is_identity() {
    let dims = Dims::new(8, 2, 16).unwrap();
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, &mut Init::new(0), "enc", dims, 0).unwrap();
    let z = randn(&mut rng(0), &[4, 8]);
    let mut tape = Tape::new();
    let vars = store.bind(&mut tape);
    let mut g = Graph::new(&mut tape, &vars);
    let v = g.tape.constant(&z);
    let out = enc.forward(&mut g, v).unwrap();
    assert_eq!(tape.value(out), z.data());
}

pub fn decoder_ignores_style_token_order() {
    let dims = Dims::new(8, 2, 16).unwrap();
    for seed in SEEDS {
        let mut store = ParamStore::new();
        let dec = Decoder::new(&mut store, &mut Init::new(seed), "dec", dims, 2).unwrap();
        let mut r = rng(seed);
        let content = randn(&mut r, &[4, 8]);
        let style = randn(&mut r, &[4, 8]);
        let mut swapped = style.clone().into_data();
        for j in 0..8 {
            swapped.swap(j, 16 + j);
        }
        let swapped = Tensor::new(vec![4, 8], swapped).unwrap();
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let mut g = Graph::new(&mut tape, &vars);
        let c = g.tape.constant(&content);
        let (s1, s2) = (g.tape.constant(&style), g.tape.constant(&swapped));
        let a = dec.forward(&mut g, c, s1).unwrap();
        let b = dec.forward(&mut g, c, s2).unwrap();
        let diff = tape
            .value(a)
            .iter()
            .zip(tape.value(b))
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12, "seed {seed}: {diff}");
    }
}

pub fn constant_image_gives_identical_positional_codes() {
    let d = 32;
    for seed in SEEDS {
        let mut store = ParamStore::new();
        let ppe =
            PpeParams::new(&mut store, &mut Init::new(seed), ScaleSpec::standard(8), d).unwrap();
        let v: f64 = rng(seed).random();
        let img = Image::filled(32, 32, [v, 1.0 - v, 0.5 * v]);
        let grid = PatchGrid::new(32, 32, 8).unwrap();
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let mut g = Graph::new(&mut tape, &vars);
        let px = g.tape.constant(&img.to_tensor());
        let pe = encode_positions(&mut g, px, &grid, EncodingMode::Ppe, Some(&ppe), d).unwrap();
        let rows: Vec<&[f64]> = tape.value(pe).chunks(d).collect();
        for r in &rows[1..] {
            let diff = r
                .iter()
                .zip(rows[0])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-10, "seed {seed}: {diff}");
        }
    }
}

pub fn fixed_encodings() {
    let grid = PatchGrid::new(32, 32, 8).unwrap();
    let store = ParamStore::new();
    let mut tape = Tape::new();
    let vars = store.bind(&mut tape);
    let mut g = Graph::new(&mut tape, &vars);
    let px = g.tape.constant(&fixtures::radial(32).to_tensor());
    let none = encode_positions(&mut g, px, &grid, EncodingMode::None, None, 16).unwrap();
    let sin = encode_positions(&mut g, px, &grid, EncodingMode::Sinusoidal, None, 16).unwrap();
    assert_eq!(tape.shape(none), [16, 16]);
    assert!(tape.value(none).iter().all(|&v| v == 0.0));
    let first = &tape.value(sin)[..16];
    for (j, &v) in first.iter().enumerate() {
        assert_eq!(v, if j % 2 == 0 { 0.0 } else { 1.0 });
    }
}
